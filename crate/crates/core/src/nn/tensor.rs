use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Dense `height x width x channels` tensor, row-major with channels fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            shape: Shape::new(h, w, c),
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self {
            shape: Shape::new(h, w, c),
            data: vec![v; h * w * c],
        }
    }

    /// Panics if `data.len() != h * w * c`.
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            h * w * c,
            "tensor data does not match {h}x{w}x{c}"
        );
        Self {
            shape: Shape::new(h, w, c),
            data,
        }
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self {
            shape: Shape::new(h, w, c),
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn h(&self) -> usize {
        self.shape.h
    }

    pub fn w(&self) -> usize {
        self.shape.w
    }

    pub fn c(&self) -> usize {
        self.shape.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.shape.w + x) * self.shape.c + ch
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.index(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.index(y, x, ch);
        self.data[i] = v;
    }

    /// Channel vector at one cell.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.shape.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = self.index(y, x, 0);
        let c = self.shape.c;
        &mut self.data[i..i + c]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies a `rows x cols` window starting at `(row0, col0)`; cells outside
    /// the source read as zero.
    pub fn window(&self, row0: i64, col0: i64, rows: usize, cols: usize) -> Tensor {
        let mut out = Tensor::zeros(rows, cols, self.shape.c);
        for r in 0..rows {
            let sy = row0 + r as i64;
            if sy < 0 || sy >= self.shape.h as i64 {
                continue;
            }
            for c in 0..cols {
                let sx = col0 + c as i64;
                if sx < 0 || sx >= self.shape.w as i64 {
                    continue;
                }
                out.pixel_mut(r, c)
                    .copy_from_slice(self.pixel(sy as usize, sx as usize));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = A * B (+ C if accumulate)`, all row-major; `A` is `m x k` (stored
/// transposed when `a_t`), `B` is `k x n` (stored transposed when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every slice to the extents described by
    // the strides, so all reads and writes stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // same product from transposed storage
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, true);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn window_reads_zero_outside() {
        let t = Tensor::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64 + 1.0);
        let w = t.window(-1, 0, 3, 2);
        assert_eq!(w.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }
}
