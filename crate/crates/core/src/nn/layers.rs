use rayon::prelude::*;
use thiserror::Error;

use super::tensor::{gemm, Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{block} layer {layer} ({kind}): expected input {expected}, got {actual}")]
    ShapeMismatch {
        block: String,
        layer: usize,
        kind: &'static str,
        expected: String,
        actual: Shape,
    },
    #[error("{block} layer {layer}: {reason}")]
    CacheMismatch {
        block: String,
        layer: usize,
        reason: String,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("weight file: {0}")]
    Format(String),
}

/// Same-padded, stride-1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    /// `(kernel * kernel * cin) x cout`, row-major; row index is `(ky * kernel + kx) * cin + ci`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(kernel: usize, cin: usize, cout: usize) -> Self {
        assert!(kernel % 2 == 1, "conv kernels must be odd-sized");
        Self {
            kernel,
            cin,
            cout,
            weight: vec![0.0; kernel * kernel * cin * cout],
            bias: vec![0.0; cout],
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (h, w, cin) = (x.h(), x.w(), x.c());
        let k = self.kernel;
        let pad = (k / 2) as i64;
        let plen = self.patch_len();
        let mut cols = vec![0.0; h * w * plen];
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[(y * w + xx) * plen..(y * w + xx + 1) * plen];
                for ky in 0..k {
                    let sy = y as i64 + ky as i64 - pad;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as i64 + kx as i64 - pad;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let dst = (ky * k + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(x.pixel(sy as usize, sx as usize));
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], h: usize, w: usize) -> Tensor {
        let k = self.kernel;
        let cin = self.cin;
        let pad = (k / 2) as i64;
        let plen = self.patch_len();
        let mut dx = Tensor::zeros(h, w, cin);
        for y in 0..h {
            for xx in 0..w {
                let row = &dcols[(y * w + xx) * plen..(y * w + xx + 1) * plen];
                for ky in 0..k {
                    let sy = y as i64 + ky as i64 - pad;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as i64 + kx as i64 - pad;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let src = (ky * k + kx) * cin;
                        let px = dx.pixel_mut(sy as usize, sx as usize);
                        for (d, s) in px.iter_mut().zip(&row[src..src + cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward_one(&self, x: &Tensor) -> Tensor {
        let hw = x.h() * x.w();
        let mut out = Vec::with_capacity(hw * self.cout);
        for _ in 0..hw {
            out.extend_from_slice(&self.bias);
        }
        if self.kernel == 1 {
            gemm(
                hw,
                self.cin,
                self.cout,
                x.data(),
                false,
                &self.weight,
                false,
                &mut out,
                true,
            );
        } else {
            let cols = self.im2col(x);
            gemm(
                hw,
                self.patch_len(),
                self.cout,
                &cols,
                false,
                &self.weight,
                false,
                &mut out,
                true,
            );
        }
        Tensor::from_vec(x.h(), x.w(), self.cout, out)
    }

    /// Returns `(dx, dweight, dbias)` for one sample.
    pub fn backward_one(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let hw = x.h() * x.w();
        let plen = self.patch_len();
        let mut dw = vec![0.0; plen * self.cout];
        let mut db = vec![0.0; self.cout];
        for px in dy.data().chunks_exact(self.cout) {
            for (d, g) in db.iter_mut().zip(px) {
                *d += g;
            }
        }
        let dx = if self.kernel == 1 {
            gemm(
                plen,
                hw,
                self.cout,
                x.data(),
                true,
                dy.data(),
                false,
                &mut dw,
                false,
            );
            let mut dx = vec![0.0; hw * self.cin];
            gemm(
                hw,
                self.cout,
                self.cin,
                dy.data(),
                false,
                &self.weight,
                true,
                &mut dx,
                false,
            );
            Tensor::from_vec(x.h(), x.w(), self.cin, dx)
        } else {
            let cols = self.im2col(x);
            gemm(
                plen,
                hw,
                self.cout,
                &cols,
                true,
                dy.data(),
                false,
                &mut dw,
                false,
            );
            let mut dcols = vec![0.0; hw * plen];
            gemm(
                hw,
                self.cout,
                plen,
                dy.data(),
                false,
                &self.weight,
                true,
                &mut dcols,
                false,
            );
            self.col2im(&dcols, x.h(), x.w())
        };
        (dx, dw, db)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub c: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    LeakyRelu,
    MaxPool,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::LeakyRelu => "leaky_relu",
            Layer::MaxPool => "maxpool",
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn output_shape(&self, s: Shape) -> Shape {
        match self {
            Layer::Conv(c) => Shape::new(s.h, s.w, c.cout),
            Layer::MaxPool => Shape::new(s.h / 2, s.w / 2, s.c),
            _ => s,
        }
    }
}

/// What a Train-mode forward keeps for the backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv {
        inputs: Vec<Tensor>,
    },
    BatchNorm {
        xhat: Vec<Tensor>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        count: usize,
    },
    LeakyRelu {
        inputs: Vec<Tensor>,
    },
    MaxPool {
        argmax: Vec<Vec<u32>>,
        shapes: Vec<Shape>,
    },
}

/// Parameter gradients of one layer, in `Layer::params` order.
pub type LayerGrads = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct SeqGrads {
    pub layers: Vec<LayerGrads>,
}

impl SeqGrads {
    pub fn zeros_like(seq: &Sequential) -> Self {
        Self {
            layers: seq
                .layers
                .iter()
                .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &SeqGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (pa, pb) in a.iter_mut().zip(b) {
                for (x, y) in pa.iter_mut().zip(pb) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for p in l {
                for x in p {
                    *x *= s;
                }
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers.iter().flatten().flatten().map(|x| x * x).sum()
    }
}

fn sum_ordered(parts: Vec<Vec<f64>>) -> Vec<f64> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        for (a, b) in acc.iter_mut().zip(&p) {
            *a += b;
        }
    }
    acc
}

/// An ordered stack of layers without shortcuts.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    pub fn pool_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool))
            .count()
    }

    pub fn output_channels(&self, input_channels: usize) -> usize {
        self.layers.iter().fold(input_channels, |c, l| match l {
            Layer::Conv(conv) => conv.cout,
            _ => c,
        })
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv(c) => Some(c.cin),
            Layer::BatchNorm(b) => Some(b.c),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn check_input(&self, idx: usize, layer: &Layer, s: Shape) -> Result<(), NnError> {
        let err = |expected: String| NnError::ShapeMismatch {
            block: self.name.clone(),
            layer: idx,
            kind: layer.kind(),
            expected,
            actual: s,
        };
        match layer {
            Layer::Conv(c) if s.c != c.cin => Err(err(format!("HxWx{}", c.cin))),
            Layer::BatchNorm(b) if s.c != b.c => Err(err(format!("HxWx{}", b.c))),
            Layer::MaxPool if s.h % 2 != 0 || s.w % 2 != 0 || s.h == 0 || s.w == 0 => {
                Err(err("even, non-zero height and width".to_string()))
            }
            _ => Ok(()),
        }
    }

    /// Eval-mode forward of a single sample.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (mut out, _) = self.forward(std::slice::from_ref(x), Mode::Eval)?;
        Ok(out.pop().expect("one output per input"))
    }

    /// Forward over a batch. Train mode uses batch statistics and returns the
    /// caches; Eval mode uses running statistics and returns no caches. The
    /// layer itself is never mutated, see [`Sequential::update_running_stats`].
    pub fn forward(
        &self,
        xs: &[Tensor],
        mode: Mode,
    ) -> Result<(Vec<Tensor>, Vec<LayerCache>), NnError> {
        if xs.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let mut acts: Vec<Tensor> = xs.to_vec();
        let mut caches = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            for a in &acts {
                self.check_input(idx, layer, a.shape())?;
            }
            let (next, cache) = forward_layer(layer, acts, mode);
            acts = next;
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        Ok((acts, caches))
    }

    /// Backward through a Train-mode forward. Returns input gradients and
    /// parameter gradients summed over the batch.
    pub fn backward(
        &self,
        caches: &[LayerCache],
        upstream: Vec<Tensor>,
    ) -> Result<(Vec<Tensor>, SeqGrads), NnError> {
        if caches.len() != self.layers.len() {
            return Err(NnError::CacheMismatch {
                block: self.name.clone(),
                layer: caches.len(),
                reason: format!("{} caches for {} layers", caches.len(), self.layers.len()),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dys = upstream;
        for (idx, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (dx, g) =
                backward_layer(layer, cache, dys).map_err(|reason| NnError::CacheMismatch {
                    block: self.name.clone(),
                    layer: idx,
                    reason,
                })?;
            dys = dx;
            grads.push(g);
        }
        grads.reverse();
        Ok((dys, SeqGrads { layers: grads }))
    }

    /// Folds the batch statistics of a Train-mode forward into the running stats.
    pub fn update_running_stats(&mut self, caches: &[LayerCache]) {
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            if let (
                Layer::BatchNorm(bn),
                LayerCache::BatchNorm {
                    mean, var, count, ..
                },
            ) = (layer, cache)
            {
                let unbias = if *count > 1 {
                    *count as f64 / (*count as f64 - 1.0)
                } else {
                    1.0
                };
                for ch in 0..bn.c {
                    bn.running_mean[ch] =
                        (1.0 - BN_MOMENTUM) * bn.running_mean[ch] + BN_MOMENTUM * mean[ch];
                    bn.running_var[ch] =
                        (1.0 - BN_MOMENTUM) * bn.running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
            }
        }
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        self.layers.iter().fold(input, |s, l| l.output_shape(s))
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn forward_layer(layer: &Layer, xs: Vec<Tensor>, mode: Mode) -> (Vec<Tensor>, Option<LayerCache>) {
    let train = mode == Mode::Train;
    match layer {
        Layer::Conv(conv) => {
            let out: Vec<Tensor> = xs.par_iter().map(|x| conv.forward_one(x)).collect();
            (out, train.then_some(LayerCache::Conv { inputs: xs }))
        }
        Layer::LeakyRelu => {
            let out: Vec<Tensor> = xs
                .iter()
                .map(|x| {
                    Tensor::from_vec(
                        x.h(),
                        x.w(),
                        x.c(),
                        x.data().iter().map(|&v| leaky(v)).collect(),
                    )
                })
                .collect();
            (out, train.then_some(LayerCache::LeakyRelu { inputs: xs }))
        }
        Layer::MaxPool => {
            let results: Vec<(Tensor, Vec<u32>)> = xs.par_iter().map(maxpool_one).collect();
            let shapes = xs.iter().map(Tensor::shape).collect();
            let (out, argmax): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            (out, train.then_some(LayerCache::MaxPool { argmax, shapes }))
        }
        Layer::BatchNorm(bn) => {
            if train {
                let (out, cache) = batchnorm_train(bn, &xs);
                (out, Some(cache))
            } else {
                let scale: Vec<f64> = (0..bn.c)
                    .map(|c| bn.gamma[c] / (bn.running_var[c] + BN_EPS).sqrt())
                    .collect();
                let out = xs
                    .iter()
                    .map(|x| {
                        let mut t = x.clone();
                        for px in t.data_mut().chunks_exact_mut(bn.c) {
                            for (c, v) in px.iter_mut().enumerate() {
                                *v = (*v - bn.running_mean[c]) * scale[c] + bn.beta[c];
                            }
                        }
                        t
                    })
                    .collect();
                (out, None)
            }
        }
    }
}

fn maxpool_one(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow, c) = (x.h() / 2, x.w() / 2, x.c());
    let mut out = Tensor::zeros(oh, ow, c);
    let mut arg = vec![0u32; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                // first maximum in row-major scan order wins ties
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = x.index(2 * y + dy, 2 * xx + dx, ch);
                    let v = x.data()[i];
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                let o = out.index(y, xx, ch);
                out.data_mut()[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

fn batchnorm_train(bn: &BatchNorm, xs: &[Tensor]) -> (Vec<Tensor>, LayerCache) {
    let c = bn.c;
    let count: usize = xs.iter().map(|x| x.h() * x.w()).sum();
    let n = count as f64;
    let mut mean = vec![0.0; c];
    for x in xs {
        for px in x.data().chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for x in xs {
        for px in x.data().chunks_exact(c) {
            for ch in 0..c {
                let d = px[ch] - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xs.len());
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let mut xh = x.clone();
        for px in xh.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = (px[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let mut y = xh.clone();
        for px in y.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = bn.gamma[ch] * px[ch] + bn.beta[ch];
            }
        }
        xhat.push(xh);
        out.push(y);
    }
    (
        out,
        LayerCache::BatchNorm {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    )
}

fn backward_layer(
    layer: &Layer,
    cache: &LayerCache,
    dys: Vec<Tensor>,
) -> Result<(Vec<Tensor>, LayerGrads), String> {
    match (layer, cache) {
        (Layer::Conv(conv), LayerCache::Conv { inputs }) => {
            if inputs.len() != dys.len() {
                return Err("batch size differs from cached forward".into());
            }
            for (x, dy) in inputs.iter().zip(&dys) {
                if dy.shape() != Shape::new(x.h(), x.w(), conv.cout) {
                    return Err(format!(
                        "upstream gradient {} does not match output",
                        dy.shape()
                    ));
                }
            }
            let parts: Vec<(Tensor, Vec<f64>, Vec<f64>)> = inputs
                .par_iter()
                .zip(dys.par_iter())
                .map(|(x, dy)| conv.backward_one(x, dy))
                .collect();
            let mut dxs = Vec::with_capacity(parts.len());
            let mut dws = Vec::with_capacity(parts.len());
            let mut dbs = Vec::with_capacity(parts.len());
            for (dx, dw, db) in parts {
                dxs.push(dx);
                dws.push(dw);
                dbs.push(db);
            }
            Ok((dxs, vec![sum_ordered(dws), sum_ordered(dbs)]))
        }
        (Layer::LeakyRelu, LayerCache::LeakyRelu { inputs }) => {
            if inputs.len() != dys.len() {
                return Err("batch size differs from cached forward".into());
            }
            let mut out = Vec::with_capacity(dys.len());
            for (x, mut dy) in inputs.iter().zip(dys) {
                if dy.shape() != x.shape() {
                    return Err(format!(
                        "upstream gradient {} does not match output",
                        dy.shape()
                    ));
                }
                for (g, &v) in dy.data_mut().iter_mut().zip(x.data()) {
                    if v <= 0.0 {
                        *g *= LEAKY_SLOPE;
                    }
                }
                out.push(dy);
            }
            Ok((out, vec![]))
        }
        (Layer::MaxPool, LayerCache::MaxPool { argmax, shapes }) => {
            if argmax.len() != dys.len() {
                return Err("batch size differs from cached forward".into());
            }
            let mut out = Vec::with_capacity(dys.len());
            for ((arg, s), dy) in argmax.iter().zip(shapes).zip(&dys) {
                if dy.shape().len() != arg.len() {
                    return Err(format!(
                        "upstream gradient {} does not match output",
                        dy.shape()
                    ));
                }
                let mut dx = Tensor::zeros(s.h, s.w, s.c);
                for (g, &i) in dy.data().iter().zip(arg) {
                    dx.data_mut()[i as usize] += g;
                }
                out.push(dx);
            }
            Ok((out, vec![]))
        }
        (
            Layer::BatchNorm(bn),
            LayerCache::BatchNorm {
                xhat,
                inv_std,
                count,
                ..
            },
        ) => {
            if xhat.len() != dys.len() {
                return Err("batch size differs from cached forward".into());
            }
            let c = bn.c;
            let n = *count as f64;
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for (xh, dy) in xhat.iter().zip(&dys) {
                if dy.shape() != xh.shape() {
                    return Err(format!(
                        "upstream gradient {} does not match output",
                        dy.shape()
                    ));
                }
                for (px, g) in xh.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += g[ch];
                        sum_dy_xhat[ch] += g[ch] * px[ch];
                    }
                }
            }
            let mut out = Vec::with_capacity(dys.len());
            for (xh, mut dy) in xhat.iter().zip(dys) {
                for (g, px) in dy
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(xh.data().chunks_exact(c))
                {
                    for ch in 0..c {
                        let k = bn.gamma[ch] * inv_std[ch] / n;
                        g[ch] = k * (n * g[ch] - sum_dy[ch] - px[ch] * sum_dy_xhat[ch]);
                    }
                }
                out.push(dy);
            }
            Ok((out, vec![sum_dy_xhat, sum_dy]))
        }
        (l, _) => Err(format!("cache kind does not match {} layer", l.kind())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(layers: Vec<Layer>) -> Sequential {
        Sequential::new("test", layers)
    }

    #[test]
    fn leaky_relu_forward_and_backward() {
        let s = seq(vec![Layer::LeakyRelu]);
        let x = Tensor::from_vec(1, 3, 1, vec![-1.0, 0.0, 2.0]);
        let (y, caches) = s.forward(std::slice::from_ref(&x), Mode::Train).unwrap();
        assert_eq!(y[0].data(), &[-0.1, 0.0, 2.0]);
        let (dx, _) = s
            .backward(&caches, vec![Tensor::filled(1, 3, 1, 1.0)])
            .unwrap();
        assert_eq!(dx[0].data()[0], 0.1);
        assert_eq!(dx[0].data()[2], 1.0);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut conv = Conv2d::zeros(1, 3, 3);
        for i in 0..3 {
            conv.weight[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_fn(4, 5, 3, |y, x, c| (y * 7 + x * 3 + c) as f64 * 0.37 - 2.0);
        assert_eq!(conv.forward_one(&x), x);
    }

    #[test]
    fn maxpool_picks_block_maxima() {
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let x = Tensor::from_vec(4, 4, 1, vals);
        let s = seq(vec![Layer::MaxPool]);
        let (y, caches) = s.forward(std::slice::from_ref(&x), Mode::Train).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let expected = (0..2)
                    .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| x.at(2 * oy + dy, 2 * ox + dx, 0))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y[0].at(oy, ox, 0), expected);
            }
        }
        let up = Tensor::from_vec(2, 2, 1, vec![1.0, -2.0, 0.5, 3.0]);
        let (dx, _) = s.backward(&caches, vec![up.clone()]).unwrap();
        let total: f64 = dx[0].data().iter().sum();
        assert_eq!(total, up.data().iter().sum::<f64>());
        assert_eq!(dx[0].data().iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let s = seq(vec![Layer::LeakyRelu, Layer::Conv(Conv2d::zeros(3, 4, 2))]);
        let err = s.forward_eval(&Tensor::zeros(4, 4, 3)).unwrap_err();
        match err {
            NnError::ShapeMismatch { layer, actual, .. } => {
                assert_eq!(layer, 1);
                assert_eq!(actual, Shape::new(4, 4, 3));
            }
            e => panic!("{e:?}"),
        }
        let pool = seq(vec![Layer::MaxPool]);
        assert!(pool.forward_eval(&Tensor::zeros(3, 4, 1)).is_err());
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0 - BN_EPS;
        bn.gamma[0] = 3.0;
        bn.beta[0] = 1.0;
        let s = seq(vec![Layer::BatchNorm(bn)]);
        let y = s
            .forward_eval(&Tensor::from_vec(1, 1, 1, vec![6.0]))
            .unwrap();
        assert!((y.data()[0] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_over_batch() {
        let s = seq(vec![Layer::BatchNorm(BatchNorm::new(2))]);
        let a = Tensor::from_fn(2, 2, 2, |y, x, c| (y * 2 + x) as f64 + 10.0 * c as f64);
        let b = Tensor::from_fn(3, 1, 2, |y, _, c| -(y as f64) * (c as f64 + 1.0));
        let (out, _) = s.forward(&[a, b], Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = out
                .iter()
                .flat_map(|t| t.data().chunks(2).map(move |p| p[ch]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
