//! Lattice alignment of inputs and feature grids.
//!
//! Padding an input so that its global pixel extent starts and ends on
//! multiples of the downsampling rate `K` makes every fixel of the resulting
//! feature map cover a block `[aK, (a+1)K) x [bK, (b+1)K)` of global pixels,
//! whoever rendered it.

use thiserror::Error;

use crate::bev::{BevImage, PixelExtent};
use crate::nn::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("no feature grids to place")]
    Empty,
    #[error(
        "grid from vehicle {source_id} has K={k}, C={c}; expected K={expected_k}, C={expected_c}"
    )]
    Incompatible {
        source_id: u32,
        k: usize,
        c: usize,
        expected_k: usize,
        expected_c: usize,
    },
    #[error("pixel extent {extent:?} is not divisible by K={k}")]
    Unaligned { extent: PixelExtent, k: usize },
}

/// Border widths in pixels. `p_t` pads the `y0` edge and `p_b` the `y1`
/// edge; with north-up images `y1` is the first row, so `p_b` rows are
/// inserted above the image and `p_t` rows below it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub p_l: usize,
    pub p_r: usize,
    pub p_t: usize,
    pub p_b: usize,
}

impl Padding {
    pub fn apply(&self, e: &PixelExtent) -> PixelExtent {
        PixelExtent::new(
            e.x0 - self.p_l as i64,
            e.y0 - self.p_t as i64,
            e.x1 + self.p_r as i64,
            e.y1 + self.p_b as i64,
        )
    }

    pub fn is_zero(&self) -> bool {
        *self == Padding::default()
    }
}

/// Smallest non-negative padding that puts all four edges on the `k` lattice.
pub fn tma_padding(extent: &PixelExtent, k: usize) -> Padding {
    let k = k.max(1) as i64;
    Padding {
        p_l: extent.x0.rem_euclid(k) as usize,
        p_t: extent.y0.rem_euclid(k) as usize,
        p_r: (-extent.x1).rem_euclid(k) as usize,
        p_b: (-extent.y1).rem_euclid(k) as usize,
    }
}

/// Zero-fills `padding` around `t` (north-up layout).
pub fn pad_tensor(t: &Tensor, padding: &Padding) -> Tensor {
    if padding.is_zero() {
        return t.clone();
    }
    t.window(
        -(padding.p_b as i64),
        -(padding.p_l as i64),
        t.h() + padding.p_t + padding.p_b,
        t.w() + padding.p_l + padding.p_r,
    )
}

pub fn pad_bev(img: &BevImage, padding: &Padding) -> BevImage {
    BevImage {
        data: pad_tensor(&img.data, padding),
        extent: padding.apply(&img.extent),
    }
}

/// A feature map together with the global fixel rectangle it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub tensor: Tensor,
    /// Global fixel-unit extent (pixel extent divided by `k`).
    pub extent: PixelExtent,
    pub k: usize,
    pub source: u32,
}

impl FeatureGrid {
    /// Grid of a lattice-aligned input; fails if the extent is off the lattice.
    pub fn from_aligned(
        tensor: Tensor,
        pixel_extent: &PixelExtent,
        k: usize,
        source: u32,
    ) -> Result<Self, AlignError> {
        Ok(Self {
            tensor,
            extent: fixel_extent(pixel_extent, k)?,
            k,
            source,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.c()
    }

    /// The part of the grid inside `extent` (fixel units); cells outside the
    /// grid read as zero.
    pub fn crop(&self, extent: &PixelExtent) -> FeatureGrid {
        let t = self.tensor.window(
            self.extent.y1 - extent.y1,
            extent.x0 - self.extent.x0,
            extent.height(),
            extent.width(),
        );
        FeatureGrid {
            tensor: t,
            extent: *extent,
            k: self.k,
            source: self.source,
        }
    }
}

/// Fixel extent of a lattice-aligned pixel extent.
pub fn fixel_extent(pixel_extent: &PixelExtent, k: usize) -> Result<PixelExtent, AlignError> {
    let ki = k as i64;
    let e = pixel_extent;
    if [e.x0, e.y0, e.x1, e.y1]
        .iter()
        .any(|v| v.rem_euclid(ki) != 0)
    {
        return Err(AlignError::Unaligned { extent: *e, k });
    }
    Ok(PixelExtent::new(e.x0 / ki, e.y0 / ki, e.x1 / ki, e.y1 / ki))
}

/// Fixel extent for an unpadded `rows x cols` grid rendered over
/// `pixel_extent`, snapped to the nearest whole-fixel offset from
/// `reference` (a fixel extent on the lattice). Without padding the fixels of
/// such a grid straddle lattice blocks; this is the misalignment that
/// padding removes.
pub fn nearest_fixel_extent(
    pixel_extent: &PixelExtent,
    rows: usize,
    cols: usize,
    k: usize,
    reference: &PixelExtent,
) -> PixelExtent {
    let kf = k as f64;
    let dx = ((pixel_extent.x0 - reference.x0 * k as i64) as f64 / kf).round() as i64;
    let dy = ((pixel_extent.y1 - reference.y1 * k as i64) as f64 / kf).round() as i64;
    let x0 = reference.x0 + dx;
    let y1 = reference.y1 + dy;
    PixelExtent::new(x0, y1 - rows as i64, x0 + cols as i64, y1)
}

/// Where one grid sits on the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    /// Offset of the grid's low corner from the canvas low corner, fixels.
    pub dx: usize,
    pub dy: usize,
    /// Array offset of the grid's first row and column inside the canvas.
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub extent: PixelExtent,
    pub placements: Vec<Placement>,
    pub k: usize,
    pub channels: usize,
}

/// Bounding canvas of all grids and each grid's offset on it.
pub fn place_on_canvas(grids: &[FeatureGrid]) -> Result<Canvas, AlignError> {
    let first = grids.first().ok_or(AlignError::Empty)?;
    let (k, c) = (first.k, first.channels());
    let mut extent = first.extent;
    for g in grids {
        if g.k != k || g.channels() != c {
            return Err(AlignError::Incompatible {
                source_id: g.source,
                k: g.k,
                c: g.channels(),
                expected_k: k,
                expected_c: c,
            });
        }
        extent = extent.union(&g.extent);
    }
    let placements = grids
        .iter()
        .map(|g| Placement {
            dx: (g.extent.x0 - extent.x0) as usize,
            dy: (g.extent.y0 - extent.y0) as usize,
            row: (extent.y1 - g.extent.y1) as usize,
            col: (g.extent.x0 - extent.x0) as usize,
        })
        .collect();
    Ok(Canvas {
        extent,
        placements,
        k,
        channels: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(x0: i64, y0: i64, size: i64, source: u32) -> FeatureGrid {
        FeatureGrid {
            tensor: Tensor::zeros(size as usize, size as usize, 2),
            extent: PixelExtent::new(x0, y0, x0 + size, y0 + size),
            k: 8,
            source,
        }
    }

    #[test]
    fn padding_examples() {
        assert_eq!(
            tma_padding(&PixelExtent::new(0, 0, 416, 416), 8),
            Padding::default()
        );
        let p = tma_padding(&PixelExtent::new(3, 5, 419, 421), 8);
        assert_eq!(
            p,
            Padding {
                p_l: 3,
                p_t: 5,
                p_r: 5,
                p_b: 3
            }
        );
        let padded = p.apply(&PixelExtent::new(3, 5, 419, 421));
        assert_eq!(padded.width(), 424);
        assert_eq!(padded.width() % 8, 0);
        assert_eq!(
            tma_padding(&PixelExtent::new(-7, 13, 409, 429), 1),
            Padding::default()
        );
    }

    #[test]
    fn pad_keeps_interior() {
        let e = PixelExtent::new(3, 5, 19, 21);
        let img = BevImage {
            data: Tensor::from_fn(16, 16, 3, |r, c, ch| (r * 100 + c * 3 + ch) as f64),
            extent: e,
        };
        let p = tma_padding(&e, 8);
        let padded = pad_bev(&img, &p);
        assert_eq!((padded.data.h(), padded.data.w()), (24, 24));
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(
                    padded.data.pixel(r + p.p_b, c + p.p_l),
                    img.data.pixel(r, c)
                );
            }
        }
        assert_eq!(pad_bev(&img, &Padding::default()), img);
    }

    #[test]
    fn canvas_examples() {
        let c = place_on_canvas(&[grid(0, 0, 52, 0)]).unwrap();
        assert_eq!(c.extent, PixelExtent::new(0, 0, 52, 52));
        assert_eq!((c.placements[0].dx, c.placements[0].dy), (0, 0));
        let c = place_on_canvas(&[grid(0, 0, 52, 0), grid(0, 0, 52, 1)]).unwrap();
        assert!(c.placements.iter().all(|p| (p.dx, p.dy) == (0, 0)));
        let c = place_on_canvas(&[grid(0, 0, 52, 0), grid(26, 26, 52, 1)]).unwrap();
        assert_eq!(c.extent, PixelExtent::new(0, 0, 78, 78));
        assert_eq!((c.placements[1].dx, c.placements[1].dy), (26, 26));
        // the second grid is north-east, so it starts in the first row
        assert_eq!((c.placements[1].row, c.placements[1].col), (0, 26));
        assert_eq!((c.placements[0].row, c.placements[0].col), (26, 0));
    }

    #[test]
    fn mixed_grids_are_rejected() {
        let mut g = grid(0, 0, 4, 1);
        g.k = 4;
        assert!(matches!(
            place_on_canvas(&[grid(0, 0, 4, 0), g]),
            Err(AlignError::Incompatible { source_id: 1, .. })
        ));
        assert_eq!(place_on_canvas(&[]), Err(AlignError::Empty));
    }

    #[test]
    fn crop_reads_zero_outside() {
        let mut g = grid(0, 0, 2, 0);
        g.tensor = Tensor::filled(2, 2, 2, 1.0);
        let c = g.crop(&PixelExtent::new(1, 1, 3, 3));
        // north-west cell of the crop overlaps the grid's north-east cell
        assert_eq!(c.tensor.at(1, 0, 0), 1.0);
        assert_eq!(c.tensor.at(0, 0, 0), 0.0);
        assert_eq!(c.tensor.at(1, 1, 0), 0.0);
    }
}
