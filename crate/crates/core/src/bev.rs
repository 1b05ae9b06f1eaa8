//! Bird's-eye-view rasterization of point clouds.
//!
//! Images are north-up: column `c` covers global pixel column `x0 + c` and
//! row `r` covers global pixel row `y1 - 1 - r`, so rows run from north to
//! south. Global pixel `(i, j)` is the square `[i, i+1) x [j, j+1)` scaled by
//! the meters-per-pixel of the grid.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::nn::Tensor;
use crate::worldgen::{PointCloud, Pose};

pub const CHANNELS: usize = 3;
/// Point count at which a cell saturates to 1.
pub const SATURATION: u32 = 16;
/// Lower edges of the height bins, relative to the sensor; the top bin is closed at `HEIGHT_MAX`.
pub const HEIGHT_BINS: [f64; 3] = [-3.0, -1.0, 1.0];
pub const HEIGHT_MAX: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub resolution_px: usize,
    pub half_range_m: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution_px: 416,
            half_range_m: 40.0,
        }
    }
}

impl GridSpec {
    pub fn new(resolution_px: usize, half_range_m: f64) -> Self {
        Self {
            resolution_px,
            half_range_m,
        }
    }

    pub fn meters_per_px(&self) -> f64 {
        2.0 * self.half_range_m / self.resolution_px as f64
    }

    /// Global pixel index containing the coordinate `m` (meters).
    pub fn pixel_of(&self, m: f64) -> i64 {
        (m * self.resolution_px as f64 / (2.0 * self.half_range_m)).floor() as i64
    }
}

/// Global pixel-unit rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelExtent {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelExtent {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        (self.x1 - self.x0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y1 - self.y0) as usize
    }

    pub fn union(&self, o: &PixelExtent) -> PixelExtent {
        PixelExtent::new(
            self.x0.min(o.x0),
            self.y0.min(o.y0),
            self.x1.max(o.x1),
            self.y1.max(o.y1),
        )
    }

    pub fn intersect(&self, o: &PixelExtent) -> Option<PixelExtent> {
        let e = PixelExtent::new(
            self.x0.max(o.x0),
            self.y0.max(o.y0),
            self.x1.min(o.x1),
            self.y1.min(o.y1),
        );
        (e.x0 < e.x1 && e.y0 < e.y1).then_some(e)
    }

    /// Array position `(row, col)` of global pixel `(gx, gy)`, if inside.
    pub fn cell_of(&self, gx: i64, gy: i64) -> Option<(usize, usize)> {
        if gx < self.x0 || gx >= self.x1 || gy < self.y0 || gy >= self.y1 {
            return None;
        }
        Some(((self.y1 - 1 - gy) as usize, (gx - self.x0) as usize))
    }

    /// Rectangle in meters, as `(xmin, ymin, xmax, ymax)`.
    pub fn to_meters(&self, mpp: f64) -> (f64, f64, f64, f64) {
        (
            self.x0 as f64 * mpp,
            self.y0 as f64 * mpp,
            self.x1 as f64 * mpp,
            self.y1 as f64 * mpp,
        )
    }
}

/// The grid an observer at `pose` renders, snapped to the global lattice.
pub fn global_extent(pose: &Pose, spec: &GridSpec) -> PixelExtent {
    let r = spec.resolution_px as i64;
    let x0 = spec.pixel_of(pose.x) - r / 2;
    let y0 = spec.pixel_of(pose.y) - r / 2;
    PixelExtent::new(x0, y0, x0 + r, y0 + r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevImage {
    pub data: Tensor,
    pub extent: PixelExtent,
}

impl BevImage {
    pub fn zeros(extent: PixelExtent) -> Self {
        Self {
            data: Tensor::zeros(extent.height(), extent.width(), CHANNELS),
            extent,
        }
    }
}

/// Height bin of a sensor-relative `z`, if any.
pub fn height_bin(z: f64) -> Option<usize> {
    if !(HEIGHT_BINS[0]..=HEIGHT_MAX).contains(&z) {
        return None;
    }
    Some(
        HEIGHT_BINS
            .iter()
            .rposition(|&lo| z >= lo)
            .expect("z is above the first edge"),
    )
}

/// Renders one cloud observed from `pose`.
pub fn project_bev(cloud: &PointCloud, pose: &Pose, spec: &GridSpec) -> BevImage {
    project_merged(&[(cloud, *pose)], pose, spec)
}

/// Renders several clouds, each with the pose used to place it, into the
/// grid of `ego`. Point counts add across clouds before saturation; heights
/// are shifted into the ego sensor's frame through the poses' altitudes.
pub fn project_merged(clouds: &[(&PointCloud, Pose)], ego: &Pose, spec: &GridSpec) -> BevImage {
    let extent = global_extent(ego, spec);
    let mut counts = vec![0u32; extent.width() * extent.height() * CHANNELS];
    for (cloud, pose) in clouds {
        let dz = pose.altitude - ego.altitude;
        for p in &cloud.points {
            let Some(ch) = height_bin(p[2] as f64 + dz) else {
                continue;
            };
            let g = pose.local_to_global(Vec2::new(p[0] as f64, p[1] as f64));
            let Some((r, c)) = extent.cell_of(spec.pixel_of(g.x), spec.pixel_of(g.y)) else {
                continue;
            };
            counts[(r * extent.width() + c) * CHANNELS + ch] += 1;
        }
    }
    let data = counts
        .iter()
        .map(|&n| n.min(SATURATION) as f64 / SATURATION as f64)
        .collect();
    BevImage {
        data: Tensor::from_vec(extent.height(), extent.width(), CHANNELS, data),
        extent,
    }
}

/// Binary PGM of one channel, `round(255 * value)` per cell.
pub fn to_pgm(img: &BevImage, channel: usize) -> Vec<u8> {
    let (h, w) = (img.data.h(), img.data.w());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            out.push(
                (255.0 * img.data.at(r, c, channel))
                    .round()
                    .clamp(0.0, 255.0) as u8,
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(points: Vec<[f32; 3]>) -> PointCloud {
        PointCloud {
            points,
            origin_pose: Pose::default(),
        }
    }

    #[test]
    fn empty_cloud_gives_zero_image() {
        let img = project_bev(&cloud(vec![]), &Pose::default(), &GridSpec::default());
        assert_eq!(img.data.shape(), crate::nn::Shape::new(416, 416, 3));
        assert!(img.data.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_point_lands_in_column_260() {
        let spec = GridSpec::default();
        let img = project_bev(&cloud(vec![[10.0, 0.0, 0.0]]), &Pose::default(), &spec);
        let nz: Vec<(usize, usize, usize)> = (0..416)
            .flat_map(|r| (0..416).flat_map(move |c| (0..3).map(move |ch| (r, c, ch))))
            .filter(|&(r, c, ch)| img.data.at(r, c, ch) != 0.0)
            .collect();
        // 50 m from the western edge at 416/80 px per meter; y = 0 sits in the row just above center
        assert_eq!(nz, vec![(207, 260, 1)]);
        assert_eq!(img.data.at(207, 260, 1), 1.0 / 16.0);
    }

    #[test]
    fn heading_rotates_into_north_up() {
        let spec = GridSpec::default();
        let pose = Pose {
            heading: FRAC_PI_2,
            ..Pose::default()
        };
        let img = project_bev(&cloud(vec![[10.0, 0.0, 0.0]]), &pose, &spec);
        // forward is north: global (0, 10) -> column 208, row 208 - 1 - 52
        assert_eq!(img.data.at(155, 208, 1), 1.0 / 16.0);
        assert_eq!(img.data.data().iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn extent_examples() {
        let spec = GridSpec::default();
        assert_eq!(
            global_extent(&Pose::default(), &spec),
            PixelExtent::new(-208, -208, 208, 208)
        );
        assert_eq!(
            global_extent(
                &Pose {
                    x: 1.0,
                    ..Pose::default()
                },
                &spec
            )
            .x0,
            -203
        );
        let a = global_extent(&Pose::default(), &spec);
        let b = global_extent(
            &Pose {
                x: 80.0,
                ..Pose::default()
            },
            &spec,
        );
        assert_eq!(a.x1, b.x0);
        assert!(a.intersect(&b).is_none());
    }

    #[test]
    fn height_bins_partition() {
        assert_eq!(height_bin(-3.0), Some(0));
        assert_eq!(height_bin(-1.0), Some(1));
        assert_eq!(height_bin(0.999), Some(1));
        assert_eq!(height_bin(1.0), Some(2));
        assert_eq!(height_bin(3.0), Some(2));
        assert_eq!(height_bin(3.0001), None);
        assert_eq!(height_bin(-3.0001), None);
    }

    #[test]
    fn saturates_at_sixteen() {
        let spec = GridSpec::new(16, 4.0);
        let img = project_bev(&cloud(vec![[0.1, 0.1, 0.0]; 40]), &Pose::default(), &spec);
        assert_eq!(img.data.data().iter().cloned().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn pgm_header_and_size() {
        let spec = GridSpec::new(8, 2.0);
        let img = project_bev(&cloud(vec![[0.1, 0.1, 0.0]; 16]), &Pose::default(), &spec);
        let pgm = to_pgm(&img, 1);
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), 11 + 64);
        assert!(pgm.contains(&255));
    }
}
