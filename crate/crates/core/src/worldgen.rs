//! Synthetic urban scenes, LIDAR ray casting and GPS noise.

use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{boxes_overlap, wrap_angle, OrientedBox, Vec2};
use crate::rng::{self, Rng};

pub const VEHICLE_SIZE: (f64, f64) = (4.5, 2.0);
pub const VEHICLE_HEIGHT: f64 = 1.6;
pub const PEDESTRIAN_SIZE: (f64, f64) = (0.6, 0.6);
pub const PEDESTRIAN_HEIGHT: f64 = 1.8;

const PLACEMENT_RETRIES: usize = 1000;
const ACTOR_CLEARANCE: f64 = 0.3;
const OCCLUDER_CLEARANCE: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("could not place actor {index} without overlap after {retries} attempts")]
    PlacementFailed { index: usize, retries: usize },
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 2] = [ObjectClass::Vehicle, ObjectClass::Pedestrian];

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vehicle" => Some(ObjectClass::Vehicle),
            "pedestrian" => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ObjectClass::Vehicle => 0,
            ObjectClass::Pedestrian => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ObjectClass::Vehicle),
            1 => Some(ObjectClass::Pedestrian),
            _ => None,
        }
    }
}

/// Global position and heading of a sensor-carrying observer.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in `[-pi, pi)`, counter-clockwise from east.
    pub heading: f64,
    /// Height of the LIDAR above the ground plane.
    pub altitude: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Rounds every field to 32-bit precision, the resolution poses have on the wire.
    pub fn to_wire_precision(&self) -> Pose {
        Pose {
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            heading: self.heading as f32 as f64,
            altitude: self.altitude as f32 as f64,
        }
    }

    /// Maps a point from this pose's sensor frame to global coordinates.
    pub fn local_to_global(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading).add(self.position())
    }

    pub fn global_to_local(&self, p: Vec2) -> Vec2 {
        p.sub(self.position()).rotate(-self.heading)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub id: u32,
    pub class: ObjectClass,
    pub bbox: OrientedBox,
    pub height: f64,
    pub has_lidar: bool,
    pub pose: Pose,
}

impl Actor {
    pub fn center(&self) -> Vec2 {
        self.bbox.center()
    }
}

/// Axis-aligned building footprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluder {
    pub bbox: OrientedBox,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Bounds {
    pub fn contains_box(&self, b: &OrientedBox) -> bool {
        b.corners()
            .iter()
            .all(|c| c.x >= self.x0 && c.x <= self.x1 && c.y >= self.y0 && c.y <= self.y1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub bounds: Bounds,
    pub actors: Vec<Actor>,
    pub occluders: Vec<Occluder>,
    pub seed: u64,
}

impl Scene {
    pub fn actor(&self, id: u32) -> Option<&Actor> {
        self.actors.iter().find(|a| a.id == id)
    }

    pub fn lidar_vehicles(&self) -> impl Iterator<Item = &Actor> {
        self.actors.iter().filter(|a| a.has_lidar)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Street grid with building blocks; vehicles follow the streets.
    Urban,
    /// Random buildings, uniformly placed actors with random headings.
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    pub azimuth_step_deg: f64,
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub range_m: f64,
    pub mount_height_m: f64,
    pub ground: bool,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            azimuth_step_deg: 0.4,
            beams: 16,
            elevation_min_deg: -15.0,
            elevation_max_deg: 5.0,
            range_m: 40.0,
            mount_height_m: 1.9,
            ground: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub layout: Layout,
    /// The scene covers `[-half_extent_m, half_extent_m]` on both axes.
    pub half_extent_m: f64,
    pub vehicles: usize,
    /// The first `lidar_vehicles` vehicles carry a LIDAR.
    pub lidar_vehicles: usize,
    pub pedestrians: usize,
    /// Random buildings in the open layout.
    pub occluders: usize,
    pub block_pitch_m: f64,
    pub street_width_m: f64,
    pub sidewalk_m: f64,
    /// Probability that an urban block is left without buildings.
    pub empty_block_prob: f64,
    pub building_height_m: (f64, f64),
    /// Uniform heading jitter (radians) around the street direction.
    pub yaw_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            layout: Layout::Urban,
            half_extent_m: 80.0,
            vehicles: 60,
            lidar_vehicles: 54,
            pedestrians: 30,
            occluders: 12,
            block_pitch_m: 30.0,
            street_width_m: 12.0,
            sidewalk_m: 2.0,
            empty_block_prob: 0.15,
            building_height_m: (5.0, 15.0),
            yaw_jitter: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if !(self.half_extent_m > 0.0) {
            return bad("half_extent_m must be positive");
        }
        if self.lidar_vehicles > self.vehicles {
            return bad("lidar_vehicles exceeds vehicles");
        }
        if self.layout == Layout::Urban && !(self.block_pitch_m > self.street_width_m) {
            return bad("block_pitch_m must exceed street_width_m");
        }
        if self.building_height_m.0 > self.building_height_m.1 {
            return bad("building_height_m range is inverted");
        }
        Ok(())
    }

    fn street_centers(&self) -> Vec<f64> {
        let n = (self.half_extent_m / self.block_pitch_m).floor() as i64;
        (-n..=n).map(|k| k as f64 * self.block_pitch_m).collect()
    }
}

fn buildings_urban(cfg: &WorldConfig, rng: &mut Rng) -> Vec<Occluder> {
    let h = cfg.half_extent_m;
    let centers = cfg.street_centers();
    let half_street = cfg.street_width_m / 2.0;
    // block spans along one axis, including the partial blocks at the border
    let mut spans = Vec::new();
    let mut lo = -h;
    for &c in &centers {
        if c - half_street > lo {
            spans.push((lo, c - half_street));
        }
        lo = c + half_street;
    }
    if h > lo {
        spans.push((lo, h));
    }
    let mut out = Vec::new();
    for &(bx0, bx1) in &spans {
        for &(by0, by1) in &spans {
            if rng.random::<f64>() < cfg.empty_block_prob {
                continue;
            }
            let (ix0, ix1) = (bx0 + cfg.sidewalk_m, bx1 - cfg.sidewalk_m);
            let (iy0, iy1) = (by0 + cfg.sidewalk_m, by1 - cfg.sidewalk_m);
            if ix1 - ix0 < 2.0 || iy1 - iy0 < 2.0 {
                continue;
            }
            let nx = rng.random_range(1..=2usize);
            let ny = rng.random_range(1..=2usize);
            let gap = 3.0;
            let cw = (ix1 - ix0 - gap * (nx as f64 - 1.0)) / nx as f64;
            let ch = (iy1 - iy0 - gap * (ny as f64 - 1.0)) / ny as f64;
            if cw < 1.0 || ch < 1.0 {
                continue;
            }
            for i in 0..nx {
                for j in 0..ny {
                    let x0 = ix0 + i as f64 * (cw + gap);
                    let y0 = iy0 + j as f64 * (ch + gap);
                    let (hmin, hmax) = cfg.building_height_m;
                    out.push(Occluder {
                        bbox: OrientedBox::new(x0 + cw / 2.0, y0 + ch / 2.0, cw, ch, 0.0),
                        height: hmin + (hmax - hmin) * rng.random::<f64>(),
                    });
                }
            }
        }
    }
    out
}

fn buildings_open(cfg: &WorldConfig, rng: &mut Rng) -> Vec<Occluder> {
    let h = cfg.half_extent_m;
    (0..cfg.occluders)
        .map(|_| {
            let w = rng.random_range(4.0..14.0);
            let l = rng.random_range(4.0..14.0);
            let cx = rng.random_range(-h + w / 2.0..=h - w / 2.0);
            let cy = rng.random_range(-h + l / 2.0..=h - l / 2.0);
            let (hmin, hmax) = cfg.building_height_m;
            Occluder {
                bbox: OrientedBox::new(cx, cy, w, l, 0.0),
                height: hmin + (hmax - hmin) * rng.random::<f64>(),
            }
        })
        .collect()
}

fn propose_vehicle(cfg: &WorldConfig, rng: &mut Rng) -> OrientedBox {
    let h = cfg.half_extent_m;
    let (w, l) = VEHICLE_SIZE;
    let jitter = if cfg.yaw_jitter > 0.0 {
        rng.random_range(-cfg.yaw_jitter..cfg.yaw_jitter)
    } else {
        0.0
    };
    match cfg.layout {
        Layout::Open => {
            let cx = rng.random_range(-h..h);
            let cy = rng.random_range(-h..h);
            let yaw = rng.random_range(-PI..PI);
            OrientedBox::new(cx, cy, w, l, yaw)
        }
        Layout::Urban => {
            let centers = cfg.street_centers();
            let street = centers[rng.random_range(0..centers.len())];
            let half_road = cfg.street_width_m / 2.0;
            // two travel lanes and two parking lanes
            let lanes = [
                -0.7 * half_road,
                -0.25 * half_road,
                0.25 * half_road,
                0.7 * half_road,
            ];
            let offset = lanes[rng.random_range(0..lanes.len())];
            let along = rng.random_range(-h + w..h - w);
            let reverse = if offset < 0.0 { PI } else { 0.0 };
            if rng.random::<bool>() {
                // street runs east-west
                OrientedBox::new(along, street + offset, w, l, wrap_angle(reverse + jitter))
            } else {
                OrientedBox::new(
                    street + offset,
                    along,
                    w,
                    l,
                    wrap_angle(PI / 2.0 + reverse + jitter),
                )
            }
        }
    }
}

fn propose_pedestrian(cfg: &WorldConfig, rng: &mut Rng) -> OrientedBox {
    let h = cfg.half_extent_m;
    let (w, l) = PEDESTRIAN_SIZE;
    let cx = rng.random_range(-h + 1.0..h - 1.0);
    let cy = rng.random_range(-h + 1.0..h - 1.0);
    OrientedBox::new(cx, cy, w, l, rng.random_range(-PI..PI))
}

/// Generates a reproducible scene.
///
/// Buildings come first from their own stream; actor `i` draws from stream
/// `i`, so inserting pedestrians never moves the vehicles.
pub fn gen_scene(cfg: &WorldConfig, seed: u64) -> Result<Scene, WorldError> {
    cfg.validate()?;
    let h = cfg.half_extent_m;
    let bounds = Bounds {
        x0: -h,
        y0: -h,
        x1: h,
        y1: h,
    };
    let mut occ_rng = rng::stream(seed, "worldgen-occluders", 0);
    let occluders = match cfg.layout {
        Layout::Urban => buildings_urban(cfg, &mut occ_rng),
        Layout::Open => buildings_open(cfg, &mut occ_rng),
    };

    let total = cfg.vehicles + cfg.pedestrians;
    let mut actors: Vec<Actor> = Vec::with_capacity(total);
    for index in 0..total {
        let mut rng = rng::stream(seed, rng::WORLDGEN, index as u64);
        let class = if index < cfg.vehicles {
            ObjectClass::Vehicle
        } else {
            ObjectClass::Pedestrian
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cand = match class {
                ObjectClass::Vehicle => propose_vehicle(cfg, &mut rng),
                ObjectClass::Pedestrian => propose_pedestrian(cfg, &mut rng),
            };
            if !bounds.contains_box(&cand) {
                continue;
            }
            if occluders
                .iter()
                .any(|o| boxes_overlap(&o.bbox, &cand, OCCLUDER_CLEARANCE))
            {
                continue;
            }
            if actors
                .iter()
                .any(|a| boxes_overlap(&a.bbox, &cand, ACTOR_CLEARANCE))
            {
                continue;
            }
            placed = Some(cand);
            break;
        }
        let bbox = placed.ok_or(WorldError::PlacementFailed {
            index,
            retries: PLACEMENT_RETRIES,
        })?;
        let height = match class {
            ObjectClass::Vehicle => VEHICLE_HEIGHT,
            ObjectClass::Pedestrian => PEDESTRIAN_HEIGHT,
        };
        actors.push(Actor {
            id: index as u32,
            class,
            bbox,
            height,
            has_lidar: class == ObjectClass::Vehicle && index < cfg.lidar_vehicles,
            pose: Pose {
                x: bbox.cx,
                y: bbox.cy,
                heading: bbox.yaw,
                altitude: 0.0,
            },
        });
    }
    Ok(Scene {
        bounds,
        actors,
        occluders,
        seed,
    })
}

/// Observer-relative LIDAR returns.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `(x forward, y left, z up)` meters relative to the sensor.
    pub points: Vec<[f32; 3]>,
    pub origin_pose: Pose,
}

impl PointCloud {
    pub fn empty(origin_pose: Pose) -> Self {
        Self {
            points: Vec::new(),
            origin_pose,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An extruded footprint, the only kind of solid in the world.
#[derive(Clone, Copy, Debug)]
pub struct Solid {
    pub bbox: OrientedBox,
    pub height: f64,
}

impl Solid {
    /// Entry distance of the ray `origin + t * dir` (dir unit length), if any.
    pub fn ray_entry(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let rel = Vec2::new(origin[0], origin[1])
            .sub(self.bbox.center())
            .rotate(-self.bbox.yaw);
        let d = Vec2::new(dir[0], dir[1]).rotate(-self.bbox.yaw);
        let lo = [-self.bbox.w / 2.0, -self.bbox.l / 2.0, 0.0];
        let hi = [self.bbox.w / 2.0, self.bbox.l / 2.0, self.height];
        let o = [rel.x, rel.y, origin[2]];
        let dv = [d.x, d.y, dir[2]];
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            if dv[axis].abs() < 1e-15 {
                if o[axis] < lo[axis] || o[axis] > hi[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dv[axis];
            let (mut a, mut b) = ((lo[axis] - o[axis]) * inv, (hi[axis] - o[axis]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 0.0).then_some(t0)
    }

    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        p[2] >= -tol && p[2] <= self.height + tol && self.bbox.contains(Vec2::new(p[0], p[1]), tol)
    }
}

/// Every solid that can reflect a ray cast by `observer`.
pub fn solids_seen_by(scene: &Scene, observer_id: u32) -> Vec<Solid> {
    scene
        .occluders
        .iter()
        .map(|o| Solid {
            bbox: o.bbox,
            height: o.height,
        })
        .chain(
            scene
                .actors
                .iter()
                .filter(|a| a.id != observer_id)
                .map(|a| Solid {
                    bbox: a.bbox,
                    height: a.height,
                }),
        )
        .collect()
}

/// The pose a LIDAR-equipped actor reports for its sensor.
pub fn sensor_pose(actor: &Actor, lidar: &LidarConfig) -> Pose {
    Pose {
        altitude: lidar.mount_height_m,
        ..actor.pose
    }
}

/// First-hit ray casting over the horizontal and vertical fans.
pub fn raycast_lidar(scene: &Scene, observer: &Actor, lidar: &LidarConfig) -> PointCloud {
    let pose = sensor_pose(observer, lidar);
    let solids = solids_seen_by(scene, observer.id);
    let origin = [pose.x, pose.y, pose.altitude];
    let range = lidar.range_m;

    // angular window of each solid as seen from the sensor
    struct Candidate {
        solid: Solid,
        bearing: f64,
        half_width: f64,
    }
    let candidates: Vec<Candidate> = solids
        .into_iter()
        .filter_map(|solid| {
            let rel = solid.bbox.center().sub(pose.position());
            let d = rel.norm();
            let r = solid.bbox.radius();
            if d - r > range {
                return None;
            }
            let half_width = if d <= r { PI } else { (r / d).asin() + 1e-9 };
            Some(Candidate {
                solid,
                bearing: rel.y.atan2(rel.x),
                half_width,
            })
        })
        .collect();

    let n_az = (360.0 / lidar.azimuth_step_deg).round() as usize;
    let elevations: Vec<f64> = (0..lidar.beams)
        .map(|j| {
            if lidar.beams == 1 {
                lidar.elevation_min_deg.to_radians()
            } else {
                let f = j as f64 / (lidar.beams - 1) as f64;
                (lidar.elevation_min_deg + f * (lidar.elevation_max_deg - lidar.elevation_min_deg))
                    .to_radians()
            }
        })
        .collect();

    let mut points = Vec::new();
    let mut active: Vec<&Solid> = Vec::with_capacity(candidates.len());
    for i in 0..n_az {
        let az_local = (i as f64 * lidar.azimuth_step_deg).to_radians();
        let az = pose.heading + az_local;
        active.clear();
        active.extend(
            candidates
                .iter()
                .filter(|c| wrap_angle(az - c.bearing).abs() <= c.half_width)
                .map(|c| &c.solid),
        );
        if active.is_empty() && !lidar.ground {
            continue;
        }
        let (saz, caz) = az.sin_cos();
        let (sazl, cazl) = az_local.sin_cos();
        for &el in &elevations {
            let (sel, cel) = el.sin_cos();
            let dir = [cel * caz, cel * saz, sel];
            let mut best = range;
            let mut hit = false;
            for s in &active {
                if let Some(t) = s.ray_entry(origin, dir) {
                    if t <= best {
                        best = t;
                        hit = true;
                    }
                }
            }
            if lidar.ground && sel < 0.0 {
                let t = pose.altitude / -sel;
                if t <= best {
                    best = t;
                    hit = true;
                }
            }
            if hit {
                points.push([
                    (best * cel * cazl) as f32,
                    (best * cel * sazl) as f32,
                    (best * sel) as f32,
                ]);
            }
        }
    }
    PointCloud {
        points,
        origin_pose: pose,
    }
}

/// Adds a GPS error of fixed `magnitude` in a uniformly random direction.
pub fn perturb_pose(pose: &Pose, magnitude: f64, rng: &mut Rng) -> Pose {
    if magnitude == 0.0 {
        return *pose;
    }
    let theta = rng.random::<f64>() * TAU;
    Pose {
        x: pose.x + magnitude * theta.cos(),
        y: pose.y + magnitude * theta.sin(),
        ..*pose
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::intersection_area;

    fn bare_scene(actors: Vec<Actor>, occluders: Vec<Occluder>) -> Scene {
        Scene {
            bounds: Bounds {
                x0: -100.0,
                y0: -100.0,
                x1: 100.0,
                y1: 100.0,
            },
            actors,
            occluders,
            seed: 0,
        }
    }

    fn vehicle(id: u32, x: f64, y: f64, yaw: f64) -> Actor {
        let (w, l) = VEHICLE_SIZE;
        Actor {
            id,
            class: ObjectClass::Vehicle,
            bbox: OrientedBox::new(x, y, w, l, yaw),
            height: VEHICLE_HEIGHT,
            has_lidar: true,
            pose: Pose {
                x,
                y,
                heading: yaw,
                altitude: 0.0,
            },
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = gen_scene(&cfg, 1).unwrap();
        let b = gen_scene(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_scene(&cfg, 2).unwrap());
    }

    #[test]
    fn empty_request_gives_empty_scene() {
        let cfg = WorldConfig {
            vehicles: 0,
            lidar_vehicles: 0,
            pedestrians: 0,
            ..Default::default()
        };
        assert!(gen_scene(&cfg, 3).unwrap().actors.is_empty());
    }

    #[test]
    fn ten_vehicles_never_intersect() {
        for layout in [Layout::Urban, Layout::Open] {
            let cfg = WorldConfig {
                layout,
                vehicles: 10,
                lidar_vehicles: 10,
                pedestrians: 0,
                ..Default::default()
            };
            let s = gen_scene(&cfg, 7).unwrap();
            assert_eq!(s.lidar_vehicles().count(), 10);
            for (i, a) in s.actors.iter().enumerate() {
                assert!(s.bounds.contains_box(&a.bbox));
                for b in &s.actors[i + 1..] {
                    assert_eq!(intersection_area(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn infeasible_config_names_the_actor() {
        let cfg = WorldConfig {
            layout: Layout::Open,
            half_extent_m: 5.0,
            occluders: 0,
            vehicles: 40,
            lidar_vehicles: 0,
            pedestrians: 0,
            ..Default::default()
        };
        match gen_scene(&cfg, 1) {
            Err(WorldError::PlacementFailed { index, .. }) => assert!(index > 0 && index < 40),
            other => panic!("expected placement failure, got {other:?}"),
        }
    }

    #[test]
    fn nothing_to_hit_gives_empty_cloud() {
        let ego = vehicle(0, 0.0, 0.0, 0.3);
        let scene = bare_scene(vec![ego.clone()], vec![]);
        let cloud = raycast_lidar(&scene, &ego, &LidarConfig::default());
        assert!(cloud.is_empty());
    }

    #[test]
    fn vehicle_due_east_bounds() {
        let ego = vehicle(0, 0.0, 0.0, 0.0);
        let target = vehicle(1, 10.0, 0.0, 0.4);
        let scene = bare_scene(vec![ego.clone(), target], vec![]);
        let cloud = raycast_lidar(&scene, &ego, &LidarConfig::default());
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            assert!(p[0] >= 10.0 - 4.5 && p[0] <= 10.0 + 4.5, "{p:?}");
            let r = (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64);
            assert!(r <= 40.0 + 1e-4);
        }
    }

    #[test]
    fn points_lie_on_hit_surfaces() {
        let cfg = WorldConfig::default();
        let scene = gen_scene(&cfg, 11).unwrap();
        let lidar = LidarConfig::default();
        let ego = scene.lidar_vehicles().next().unwrap();
        let cloud = raycast_lidar(&scene, ego, &lidar);
        let solids = solids_seen_by(&scene, ego.id);
        for p in &cloud.points {
            let g = cloud
                .origin_pose
                .local_to_global(Vec2::new(p[0] as f64, p[1] as f64));
            let z = p[2] as f64 + cloud.origin_pose.altitude;
            assert!(solids.iter().any(|s| s.contains([g.x, g.y, z], 1e-3)));
        }
    }

    #[test]
    fn perturbation_has_exact_magnitude() {
        let pose = Pose {
            x: 3.0,
            y: -2.0,
            heading: 1.0,
            altitude: 1.9,
        };
        let mut rng = rng::stream(5, rng::NOISE, 0);
        assert_eq!(perturb_pose(&pose, 0.0, &mut rng), pose);
        for _ in 0..100 {
            let p = perturb_pose(&pose, 2.4, &mut rng);
            assert!((p.position().sub(pose.position()).norm() - 2.4).abs() < 1e-9);
            assert_eq!(p.heading, pose.heading);
        }
    }

    #[test]
    fn perturbation_direction_is_uniform() {
        let pose = Pose::default();
        let mut rng = rng::stream(9, rng::NOISE, 1);
        let n = 10_000;
        let mut sum = Vec2::default();
        for _ in 0..n {
            sum = sum.add(perturb_pose(&pose, 1.0, &mut rng).position());
        }
        assert!(sum.scale(1.0 / n as f64).norm() < 0.05);
    }
}
