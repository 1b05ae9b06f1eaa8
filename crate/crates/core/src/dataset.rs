//! Frames of LIDAR observations with ground truth, in memory and on disk.
//!
//! On disk a dataset is one directory per frame holding `truth.txt`,
//! `poses.txt`, and one `PCL1` point-cloud file per observing vehicle.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{OrientedBox, Vec2};
use crate::rng;
use crate::worldgen::{
    gen_scene, raycast_lidar, sensor_pose, LidarConfig, ObjectClass, PointCloud, Pose, WorldConfig,
    WorldError,
};

pub const CLOUD_MAGIC: &[u8; 4] = b"PCL1";
pub const TRUTH_FILE: &str = "truth.txt";
pub const POSES_FILE: &str = "poses.txt";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: not a PCL1 point cloud ({msg})")]
    Cloud { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub lidar: LidarConfig,
    /// LIDAR vehicles recorded per frame: the one nearest the scene center
    /// (the ego) and its nearest neighbours.
    pub observers: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            lidar: LidarConfig::default(),
            observers: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthObject {
    /// Actor id; on disk, the line index in `truth.txt`.
    pub id: u32,
    pub class: ObjectClass,
    pub bbox: OrientedBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub vehicle_id: u32,
    /// True sensor pose.
    pub pose: Pose,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: u32,
    pub truths: Vec<TruthObject>,
    /// Ego first, then by increasing distance from the ego.
    pub observations: Vec<Observation>,
}

impl Frame {
    pub fn ego(&self) -> Option<&Observation> {
        self.observations.first()
    }

    pub fn observation(&self, vehicle_id: u32) -> Option<&Observation> {
        self.observations
            .iter()
            .find(|o| o.vehicle_id == vehicle_id)
    }

    /// Observers other than `vehicle_id` within `radius_m` of it, nearest first.
    pub fn neighbours(&self, vehicle_id: u32, radius_m: f64) -> Vec<&Observation> {
        let Some(me) = self.observation(vehicle_id) else {
            return Vec::new();
        };
        let mut out: Vec<(f64, &Observation)> = self
            .observations
            .iter()
            .filter(|o| o.vehicle_id != vehicle_id)
            .map(|o| (o.pose.position().sub(me.pose.position()).norm(), o))
            .filter(|(d, _)| *d <= radius_m)
            .collect();
        out.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.vehicle_id.cmp(&b.1.vehicle_id))
        });
        out.into_iter().map(|(_, o)| o).collect()
    }
}

/// Points of `obs` per truth object (2D footprint test, 5 cm tolerance).
pub fn points_on_truths(obs: &Observation, truths: &[TruthObject]) -> Vec<usize> {
    let mut counts = vec![0; truths.len()];
    let pose = &obs.pose;
    let near: Vec<usize> = (0..truths.len())
        .filter(|&i| {
            truths[i].bbox.center().sub(pose.position()).norm() <= 60.0 + truths[i].bbox.radius()
        })
        .collect();
    for p in &obs.cloud.points {
        let g = pose.local_to_global(Vec2::new(p[0] as f64, p[1] as f64));
        if let Some(&i) = near.iter().find(|&&i| truths[i].bbox.contains(g, 0.05)) {
            counts[i] += 1;
        }
    }
    counts
}

/// Scene seed of frame `index`.
pub fn frame_seed(seed: u64, index: u32) -> u64 {
    rng::stream(seed, rng::FRAMES, index as u64).random()
}

pub fn gen_frame(cfg: &DatasetConfig, seed: u64, index: u32) -> Result<Frame, DatasetError> {
    let scene = gen_scene(&cfg.world, frame_seed(seed, index))?;
    let truths = scene
        .actors
        .iter()
        .map(|a| TruthObject {
            id: a.id,
            class: a.class,
            bbox: a.bbox,
        })
        .collect();
    let dist = |p: Vec2, q: Vec2| p.sub(q).norm();
    let lidar: Vec<_> = scene.lidar_vehicles().collect();
    let ego = lidar.iter().min_by(|a, b| {
        dist(a.center(), Vec2::default())
            .total_cmp(&dist(b.center(), Vec2::default()))
            .then(a.id.cmp(&b.id))
    });
    let mut observers = Vec::new();
    if let Some(ego) = ego {
        let mut rest: Vec<_> = lidar.iter().filter(|a| a.id != ego.id).collect();
        rest.sort_by(|a, b| {
            dist(a.center(), ego.center())
                .total_cmp(&dist(b.center(), ego.center()))
                .then(a.id.cmp(&b.id))
        });
        observers.push(*ego);
        observers.extend(
            rest.into_iter()
                .take(cfg.observers.saturating_sub(1))
                .copied(),
        );
    }
    let observations = observers
        .iter()
        .map(|a| Observation {
            vehicle_id: a.id,
            pose: sensor_pose(a, &cfg.lidar),
            cloud: raycast_lidar(&scene, a, &cfg.lidar),
        })
        .collect();
    Ok(Frame {
        index,
        truths,
        observations,
    })
}

/// Frames `indices`, generated in parallel, returned in order.
pub fn gen_frames(
    cfg: &DatasetConfig,
    seed: u64,
    indices: std::ops::Range<u32>,
) -> Result<Vec<Frame>, DatasetError> {
    indices
        .into_par_iter()
        .map(|i| gen_frame(cfg, seed, i))
        .collect()
}

pub fn frame_dir(root: &Path, index: u32) -> PathBuf {
    root.join(format!("frame_{index:05}"))
}

fn cloud_file(dir: &Path, vehicle_id: u32) -> PathBuf {
    dir.join(format!("vehicle_{vehicle_id}.pcl"))
}

pub fn encode_pcl(points: &[[f32; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + points.len() * 12);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pcl(buf: &[u8]) -> Result<Vec<[f32; 3]>, String> {
    if buf.len() < 8 || &buf[..4] != CLOUD_MAGIC {
        return Err("bad magic".into());
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + 12 * n {
        return Err(format!(
            "{} points declared, {} bytes present",
            n,
            buf.len()
        ));
    }
    let f = |i: usize| f32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    Ok((0..n)
        .map(|i| [f(3 * i), f(3 * i + 1), f(3 * i + 2)])
        .collect())
}

pub fn write_frame(root: &Path, frame: &Frame) -> Result<(), DatasetError> {
    let dir = frame_dir(root, frame.index);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut truth = String::new();
    for t in &frame.truths {
        let b = &t.bbox;
        truth.push_str(&format!(
            "{} {} {} {} {} {}\n",
            t.class.name(),
            b.cx,
            b.cy,
            b.w,
            b.l,
            b.yaw
        ));
    }
    let mut poses = String::new();
    for o in &frame.observations {
        let p = &o.pose;
        poses.push_str(&format!(
            "{} {} {} {} {}\n",
            o.vehicle_id, p.x, p.y, p.heading, p.altitude
        ));
        let path = cloud_file(&dir, o.vehicle_id);
        fs::write(&path, encode_pcl(&o.cloud.points)).map_err(io_err(&path))?;
    }
    let path = dir.join(TRUTH_FILE);
    fs::write(&path, truth).map_err(io_err(&path))?;
    let path = dir.join(POSES_FILE);
    fs::write(&path, poses).map_err(io_err(&path))?;
    Ok(())
}

fn parse_fields<const N: usize>(
    path: &Path,
    line_no: usize,
    fields: &[&str],
) -> Result<[f64; N], DatasetError> {
    let bad = |msg: String| DatasetError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    if fields.len() != N {
        return Err(bad(format!(
            "expected {} numbers, found {}",
            N,
            fields.len()
        )));
    }
    let mut out = [0.0; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.parse().map_err(|_| bad(format!("not a number: {f:?}")))?;
    }
    Ok(out)
}

pub fn read_frame(root: &Path, index: u32) -> Result<Frame, DatasetError> {
    let dir = frame_dir(root, index);
    let path = dir.join(TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut truths = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let class = ObjectClass::parse(fields[0]).ok_or_else(|| DatasetError::Parse {
            path: path.clone(),
            line: i + 1,
            msg: format!("unknown class {:?}", fields[0]),
        })?;
        let [cx, cy, w, l, yaw] = parse_fields::<5>(&path, i + 1, &fields[1..])?;
        truths.push(TruthObject {
            id: truths.len() as u32,
            class,
            bbox: OrientedBox::new(cx, cy, w, l, yaw),
        });
    }
    let path = dir.join(POSES_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut observations = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let id: u32 = fields[0].parse().map_err(|_| DatasetError::Parse {
            path: path.clone(),
            line: i + 1,
            msg: format!("bad vehicle id {:?}", fields[0]),
        })?;
        let [x, y, heading, altitude] = parse_fields::<4>(&path, i + 1, &fields[1..])?;
        let pose = Pose {
            x,
            y,
            heading,
            altitude,
        };
        let cpath = cloud_file(&dir, id);
        let bytes = fs::read(&cpath).map_err(io_err(&cpath))?;
        let points = decode_pcl(&bytes).map_err(|msg| DatasetError::Cloud { path: cpath, msg })?;
        observations.push(Observation {
            vehicle_id: id,
            pose,
            cloud: PointCloud {
                points,
                origin_pose: pose,
            },
        });
    }
    Ok(Frame {
        index,
        truths,
        observations,
    })
}

pub fn write_dataset(root: &Path, frames: &[Frame]) -> Result<(), DatasetError> {
    frames.iter().try_for_each(|f| write_frame(root, f))
}

/// Every `frame_NNNNN` directory under `root`, in index order.
pub fn read_dataset(root: &Path) -> Result<Vec<Frame>, DatasetError> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name();
        if let Some(i) = name
            .to_str()
            .and_then(|n| n.strip_prefix("frame_"))
            .and_then(|n| n.parse::<u32>().ok())
        {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    indices.into_iter().map(|i| read_frame(root, i)).collect()
}
