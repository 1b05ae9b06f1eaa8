//! The three sharing pipelines and their bandwidth accounting.
//!
//! Every participant sees the world through its own reported pose: a coop
//! renders its BEV and decodes its detections with that pose, and the ego
//! places whatever it receives with the pose in the message envelope. GPS
//! noise therefore shifts a coop's contribution exactly as it would on a car.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    aggregate, expand_channels, select_channels, AggregateError, AggregationMode,
};
use crate::align::{
    fixel_extent, nearest_fixel_extent, pad_bev, place_on_canvas, tma_padding, AlignError,
    FeatureGrid,
};
use crate::bev::{global_extent, project_bev, project_merged, BevImage, GridSpec};
use crate::detector::{
    decode, hypothesis_count, nms, Anchor, Detection, DetectorError, GridFrame, NMS_IOU,
};
use crate::geometry::wrap_angle;
use crate::nn::{Network, NnError};
use crate::rng;
use crate::wire::{self, PayloadKind, V2VMessage, WireError};
use crate::worldgen::{perturb_pose, PointCloud, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum CoopError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(
        "grid from vehicle {sender} has K={k}, C={c}; the ego network has K={ego_k}, C={ego_c}"
    )]
    Incompatible {
        sender: u32,
        k: usize,
        c: usize,
        ego_k: usize,
        ego_c: usize,
    },
    #[error("grid resolution {resolution} is not divisible by K={k}")]
    Resolution { resolution: usize, k: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Method {
    /// The ego on its own.
    Single,
    Ris,
    Dfs {
        mode: AggregationMode,
        tma: bool,
    },
    Hsm,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Single => "single".into(),
            Method::Ris => "ris".into(),
            Method::Dfs { mode, tma } => {
                format!("dfs-{}{}", mode.name(), if *tma { "" } else { "-notma" })
            }
            Method::Hsm => "hsm".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "single" => Method::Single,
            "ris" => Method::Ris,
            "hsm" => Method::Hsm,
            _ => {
                let rest = s.strip_prefix("dfs-")?;
                let (mode, tma) = match rest.strip_suffix("-notma") {
                    Some(m) => (m, false),
                    None => (rest, true),
                };
                let mode = AggregationMode::ALL
                    .into_iter()
                    .find(|a| a.name() == mode)?;
                Method::Dfs { mode, tma }
            }
        })
    }

    pub fn aggregation(&self) -> Option<AggregationMode> {
        match self {
            Method::Dfs { mode, .. } => Some(*mode),
            _ => None,
        }
    }

    pub fn tma(&self) -> bool {
        !matches!(self, Method::Dfs { tma: false, .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub anchors: Vec<Anchor>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Channels a DFS sender transmits; `None` sends all.
    pub keep_channels: Option<Vec<usize>>,
}

impl PipelineConfig {
    pub fn new(grid: GridSpec, anchors: Vec<Anchor>, conf_threshold: f64) -> Self {
        Self {
            grid,
            anchors,
            conf_threshold,
            nms_iou: NMS_IOU,
            keep_channels: None,
        }
    }
}

/// One vehicle's observation of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Participant {
    pub id: u32,
    /// Pose the vehicle believes it has (its GPS reading).
    pub pose: Pose,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PipelineOutput {
    pub detections: Vec<Detection>,
    /// Hypotheses entering the final NMS before confidence thresholding.
    pub hypotheses: usize,
    /// Bytes each coop sent, as `(sender, payload bytes, message bytes)`.
    pub sent: Vec<(u32, usize, usize)>,
}

impl PipelineOutput {
    pub fn payload_bytes(&self) -> usize {
        self.sent.iter().map(|s| s.1).sum()
    }

    pub fn message_bytes(&self) -> usize {
        self.sent.iter().map(|s| s.2).sum()
    }
}

/// The pose a coop reports for `frame`: its true pose displaced by GPS
/// error of `magnitude` in a direction drawn from the `(frame, id)` noise
/// stream, at wire precision. Every method sees the same error.
pub fn reported_pose(pose: &Pose, id: u32, magnitude: f64, seed: u64, frame: u64) -> Pose {
    let mut r = rng::stream2(seed, rng::NOISE, frame, id as u64);
    perturb_pose(pose, magnitude, &mut r).to_wire_precision()
}

fn head_frame(bev: &BevImage, net: &Network, grid: &GridSpec) -> GridFrame {
    GridFrame {
        extent: bev.extent,
        k: net.downsampling(),
        mpp: grid.meters_per_px(),
    }
}

fn check_resolution(net: &Network, grid: &GridSpec) -> Result<(), CoopError> {
    let k = net.downsampling();
    if grid.resolution_px % k != 0 {
        return Err(CoopError::Resolution {
            resolution: grid.resolution_px,
            k,
        });
    }
    Ok(())
}

/// Detector on one rendered BEV: pad to the lattice, run the full network,
/// decode, suppress. Returns detections and the hypothesis count.
pub fn detect_bev(
    bev: &BevImage,
    net: &Network,
    cfg: &PipelineConfig,
    source: u32,
) -> Result<(Vec<Detection>, usize), CoopError> {
    let padded = pad_bev(bev, &tma_padding(&bev.extent, net.downsampling()));
    let out = net.forward_eval(&padded.data)?;
    let set = decode(
        &out,
        &cfg.anchors,
        &head_frame(&padded, net, &cfg.grid),
        cfg.conf_threshold,
        source,
    )?;
    Ok((nms(&set.detections, cfg.nms_iou), hypothesis_count(&out)))
}

pub fn run_single(
    ego: &Participant,
    net: &Network,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, CoopError> {
    check_resolution(net, &cfg.grid)?;
    let bev = project_bev(&ego.cloud, &ego.pose, &cfg.grid);
    let (detections, hypotheses) = detect_bev(&bev, net, cfg, ego.id)?;
    Ok(PipelineOutput {
        detections,
        hypotheses,
        sent: Vec::new(),
    })
}

fn ship(
    sender: &Participant,
    frame: u32,
    kind: PayloadKind,
    payload: Vec<u8>,
) -> Result<(V2VMessage, usize), CoopError> {
    let msg = V2VMessage {
        sender: sender.id,
        frame,
        pose: sender.pose,
        kind,
        payload,
    };
    let bytes = wire::encode_message(&msg);
    let len = bytes.len();
    let received = wire::decode_message(&bytes)?;
    if received.kind != kind {
        return Err(WireError::PayloadKind {
            expected: kind,
            actual: received.kind,
        }
        .into());
    }
    Ok((received, len))
}

/// Merged BEV of the ego and the raw clouds the coops sent.
pub fn ris_bev(
    ego: &Participant,
    coops: &[Participant],
    frame: u32,
    grid: &GridSpec,
) -> Result<(BevImage, Vec<(u32, usize, usize)>), CoopError> {
    let mut received = Vec::with_capacity(coops.len());
    let mut sent = Vec::with_capacity(coops.len());
    for c in coops {
        let (msg, len) = ship(
            c,
            frame,
            PayloadKind::RawCloud,
            wire::encode_cloud(&c.cloud.points),
        )?;
        sent.push((c.id, msg.payload.len(), len));
        let points = wire::decode_cloud(&msg.payload)?;
        received.push((
            PointCloud {
                points,
                origin_pose: msg.pose,
            },
            msg.pose,
        ));
    }
    let mut clouds: Vec<(&PointCloud, Pose)> = vec![(&ego.cloud, ego.pose)];
    clouds.extend(received.iter().map(|(c, p)| (c, *p)));
    Ok((project_merged(&clouds, &ego.pose, grid), sent))
}

pub fn run_ris(
    ego: &Participant,
    coops: &[Participant],
    net: &Network,
    cfg: &PipelineConfig,
    frame: u32,
) -> Result<PipelineOutput, CoopError> {
    check_resolution(net, &cfg.grid)?;
    let (bev, sent) = ris_bev(ego, coops, frame, &cfg.grid)?;
    let (detections, hypotheses) = detect_bev(&bev, net, cfg, ego.id)?;
    Ok(PipelineOutput {
        detections,
        hypotheses,
        sent,
    })
}

/// Feature grid of one participant's own view.
pub fn participant_grid(
    p: &Participant,
    net: &Network,
    grid: &GridSpec,
    tma: bool,
) -> Result<(FeatureGrid, BevImage), CoopError> {
    let k = net.downsampling();
    let bev = project_bev(&p.cloud, &p.pose, grid);
    let bev = if tma {
        pad_bev(&bev, &tma_padding(&bev.extent, k))
    } else {
        bev
    };
    let features = net.features(&bev.data)?;
    let fg = if tma {
        FeatureGrid::from_aligned(features, &bev.extent, k, p.id)?
    } else {
        // placed later, relative to the receiver
        FeatureGrid {
            tensor: features,
            extent: bev.extent,
            k,
            source: p.id,
        }
    };
    Ok((fg, bev))
}

/// Ego's fused, cropped feature grid in DFS, with what each coop sent.
pub fn dfs_fused_grid(
    ego: &Participant,
    coops: &[Participant],
    net: &Network,
    cfg: &PipelineConfig,
    mode: AggregationMode,
    tma: bool,
    frame: u32,
) -> Result<(FeatureGrid, BevImage, Vec<(u32, usize, usize)>), CoopError> {
    check_resolution(net, &cfg.grid)?;
    let (k, c) = (net.downsampling(), net.feature_channels());
    // the receiver always pads its own input, so its grid is on the lattice
    let (ego_grid, ego_bev) = participant_grid(ego, net, &cfg.grid, true)?;
    let mut grids = vec![ego_grid.clone()];
    let mut sent = Vec::with_capacity(coops.len());
    let all: Vec<usize> = (0..c).collect();
    for p in coops {
        let (g, _) = participant_grid(p, net, &cfg.grid, tma)?;
        let keep = cfg.keep_channels.as_deref().unwrap_or(&all);
        let payload = wire::encode_features(&select_channels(&g, keep)?)?;
        let (msg, len) = ship(p, frame, PayloadKind::FeatureGrid, payload)?;
        sent.push((p.id, msg.payload.len(), len));

        // the receiver rebuilds the sender's extent from the reported pose
        let px = global_extent(&msg.pose, &cfg.grid);
        let rows = cfg.grid.resolution_px / k;
        let extent = if tma {
            let padded = tma_padding(&px, k).apply(&px);
            fixel_extent(&padded, k)?
        } else {
            nearest_fixel_extent(&px, rows, rows, k, &ego_grid.extent)
        };
        let sel = wire::decode_features(&msg.payload, extent, msg.sender)?;
        if sel.grid.k != k || sel.channels.iter().any(|&ch| ch as usize >= c) {
            return Err(CoopError::Incompatible {
                sender: msg.sender,
                k: sel.grid.k,
                c: sel
                    .channels
                    .iter()
                    .map(|&x| x as usize + 1)
                    .max()
                    .unwrap_or(0),
                ego_k: k,
                ego_c: c,
            });
        }
        grids.push(expand_channels(&sel, c)?);
    }
    let canvas = place_on_canvas(&grids)?;
    let fused = aggregate(&grids, &canvas, mode)?.crop(&ego_grid.extent);
    Ok((fused, ego_bev, sent))
}

pub fn run_dfs(
    ego: &Participant,
    coops: &[Participant],
    net: &Network,
    cfg: &PipelineConfig,
    mode: AggregationMode,
    tma: bool,
    frame: u32,
) -> Result<PipelineOutput, CoopError> {
    let (fused, ego_bev, sent) = dfs_fused_grid(ego, coops, net, cfg, mode, tma, frame)?;
    let out = net.detect_head(&fused.tensor)?;
    let set = decode(
        &out,
        &cfg.anchors,
        &head_frame(&ego_bev, net, &cfg.grid),
        cfg.conf_threshold,
        ego.id,
    )?;
    Ok(PipelineOutput {
        detections: nms(&set.detections, cfg.nms_iou),
        hypotheses: hypothesis_count(&out),
        sent,
    })
}

/// Global detections expressed in the frame of `pose`.
pub fn to_local(dets: &[Detection], pose: &Pose) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let c = pose.global_to_local(d.bbox.center());
            let mut o = *d;
            o.bbox.cx = c.x;
            o.bbox.cy = c.y;
            o.bbox.yaw = wrap_angle(d.bbox.yaw - pose.heading);
            o
        })
        .collect()
}

pub fn to_global(dets: &[Detection], pose: &Pose) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let c = pose.local_to_global(d.bbox.center());
            let mut o = *d;
            o.bbox.cx = c.x;
            o.bbox.cy = c.y;
            o.bbox.yaw = wrap_angle(d.bbox.yaw + pose.heading);
            o
        })
        .collect()
}

/// Pooled hypotheses of all participants merged by greedy NMS.
pub fn fuse_hypotheses(lists: &[Vec<Detection>], iou_threshold: f64) -> Vec<Detection> {
    let all: Vec<Detection> = lists.iter().flatten().copied().collect();
    nms(&all, iou_threshold)
}

pub fn run_hsm(
    ego: &Participant,
    coops: &[Participant],
    net: &Network,
    cfg: &PipelineConfig,
    frame: u32,
) -> Result<PipelineOutput, CoopError> {
    let own = run_single(ego, net, cfg)?;
    let mut lists = vec![own.detections];
    let mut hypotheses = own.hypotheses;
    let mut sent = Vec::with_capacity(coops.len());
    for p in coops {
        let theirs = run_single(p, net, cfg)?;
        hypotheses += theirs.hypotheses;
        let payload = wire::encode_detections(&to_local(&theirs.detections, &p.pose));
        let (msg, len) = ship(p, frame, PayloadKind::DetectionList, payload)?;
        sent.push((p.id, msg.payload.len(), len));
        lists.push(to_global(
            &wire::decode_detections(&msg.payload, msg.sender)?,
            &msg.pose,
        ));
    }
    Ok(PipelineOutput {
        detections: fuse_hypotheses(&lists, cfg.nms_iou),
        hypotheses,
        sent,
    })
}

pub fn run_method(
    method: Method,
    ego: &Participant,
    coops: &[Participant],
    net: &Network,
    cfg: &PipelineConfig,
    frame: u32,
) -> Result<PipelineOutput, CoopError> {
    match method {
        Method::Single => run_single(ego, net, cfg),
        Method::Ris => run_ris(ego, coops, net, cfg, frame),
        Method::Dfs { mode, tma } => run_dfs(ego, coops, net, cfg, mode, tma, frame),
        Method::Hsm => run_hsm(ego, coops, net, cfg, frame),
    }
}

/// Closed-form payload sizes (envelope excluded).
pub fn ris_payload_bytes(points: usize) -> usize {
    wire::CLOUD_HEADER_BYTES + points * wire::POINT_BYTES
}

pub fn dfs_payload_bytes(rows: usize, cols: usize, kept: usize) -> usize {
    wire::feature_header_bytes(kept) + rows * cols * kept * wire::FEATURE_VALUE_BYTES
}

pub fn hsm_payload_bytes(detections: usize) -> usize {
    wire::DETECTION_HEADER_BYTES + detections * wire::DETECTION_BYTES
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandwidthRow {
    pub method: String,
    pub frame: u32,
    pub sender: u32,
    pub payload_bytes: usize,
    pub message_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BandwidthReport {
    pub rows: Vec<BandwidthRow>,
}

impl BandwidthReport {
    pub fn push(&mut self, method: &str, frame: u32, out: &PipelineOutput) {
        for &(sender, payload_bytes, message_bytes) in &out.sent {
            self.rows.push(BandwidthRow {
                method: method.to_string(),
                frame,
                sender,
                payload_bytes,
                message_bytes,
            });
        }
    }

    pub fn total_payload(&self, method: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.payload_bytes)
            .sum()
    }

    pub fn total_message(&self, method: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.message_bytes)
            .sum()
    }

    /// Per-method totals in first-seen order.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,frame,sender,payload_bytes,message_bytes\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method, r.frame, r.sender, r.payload_bytes, r.message_bytes
            ));
        }
        s
    }
}

/// One coop's per-frame payload under each method, from the closed forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BandwidthModel {
    pub ris: usize,
    pub dfs: usize,
    pub hsm: usize,
}

pub fn bandwidth_model(
    points: usize,
    grid_cells: (usize, usize),
    kept: usize,
    detections: usize,
) -> BandwidthModel {
    BandwidthModel {
        ris: ris_payload_bytes(points),
        dfs: dfs_payload_bytes(grid_cells.0, grid_cells.1, kept),
        hsm: hsm_payload_bytes(detections),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::default_anchors;
    use crate::geometry::OrientedBox;
    use crate::nn::NetConfig;
    use crate::worldgen::ObjectClass;

    fn det(cx: f64, conf: f64, source: u32) -> Detection {
        Detection {
            bbox: OrientedBox::new(cx, 0.0, 4.5, 2.0, 0.0),
            class: ObjectClass::Vehicle,
            class_score: 0.9,
            confidence: conf,
            source,
        }
    }

    #[test]
    fn method_labels_round_trip() {
        for m in [
            Method::Single,
            Method::Ris,
            Method::Hsm,
            Method::Dfs {
                mode: AggregationMode::MaxNorm,
                tma: true,
            },
            Method::Dfs {
                mode: AggregationMode::Sum,
                tma: false,
            },
        ] {
            assert_eq!(Method::parse(&m.label()), Some(m));
        }
        assert_eq!(Method::parse("dfs-avg"), None);
    }

    #[test]
    fn hsm_merges_agreeing_hypotheses() {
        let fused = fuse_hypotheses(&[vec![det(5.0, 0.9, 0)], vec![det(5.0, 0.8, 1)]], NMS_IOU);
        assert_eq!(fused, vec![det(5.0, 0.9, 0)]);
    }

    #[test]
    fn hsm_keeps_displaced_hypotheses() {
        // 2 m along the 4.5 m axis: intersection 2.5 x 2, union 13, IoU 5/13 < 0.4
        let shifted = det(7.0, 0.8, 1);
        let iou = crate::geometry::iou(&det(5.0, 0.9, 0).bbox, &shifted.bbox);
        assert!((iou - 5.0 / 13.0).abs() < 1e-12);
        assert_eq!(
            fuse_hypotheses(&[vec![det(5.0, 0.9, 0)], vec![shifted]], NMS_IOU).len(),
            2
        );
    }

    #[test]
    fn local_global_round_trip() {
        let pose = Pose {
            x: 3.0,
            y: -4.0,
            heading: 2.5,
            altitude: 1.9,
        };
        let d = vec![det(1.0, 0.5, 2)];
        let back = to_global(&to_local(&d, &pose), &pose);
        assert!((back[0].bbox.cx - 1.0).abs() < 1e-12 && back[0].bbox.cy.abs() < 1e-12);
        assert!(wrap_angle(back[0].bbox.yaw).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_formulas() {
        let m = bandwidth_model(10_000, (32, 32), 16, 20);
        assert_eq!(m.ris, 4 + 120_000);
        assert_eq!(m.dfs, 7 + 32 + 32 * 32 * 16 * 4);
        assert_eq!(m.hsm, 4 + 20 * 29);
        assert!(m.ris > m.dfs && m.dfs > m.hsm);
        assert_eq!(hsm_payload_bytes(0), wire::DETECTION_HEADER_BYTES);
    }

    #[test]
    fn resolution_must_divide_by_k() {
        let net = Network::build(&NetConfig::compact(), 1).unwrap();
        let cfg = PipelineConfig::new(GridSpec::new(30, 7.5), default_anchors(), 0.5);
        let ego = Participant {
            id: 0,
            pose: Pose::default(),
            cloud: PointCloud::empty(Pose::default()),
        };
        assert_eq!(
            run_single(&ego, &net, &cfg),
            Err(CoopError::Resolution {
                resolution: 30,
                k: 4
            })
        );
    }
}
