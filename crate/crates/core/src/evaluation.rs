//! Average precision and the evaluation sweeps.
//!
//! Detections are matched to truths per class and pooled over frames.
//! Pipelines run with a low score floor so the precision-recall curve covers
//! the whole confidence range; precision and recall are also reported at the
//! operating threshold.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{global_extent, GridSpec};
use crate::cooperation::{
    reported_pose, run_method, CoopError, Method, Participant, PipelineConfig,
};
use crate::dataset::Frame;
use crate::detector::{Anchor, Detection, GroundTruth, AP_IOU, NMS_IOU};
use crate::geometry::iou;
use crate::nn::Network;
use crate::rng;
use crate::training::Strategy;
use crate::worldgen::ObjectClass;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame {frame}: {source}")]
    Pipeline { frame: u32, source: CoopError },
    #[error("no frames with an ego vehicle and {needed} coops within range")]
    NoFrames { needed: usize },
}

/// One point of a precision-recall sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PRCurve {
    /// One point per detection, by descending confidence.
    pub points: Vec<PrPoint>,
    pub ap: f64,
    pub truths: usize,
}

impl PRCurve {
    /// Precision and recall over the detections with confidence above
    /// `threshold`; precision of an empty set is 0.
    pub fn at_threshold(&self, threshold: f64) -> (f64, f64) {
        match self.points.iter().rev().find(|p| p.confidence > threshold) {
            Some(p) => (p.precision, p.recall),
            None => (0.0, 0.0),
        }
    }
}

/// Greedy matching of one frame for one class. Detections are visited by
/// descending confidence (ties keep input order) and each takes the
/// unmatched truth of highest IoU, if that IoU is at least `iou_thr`; ties
/// go to the lower truth index. Returns `(confidence, is_true_positive)`.
pub fn match_detections(
    dets: &[Detection],
    truths: &[GroundTruth],
    class: ObjectClass,
    iou_thr: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class == class)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; truths.len()];
    order
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths.iter().enumerate() {
                if taken[j] || t.class != class {
                    continue;
                }
                let v = iou(&dets[i].bbox, &t.bbox);
                if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            (dets[i].confidence, best.is_some())
        })
        .collect()
}

/// Curve of pooled, already matched detections against `truths` objects.
/// AP is the area under the all-point interpolated curve.
pub fn pr_curve(mut scored: Vec<(f64, bool)>, truths: usize) -> PRCurve {
    // stable, so equal confidences keep frame order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (i, &(confidence, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        let recall = if truths == 0 {
            0.0
        } else {
            tp as f64 / truths as f64
        };
        points.push(PrPoint {
            confidence,
            precision: tp as f64 / (i + 1) as f64,
            recall,
        });
    }
    let mut ap = 0.0;
    let mut best = 0.0f64;
    let mut envelope = vec![0.0; points.len()];
    for (e, p) in envelope.iter_mut().zip(&points).rev() {
        best = best.max(p.precision);
        *e = best;
    }
    let mut prev_recall = 0.0;
    for (p, e) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    PRCurve { points, ap, truths }
}

/// AP of one detection set against one truth set. `None` when the class has
/// neither truths nor detections.
pub fn average_precision(
    dets: &[Detection],
    truths: &[GroundTruth],
    class: ObjectClass,
    iou_thr: f64,
) -> Option<PRCurve> {
    average_precision_frames(&[(dets.to_vec(), truths.to_vec())], class, iou_thr)
}

/// AP pooled over frames, each matched separately.
pub fn average_precision_frames(
    frames: &[(Vec<Detection>, Vec<GroundTruth>)],
    class: ObjectClass,
    iou_thr: f64,
) -> Option<PRCurve> {
    let mut scored = Vec::new();
    let mut truths = 0;
    for (d, t) in frames {
        scored.extend(match_detections(d, t, class, iou_thr));
        truths += t.iter().filter(|g| g.class == class).count();
    }
    if scored.is_empty() && truths == 0 {
        return None;
    }
    Some(pr_curve(scored, truths))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub coop_radius_m: f64,
    /// Pipelines keep detections above this confidence for the PR sweep.
    pub score_floor: f64,
    /// Operating point for the reported precision and recall.
    pub conf_threshold: f64,
    pub ap_iou: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            coop_radius_m: 40.0,
            score_floor: 0.05,
            conf_threshold: 0.5,
            ap_iou: AP_IOU,
            nms_iou: NMS_IOU,
        }
    }
}

/// Everything a sweep needs besides the methods and the frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub grid: GridSpec,
    pub anchors: Vec<Anchor>,
    pub cfg: EvalConfig,
    /// Root seed of the GPS-noise streams.
    pub seed: u64,
}

impl Protocol {
    fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig::new(self.grid, self.anchors.clone(), self.cfg.score_floor);
        p.nms_iou = self.cfg.nms_iou;
        p
    }
}

/// A method together with the network it runs.
#[derive(Clone, Copy)]
pub struct Contender<'a> {
    pub method: Method,
    pub strategy: Strategy,
    pub net: &'a Network,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub method: String,
    pub aggregation: String,
    pub tma: bool,
    pub strategy: Strategy,
    pub noise_m: f64,
    pub n_coop: usize,
    pub class: ObjectClass,
    /// `None` when the class has neither truths nor detections.
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Frames left out for lack of coops.
    pub skipped_frames: usize,
    pub frames_used: usize,
}

pub const CSV_HEADER: &str =
    "method,aggregation,tma,strategy,noise_m,n_coop,class,ap,precision,recall";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let ap = r.ap.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.aggregation,
                r.tma,
                r.strategy.name(),
                r.noise_m,
                r.n_coop,
                r.class.name(),
                ap,
                r.precision,
                r.recall
            );
        }
        s
    }

    pub fn find(
        &self,
        method: &str,
        strategy: Strategy,
        noise_m: f64,
        n_coop: usize,
        class: ObjectClass,
    ) -> Option<&SweepRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.strategy == strategy
                && r.noise_m == noise_m
                && r.n_coop == n_coop
                && r.class == class
        })
    }
}

/// Ego, coop candidates (nearest first) and region-of-interest truths of a
/// frame, as the evaluation sees them.
pub struct EvalFrame<'a> {
    pub frame: &'a Frame,
    pub ego: Participant,
    pub coops: Vec<&'a crate::dataset::Observation>,
    pub truths: Vec<GroundTruth>,
    roi: (f64, f64, f64, f64),
    ego_box: Option<crate::geometry::OrientedBox>,
}

impl<'a> EvalFrame<'a> {
    pub fn new(frame: &'a Frame, grid: &GridSpec, radius_m: f64) -> Option<Self> {
        let e = frame.ego()?;
        let ego = Participant {
            id: e.vehicle_id,
            pose: e.pose.to_wire_precision(),
            cloud: e.cloud.clone(),
        };
        let roi = global_extent(&ego.pose, grid).to_meters(grid.meters_per_px());
        let inside = |x: f64, y: f64| x >= roi.0 && x < roi.2 && y >= roi.1 && y < roi.3;
        let truths = frame
            .truths
            .iter()
            .filter(|t| t.id != e.vehicle_id && inside(t.bbox.cx, t.bbox.cy))
            .map(|t| GroundTruth {
                bbox: t.bbox,
                class: t.class,
            })
            .collect();
        let ego_box = frame
            .truths
            .iter()
            .find(|t| t.id == e.vehicle_id)
            .map(|t| t.bbox);
        Some(Self {
            frame,
            ego,
            coops: frame.neighbours(e.vehicle_id, radius_m),
            truths,
            roi,
            ego_box,
        })
    }

    /// The `n` nearest coops, reporting poses with GPS error `noise_m`.
    pub fn participants(&self, n: usize, noise_m: f64, seed: u64) -> Vec<Participant> {
        self.coops
            .iter()
            .take(n)
            .map(|o| Participant {
                id: o.vehicle_id,
                pose: reported_pose(
                    &o.pose,
                    o.vehicle_id,
                    noise_m,
                    seed,
                    self.frame.index as u64,
                ),
                cloud: o.cloud.clone(),
            })
            .collect()
    }

    /// Detections inside the region of interest and off the ego's own body.
    pub fn keep(&self, dets: Vec<Detection>) -> Vec<Detection> {
        let r = self.roi;
        dets.into_iter()
            .filter(|d| {
                let c = d.bbox.center();
                c.x >= r.0
                    && c.x < r.2
                    && c.y >= r.1
                    && c.y < r.3
                    && !self.ego_box.is_some_and(|b| b.contains(c, 0.0))
            })
            .collect()
    }
}

/// Detections and hypothesis count of one method on one frame.
pub fn detect_frame(
    c: &Contender,
    f: &EvalFrame,
    n_coop: usize,
    noise_m: f64,
    pipe: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<Detection>, usize), EvalError> {
    let coops = f.participants(n_coop, noise_m, seed);
    let out =
        run_method(c.method, &f.ego, &coops, c.net, pipe, f.frame.index).map_err(|source| {
            EvalError::Pipeline {
                frame: f.frame.index,
                source,
            }
        })?;
    Ok((f.keep(out.detections), out.hypotheses))
}

/// Rows for one (method, noise, coop count) cell over `frames`.
pub fn evaluate_cell(
    c: &Contender,
    frames: &[EvalFrame],
    n_coop: usize,
    noise_m: f64,
    p: &Protocol,
) -> Result<Vec<SweepRow>, EvalError> {
    let pipe = p.pipeline();
    let cfg = &p.cfg;
    let results: Vec<(Vec<Detection>, Vec<GroundTruth>)> = frames
        .par_iter()
        .map(|f| {
            Ok((
                detect_frame(c, f, n_coop, noise_m, &pipe, p.seed)?.0,
                f.truths.clone(),
            ))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(ObjectClass::ALL
        .iter()
        .map(|&class| {
            let curve = average_precision_frames(&results, class, cfg.ap_iou);
            let (precision, recall) = curve
                .as_ref()
                .map(|k| k.at_threshold(cfg.conf_threshold))
                .unwrap_or((0.0, 0.0));
            SweepRow {
                method: c.method.label(),
                aggregation: c
                    .method
                    .aggregation()
                    .map(|a| a.name().to_string())
                    .unwrap_or_else(|| "none".into()),
                tma: c.method.tma(),
                strategy: c.strategy,
                noise_m,
                n_coop,
                class,
                ap: curve.map(|k| k.ap),
                precision,
                recall,
            }
        })
        .collect())
}

/// Frames with an ego and at least `needed` coops, plus the skip count.
pub fn eligible_frames<'a>(
    frames: &'a [Frame],
    grid: &GridSpec,
    cfg: &EvalConfig,
    needed: usize,
) -> (Vec<EvalFrame<'a>>, usize) {
    let all: Vec<Option<EvalFrame>> = frames
        .iter()
        .map(|f| EvalFrame::new(f, grid, cfg.coop_radius_m))
        .collect();
    let total = all.len();
    let kept: Vec<EvalFrame> = all
        .into_iter()
        .flatten()
        .filter(|f| f.coops.len() >= needed)
        .collect();
    let skipped = total - kept.len();
    (kept, skipped)
}

/// Noise magnitudes `0, step, ..., max` (inclusive, to rounding).
pub fn noise_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| (i as f64 * step * 1e9).round() / 1e9)
        .collect()
}

/// Every contender at every noise magnitude, `n_coop` coops, noise on coops only.
pub fn sweep_noise(
    contenders: &[Contender],
    frames: &[Frame],
    magnitudes: &[f64],
    n_coop: usize,
    p: &Protocol,
) -> Result<SweepResult, EvalError> {
    let (eval, skipped) = eligible_frames(frames, &p.grid, &p.cfg, n_coop);
    if eval.is_empty() {
        return Err(EvalError::NoFrames { needed: n_coop });
    }
    let mut rows = Vec::new();
    for c in contenders {
        for &m in magnitudes {
            rows.extend(evaluate_cell(c, &eval, n_coop, m, p)?);
        }
    }
    Ok(SweepResult {
        rows,
        skipped_frames: skipped,
        frames_used: eval.len(),
    })
}

/// Every contender for each coop count in `counts`, on the frames that have
/// enough coops for the largest count.
pub fn sweep_scale(
    contenders: &[Contender],
    frames: &[Frame],
    counts: &[usize],
    noise_m: f64,
    p: &Protocol,
) -> Result<SweepResult, EvalError> {
    let needed = counts.iter().copied().max().unwrap_or(0);
    let (eval, skipped) = eligible_frames(frames, &p.grid, &p.cfg, needed);
    if eval.is_empty() {
        return Err(EvalError::NoFrames { needed });
    }
    let mut rows = Vec::new();
    for c in contenders {
        for &n in counts {
            rows.extend(evaluate_cell(c, &eval, n, noise_m, p)?);
        }
    }
    Ok(SweepResult {
        rows,
        skipped_frames: skipped,
        frames_used: eval.len(),
    })
}

/// Expected precision of late fusion with `n_coop` coops.
///
/// Every participant detects each of the `tp_count` true objects and
/// produces `fp_per_vehicle` false positives on average. A coop's copy of a
/// true object fails to merge with the ego's with probability
/// `merge_fail_prob`, and then counts as a false positive. In expectation
///
/// ```text
/// precision = tp / (tp + (n + 1) * fp + tp * n * m)
/// ```
///
/// which is 1 when there is nothing to count.
pub fn hsm_fp_model(
    n_coop: usize,
    fp_per_vehicle: f64,
    merge_fail_prob: f64,
    tp_count: f64,
) -> f64 {
    let n = n_coop as f64;
    let denom = tp_count + (n + 1.0) * fp_per_vehicle + tp_count * n * merge_fail_prob;
    if denom <= 0.0 {
        1.0
    } else {
        tp_count / denom
    }
}

/// Pooled precision over `trials` simulated frames: false positives per
/// vehicle are Poisson, unmerged duplicates binomial.
pub fn hsm_fp_monte_carlo(
    n_coop: usize,
    fp_per_vehicle: f64,
    merge_fail_prob: f64,
    tp_count: u64,
    trials: usize,
    seed: u64,
) -> f64 {
    let mut r = rng::Rng::seed_from_u64(seed);
    let vehicles = n_coop as f64 + 1.0;
    let fp = (fp_per_vehicle > 0.0)
        .then(|| Poisson::new(vehicles * fp_per_vehicle).expect("positive rate"));
    let dup = Binomial::new(tp_count * n_coop as u64, merge_fail_prob.clamp(0.0, 1.0))
        .expect("valid binomial");
    let (mut tp, mut all) = (0u64, 0u64);
    for _ in 0..trials {
        let false_pos = fp.as_ref().map_or(0, |d| d.sample(&mut r) as u64) + dup.sample(&mut r);
        tp += tp_count;
        all += tp_count + false_pos;
    }
    if all == 0 {
        1.0
    } else {
        tp as f64 / all as f64
    }
}

/// Minimal line chart, one polyline per series.
pub fn svg_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 8] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
    }
    if !(x1 > x0) {
        x0 = if x0.is_finite() { x0 - 1.0 } else { 0.0 };
        x1 = x0 + 2.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        W / 2.0,
        xml(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>",
        H - M
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.1}</text>",
            M - 6.0,
            sy(y) + 4.0,
            y
        );
    }
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.2}</text>",
            sx(x),
            H - M + 16.0,
            x
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        xml(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>",
        H / 2.0,
        H / 2.0,
        xml(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = M + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{}</text>",
            W - M - 120.0,
            xml(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// One plot per class: AP against `x` (noise or coop count), a line per
/// method and strategy.
pub fn sweep_plots(result: &SweepResult, x_is_noise: bool) -> Vec<(ObjectClass, String)> {
    ObjectClass::ALL
        .iter()
        .map(|&class| {
            let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for r in result.rows.iter().filter(|r| r.class == class) {
                let name = format!("{} ({})", r.method, r.strategy.name());
                let x = if x_is_noise {
                    r.noise_m
                } else {
                    r.n_coop as f64
                };
                let Some(ap) = r.ap else { continue };
                match series.iter_mut().find(|s| s.0 == name) {
                    Some(s) => s.1.push((x, ap)),
                    None => series.push((name, vec![(x, ap)])),
                }
            }
            let (title, xl) = if x_is_noise {
                (
                    format!("{} AP vs GPS noise", class.name()),
                    "noise magnitude (m)",
                )
            } else {
                (
                    format!("{} AP vs cooperating vehicles", class.name()),
                    "coops",
                )
            };
            (class, svg_plot(&title, xl, "AP", &series))
        })
        .collect()
}
