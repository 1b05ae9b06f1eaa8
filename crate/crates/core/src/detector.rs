//! Single-shot detection head: anchors, decoding, the training loss and NMS.
//!
//! Each output cell carries, per anchor, `[dx, dy, dw, dl, yaw, objectness,
//! class]`. `dx, dy` are logits of the center offset inside the cell, `dw, dl`
//! are metric offsets from the anchor size, `yaw` is added to the anchor's
//! orientation prior, and the class logit is the vehicle-vs-pedestrian score.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::PixelExtent;
use crate::geometry::{iou, wrap_angle, OrientedBox};
use crate::nn::{Tensor, VALUES_PER_ANCHOR};
use crate::worldgen::{ObjectClass, PEDESTRIAN_SIZE, VEHICLE_SIZE};

pub const MIN_SIZE_M: f64 = 0.1;
pub const NMS_IOU: f64 = 0.4;
pub const AP_IOU: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("head output has {actual} channels, expected {expected} ({anchors} anchors x 7)")]
    ChannelMismatch {
        expected: usize,
        actual: usize,
        anchors: usize,
    },
    #[error("head output is {rows}x{cols} cells but the grid frame implies {exp_rows}x{exp_cols}")]
    GridMismatch {
        rows: usize,
        cols: usize,
        exp_rows: usize,
        exp_cols: usize,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    /// Extent along the heading.
    pub w: f64,
    pub l: f64,
    /// Orientation prior, radians.
    pub yaw: f64,
}

pub fn default_anchors() -> Vec<Anchor> {
    let (vw, vl) = VEHICLE_SIZE;
    let (pw, pl) = PEDESTRIAN_SIZE;
    vec![
        Anchor {
            w: vw,
            l: vl,
            yaw: 0.0,
        },
        Anchor {
            w: vw,
            l: vl,
            yaw: FRAC_PI_2,
        },
        Anchor {
            w: pw,
            l: pl,
            yaw: 0.0,
        },
        Anchor {
            w: pw,
            l: pl,
            yaw: FRAC_PI_2,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub loc: f64,
    pub shape: f64,
    pub yaw: f64,
    pub obj: f64,
    /// Extra factor on the objectness term of anchors without a target.
    pub obj_neg: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 1.0,
            shape: 1.0,
            yaw: 0.5,
            obj: 1.0,
            obj_neg: 0.5,
            class: 1.0,
        }
    }
}

/// Maps head cells to global coordinates: the head input covered the global
/// pixel `extent`, downsampled by `k`, at `mpp` meters per pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridFrame {
    pub extent: PixelExtent,
    pub k: usize,
    pub mpp: f64,
}

impl GridFrame {
    pub fn rows(&self) -> usize {
        self.extent.height() / self.k
    }

    pub fn cols(&self) -> usize {
        self.extent.width() / self.k
    }

    /// Continuous cell coordinates `(col, row)` of a global point.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        let k = self.k as f64;
        (
            (x / self.mpp - self.extent.x0 as f64) / k,
            (self.extent.y1 as f64 - y / self.mpp) / k,
        )
    }

    pub fn from_cell(&self, col: f64, row: f64) -> (f64, f64) {
        let k = self.k as f64;
        (
            (self.extent.x0 as f64 + col * k) * self.mpp,
            (self.extent.y1 as f64 - row * k) * self.mpp,
        )
    }

    fn check(&self, out: &Tensor, anchors: usize) -> Result<(), DetectorError> {
        let expected = anchors * VALUES_PER_ANCHOR;
        if out.c() != expected {
            return Err(DetectorError::ChannelMismatch {
                expected,
                actual: out.c(),
                anchors,
            });
        }
        if out.h() != self.rows() || out.w() != self.cols() {
            return Err(DetectorError::GridMismatch {
                rows: out.h(),
                cols: out.w(),
                exp_rows: self.rows(),
                exp_cols: self.cols(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub class: ObjectClass,
    /// Probability of `Vehicle` from the class logit.
    pub class_score: f64,
    pub confidence: f64,
    /// Vehicle that produced the hypothesis.
    pub source: u32,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DetectionSet {
    pub source: u32,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: OrientedBox,
    pub class: ObjectClass,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Number of hypotheses a head output proposes before thresholding.
pub fn hypothesis_count(out: &Tensor) -> usize {
    out.h() * out.w() * (out.c() / VALUES_PER_ANCHOR)
}

/// Decodes every anchor whose confidence exceeds `conf_threshold`.
pub fn decode(
    out: &Tensor,
    anchors: &[Anchor],
    frame: &GridFrame,
    conf_threshold: f64,
    source: u32,
) -> Result<DetectionSet, DetectorError> {
    frame.check(out, anchors.len())?;
    let mut detections = Vec::new();
    for r in 0..out.h() {
        for c in 0..out.w() {
            let px = out.pixel(r, c);
            for (a, anchor) in anchors.iter().enumerate() {
                let v = &px[a * VALUES_PER_ANCHOR..(a + 1) * VALUES_PER_ANCHOR];
                let p_vehicle = sigmoid(v[6]);
                let (class, p_class) = if p_vehicle >= 0.5 {
                    (ObjectClass::Vehicle, p_vehicle)
                } else {
                    (ObjectClass::Pedestrian, 1.0 - p_vehicle)
                };
                let confidence = sigmoid(v[5]) * p_class;
                if confidence <= conf_threshold {
                    continue;
                }
                let (x, y) = frame.from_cell(c as f64 + sigmoid(v[0]), r as f64 + sigmoid(v[1]));
                let bbox = OrientedBox::new(
                    x,
                    y,
                    (anchor.w + v[2]).max(MIN_SIZE_M),
                    (anchor.l + v[3]).max(MIN_SIZE_M),
                    wrap_angle(anchor.yaw + v[4]),
                );
                detections.push(Detection {
                    bbox,
                    class,
                    class_score: p_vehicle,
                    confidence,
                    source,
                });
            }
        }
    }
    Ok(DetectionSet { source, detections })
}

/// Inverse of [`decode`] for one box: the cell `(row, col)` containing its
/// center and the seven head values that reproduce it under `anchor`.
pub fn encode(
    bbox: &OrientedBox,
    anchor: &Anchor,
    class: ObjectClass,
    frame: &GridFrame,
) -> Option<((usize, usize), [f64; 7])> {
    let (fc, fr) = frame.to_cell(bbox.cx, bbox.cy);
    let (col, row) = (fc.floor(), fr.floor());
    if col < 0.0 || row < 0.0 || col >= frame.cols() as f64 || row >= frame.rows() as f64 {
        return None;
    }
    let cls = if class == ObjectClass::Vehicle {
        30.0
    } else {
        -30.0
    };
    let clamp = |t: f64| t.clamp(1e-12, 1.0 - 1e-12);
    Some((
        (row as usize, col as usize),
        [
            logit(clamp(fc - col)),
            logit(clamp(fr - row)),
            bbox.w - anchor.w,
            bbox.l - anchor.l,
            wrap_angle(bbox.yaw - anchor.yaw),
            30.0,
            cls,
        ],
    ))
}

/// Yaw residual target, folded into `[-pi/2, pi/2)` because a rectangle is
/// unchanged by a half turn.
fn yaw_target(truth_yaw: f64, anchor_yaw: f64) -> f64 {
    let d = wrap_angle(truth_yaw - anchor_yaw);
    if d >= FRAC_PI_2 {
        d - PI
    } else if d < -FRAC_PI_2 {
        d + PI
    } else {
        d
    }
}

/// Anchor with the best IoU against the truth when centered on it; ties go
/// to the lowest index.
pub fn best_anchor(truth: &OrientedBox, anchors: &[Anchor]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, a) in anchors.iter().enumerate() {
        let v = iou(
            truth,
            &OrientedBox::new(truth.cx, truth.cy, a.w, a.l, a.yaw),
        );
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub loc: f64,
    pub shape: f64,
    pub yaw: f64,
    pub obj_pos: f64,
    pub obj_neg: f64,
    pub class: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.loc + self.shape + self.yaw + self.obj_pos + self.obj_neg + self.class
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub terms: LossTerms,
    pub grad: Tensor,
    pub assigned: usize,
    /// Truths whose center fell outside the grid.
    pub skipped: usize,
    /// Truths that lost their cell and anchor to an earlier truth.
    pub collisions: usize,
}

struct Target {
    tx: f64,
    ty: f64,
    dw: f64,
    dl: f64,
    yaw: f64,
    vehicle: bool,
}

/// Weighted l2 and cross-entropy loss of one head output and its gradient.
pub fn loss(
    out: &Tensor,
    truths: &[GroundTruth],
    anchors: &[Anchor],
    frame: &GridFrame,
    lambda: &LossWeights,
) -> Result<LossOutput, DetectorError> {
    frame.check(out, anchors.len())?;
    let na = anchors.len();
    let mut targets: Vec<Option<Target>> = (0..out.h() * out.w() * na).map(|_| None).collect();
    let (mut assigned, mut skipped, mut collisions) = (0, 0, 0);
    for t in truths {
        let (fc, fr) = frame.to_cell(t.bbox.cx, t.bbox.cy);
        let (col, row) = (fc.floor(), fr.floor());
        if col < 0.0 || row < 0.0 || col >= out.w() as f64 || row >= out.h() as f64 {
            skipped += 1;
            continue;
        }
        let a = best_anchor(&t.bbox, anchors);
        let slot = &mut targets[(row as usize * out.w() + col as usize) * na + a];
        if slot.is_some() {
            collisions += 1;
            continue;
        }
        *slot = Some(Target {
            tx: fc - col,
            ty: fr - row,
            dw: t.bbox.w - anchors[a].w,
            dl: t.bbox.l - anchors[a].l,
            yaw: yaw_target(t.bbox.yaw, anchors[a].yaw),
            vehicle: t.class == ObjectClass::Vehicle,
        });
        assigned += 1;
    }

    let mut grad = Tensor::zeros(out.h(), out.w(), out.c());
    let rows: Vec<(LossTerms, Vec<f64>)> = (0..out.h())
        .into_par_iter()
        .map(|r| {
            let mut terms = LossTerms::default();
            let mut g = vec![0.0; out.w() * out.c()];
            for c in 0..out.w() {
                let px = out.pixel(r, c);
                for a in 0..na {
                    let base = a * VALUES_PER_ANCHOR;
                    let v = &px[base..base + VALUES_PER_ANCHOR];
                    let gv = &mut g[c * out.c() + base..c * out.c() + base + VALUES_PER_ANCHOR];
                    match &targets[(r * out.w() + c) * na + a] {
                        None => {
                            let w = lambda.obj * lambda.obj_neg;
                            terms.obj_neg += w * softplus(v[5]);
                            gv[5] = w * sigmoid(v[5]);
                        }
                        Some(t) => {
                            let (sx, sy) = (sigmoid(v[0]), sigmoid(v[1]));
                            let (ex, ey) = (sx - t.tx, sy - t.ty);
                            terms.loc += lambda.loc * (ex * ex + ey * ey);
                            gv[0] = lambda.loc * 2.0 * ex * sx * (1.0 - sx);
                            gv[1] = lambda.loc * 2.0 * ey * sy * (1.0 - sy);
                            let (ew, el) = (v[2] - t.dw, v[3] - t.dl);
                            terms.shape += lambda.shape * (ew * ew + el * el);
                            gv[2] = lambda.shape * 2.0 * ew;
                            gv[3] = lambda.shape * 2.0 * el;
                            let eyaw = wrap_angle(v[4] - t.yaw);
                            terms.yaw += lambda.yaw * eyaw * eyaw;
                            gv[4] = lambda.yaw * 2.0 * eyaw;
                            terms.obj_pos += lambda.obj * softplus(-v[5]);
                            gv[5] = lambda.obj * (sigmoid(v[5]) - 1.0);
                            let y = if t.vehicle { 1.0 } else { 0.0 };
                            terms.class += lambda.class
                                * if t.vehicle {
                                    softplus(-v[6])
                                } else {
                                    softplus(v[6])
                                };
                            gv[6] = lambda.class * (sigmoid(v[6]) - y);
                        }
                    }
                }
            }
            (terms, g)
        })
        .collect();
    let mut terms = LossTerms::default();
    for (r, (t, g)) in rows.into_iter().enumerate() {
        terms.loc += t.loc;
        terms.shape += t.shape;
        terms.yaw += t.yaw;
        terms.obj_pos += t.obj_pos;
        terms.obj_neg += t.obj_neg;
        terms.class += t.class;
        let start = grad.index(r, 0, 0);
        grad.data_mut()[start..start + g.len()].copy_from_slice(&g);
    }
    Ok(LossOutput {
        value: terms.total(),
        terms,
        grad,
        assigned,
        skipped,
        collisions,
    })
}

fn nms_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(dets[a].source.cmp(&dets[b].source))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression. Detections are visited by confidence
/// (descending), then source id, then input position; a detection survives
/// unless a kept detection of the same class overlaps it with IoU above
/// `iou_threshold`. Survivors are returned in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in nms_order(dets) {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// One detection per line: `class cx cy w l yaw conf`, six decimals.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.class.name(),
            b.cx,
            b.cy,
            b.w,
            b.l,
            b.yaw,
            d.confidence
        );
    }
    s
}

pub fn parse_detections(text: &str, source: u32) -> Result<Vec<Detection>, DetectorError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DetectorError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let class =
            ObjectClass::parse(f[0]).ok_or_else(|| err(format!("unknown class {:?}", f[0])))?;
        let mut v = [0.0; 6];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse().map_err(|e| err(format!("{s:?}: {e}")))?;
        }
        out.push(Detection {
            bbox: OrientedBox::new(v[0], v[1], v[2], v[3], v[4]),
            class,
            class_score: if class == ObjectClass::Vehicle {
                1.0
            } else {
                0.0
            },
            confidence: v[5],
            source,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::HEAD_CHANNELS;

    fn frame() -> GridFrame {
        GridFrame {
            extent: PixelExtent::new(-64, -64, 64, 64),
            k: 4,
            mpp: 0.5,
        }
    }

    fn det(cx: f64, conf: f64) -> Detection {
        Detection {
            bbox: OrientedBox::new(cx, 0.0, 4.5, 2.0, 0.0),
            class: ObjectClass::Vehicle,
            class_score: 1.0,
            confidence: conf,
            source: 0,
        }
    }

    #[test]
    fn zero_logits_decode_to_nothing() {
        let out = Tensor::zeros(32, 32, HEAD_CHANNELS);
        assert!(decode(&out, &default_anchors(), &frame(), 0.5, 0)
            .unwrap()
            .detections
            .is_empty());
    }

    #[test]
    fn zero_offset_decode_sits_at_cell_center() {
        let mut out = Tensor::zeros(32, 32, HEAD_CHANNELS);
        out.set(3, 5, 5, 10.0);
        out.set(3, 5, 6, 10.0);
        let set = decode(&out, &default_anchors(), &frame(), 0.5, 0).unwrap();
        assert_eq!(set.detections.len(), 1);
        let d = set.detections[0];
        // cell (3, 5), center offset 0.5 cells of 4 px at 0.5 m
        assert_eq!(
            (d.bbox.cx, d.bbox.cy),
            ((-64.0 + 5.5 * 4.0) * 0.5, (64.0 - 3.5 * 4.0) * 0.5)
        );
        assert_eq!((d.bbox.w, d.bbox.l, d.bbox.yaw), (4.5, 2.0, 0.0));
        assert_eq!(d.class, ObjectClass::Vehicle);
    }

    #[test]
    fn crafted_logits_decode_to_the_box() {
        let b = OrientedBox::new(12.0, -3.5, 4.5, 2.0, 0.3);
        let anchors = default_anchors();
        let ((r, c), v) = encode(&b, &anchors[0], ObjectClass::Vehicle, &frame()).unwrap();
        let mut out = Tensor::filled(32, 32, HEAD_CHANNELS, -30.0);
        out.pixel_mut(r, c)[..7].copy_from_slice(&v);
        let d = decode(&out, &anchors, &frame(), 0.5, 0).unwrap().detections;
        assert_eq!(d.len(), 1);
        let got = d[0].bbox;
        for (x, y) in [
            (got.cx, 12.0),
            (got.cy, -3.5),
            (got.w, 4.5),
            (got.l, 2.0),
            (got.yaw, 0.3),
        ] {
            assert!((x - y).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let out = Tensor::zeros(32, 32, 20);
        assert!(matches!(
            decode(&out, &default_anchors(), &frame(), 0.5, 0),
            Err(DetectorError::ChannelMismatch {
                expected: 28,
                actual: 20,
                ..
            })
        ));
    }

    #[test]
    fn perfect_prediction_zeroes_regression_terms() {
        let anchors = default_anchors();
        let truths = [
            GroundTruth {
                bbox: OrientedBox::new(3.3, 7.1, 4.4, 1.9, 1.4),
                class: ObjectClass::Vehicle,
            },
            GroundTruth {
                bbox: OrientedBox::new(-10.2, -5.0, 0.6, 0.6, 0.0),
                class: ObjectClass::Pedestrian,
            },
        ];
        let mut out = Tensor::filled(32, 32, HEAD_CHANNELS, -40.0);
        for t in &truths {
            let a = best_anchor(&t.bbox, &anchors);
            let mut b = t.bbox;
            b.yaw = anchors[a].yaw + yaw_target(b.yaw, anchors[a].yaw);
            let ((r, c), mut v) = encode(&b, &anchors[a], t.class, &frame()).unwrap();
            v[5] = 40.0;
            v[6] = if t.class == ObjectClass::Vehicle {
                40.0
            } else {
                -40.0
            };
            out.pixel_mut(r, c)[a * 7..a * 7 + 7].copy_from_slice(&v);
        }
        let lw = LossWeights {
            obj_neg: 0.0,
            ..LossWeights::default()
        };
        let l = loss(&out, &truths, &anchors, &frame(), &lw).unwrap();
        assert_eq!(l.assigned, 2);
        assert!(
            l.terms.loc < 1e-18 && l.terms.shape < 1e-18 && l.terms.yaw < 1e-18,
            "{:?}",
            l.terms
        );
        assert!(l.terms.class < 1e-15 && l.terms.obj_pos < 1e-15);
    }

    #[test]
    fn empty_scene_loss_vanishes_with_confident_negatives() {
        let out = Tensor::filled(32, 32, HEAD_CHANNELS, -60.0);
        let l = loss(
            &out,
            &[],
            &default_anchors(),
            &frame(),
            &LossWeights::default(),
        )
        .unwrap();
        assert!(l.value < 1e-20);
    }

    #[test]
    fn truths_outside_the_grid_are_counted() {
        let t = GroundTruth {
            bbox: OrientedBox::new(100.0, 0.0, 4.5, 2.0, 0.0),
            class: ObjectClass::Vehicle,
        };
        let out = Tensor::zeros(32, 32, HEAD_CHANNELS);
        let l = loss(
            &out,
            &[t],
            &default_anchors(),
            &frame(),
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!((l.assigned, l.skipped), (0, 1));
    }

    #[test]
    fn nms_singleton_and_duplicate() {
        assert_eq!(nms(&[det(0.0, 0.3)], 0.4), vec![det(0.0, 0.3)]);
        let kept = nms(&[det(0.0, 0.8), det(0.0, 0.9)], 0.4);
        assert_eq!(kept, vec![det(0.0, 0.9)]);
    }

    #[test]
    fn nms_keeps_other_classes() {
        let mut p = det(0.0, 0.5);
        p.class = ObjectClass::Pedestrian;
        assert_eq!(nms(&[det(0.0, 0.9), p], 0.4).len(), 2);
    }

    #[test]
    fn text_round_trip() {
        let d = vec![
            det(1.25, 0.75),
            Detection {
                class: ObjectClass::Pedestrian,
                ..det(-3.0, 0.5)
            },
        ];
        let s = format_detections(&d);
        assert!(s.starts_with("vehicle 1.250000 0.000000 4.500000 2.000000 0.000000 0.750000\n"));
        let back = parse_detections(&s, 0).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].class, ObjectClass::Pedestrian);
        assert!(parse_detections("car 1 2 3 4 5 6", 0).is_err());
    }
}
