//! Property suites with their reference oracles.
//!
//! Each suite returns a [`Check`]; the `selftest` command runs them all and
//! the acceptance tests call them at full case counts. Oracles here are
//! deliberately naive (brute force, rasterization, explicit enumeration) and
//! share no code with the implementations they check.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::aggregate::{aggregate, AggregationMode};
use crate::align::{nearest_fixel_extent, pad_tensor, place_on_canvas, tma_padding, FeatureGrid};
use crate::bev::{global_extent, GridSpec, PixelExtent};
use crate::cooperation::{self, Method, Participant, PipelineConfig};
use crate::dataset::{gen_frame, DatasetConfig};
use crate::detector::{default_anchors, loss, nms, Detection, GridFrame, GroundTruth, LossWeights};
use crate::evaluation::{hsm_fp_model, hsm_fp_monte_carlo, match_detections, pr_curve};
use crate::geometry::{iou, OrientedBox, Vec2};
use crate::nn::gradcheck::{check_gradients, relative_error};
use crate::nn::{BatchNorm, Conv2d, Layer, NetConfig, Network, Sequential, Tensor, HEAD_CHANNELS};
use crate::rng;
use crate::wire::{self, PayloadKind, V2VMessage};
use crate::worldgen::{ObjectClass, Pose};

/// Tolerance of the finite-difference suites.
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String, start: Instant) -> Self {
        Self {
            name,
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Case counts for the randomized suites.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub nms_sets: usize,
    pub iou_pairs: usize,
    pub iou_raster: usize,
    pub fixel_cases: usize,
    pub mc_trials: usize,
    pub wire_cases: usize,
}

impl Budget {
    pub const FULL: Budget = Budget {
        nms_sets: 1000,
        iou_pairs: 500,
        iou_raster: 1000,
        fixel_cases: 10_000,
        mc_trials: 100_000,
        wire_cases: 10_000,
    };
}

pub fn run_all(budget: Budget, seed: u64) -> Vec<Check> {
    vec![
        gradients(seed),
        tma_equivariance(seed),
        nms_oracle(budget.nms_sets, seed),
        rotated_iou(budget.iou_pairs, budget.iou_raster, seed),
        aggregation_algebra(budget.fixel_cases, seed),
        ap_correctness(),
        hsm_model(budget.mc_trials, seed),
        bandwidth(seed),
        wire_fuzz(budget.wire_cases, seed),
    ]
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn normal_tensor(h: usize, w: usize, c: usize, r: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(h, w, c, |_, _, _| normal(r))
}

fn random_conv(k: usize, cin: usize, cout: usize, r: &mut rng::Rng) -> Conv2d {
    let mut c = Conv2d::zeros(k, cin, cout);
    for w in c.weight.iter_mut().chain(c.bias.iter_mut()) {
        *w = 0.5 * normal(r);
    }
    c
}

/// Finite-difference check of every layer kind and of the detection loss.
pub fn gradients(seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng::stream(seed, "selftest-grad", 0);
    let mut bn = BatchNorm::new(4);
    for (g, b) in bn.gamma.iter_mut().zip(bn.beta.iter_mut()) {
        *g = 1.0 + 0.3 * normal(&mut r);
        *b = 0.3 * normal(&mut r);
    }
    let stack = Sequential::new(
        "suite",
        vec![
            Layer::Conv(random_conv(3, 3, 4, &mut r)),
            Layer::BatchNorm(bn),
            Layer::LeakyRelu,
            Layer::MaxPool,
            Layer::Conv(random_conv(1, 4, 5, &mut r)),
        ],
    );
    let inputs = vec![
        normal_tensor(6, 6, 3, &mut r),
        normal_tensor(6, 6, 3, &mut r),
    ];
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut ok = true;
    match check_gradients(&stack, &inputs, GRAD_STEP, seed) {
        Ok(rep) => {
            for e in &rep.entries {
                let at = e.layer.map_or("in".to_string(), |l| l.to_string());
                worst.push((format!("{at}:{}[{}]", e.kind, e.param), e.max_rel_err));
            }
            ok &= rep.passes(GRAD_TOL) && rep.checked() > 0;
        }
        Err(e) => return Check::new("gradients", false, e.to_string(), start),
    }

    // loss w.r.t. the head output
    let frame = GridFrame {
        extent: PixelExtent::new(0, 0, 16, 12),
        k: 4,
        mpp: 0.5,
    };
    let anchors = default_anchors();
    let out = Tensor::from_fn(3, 4, HEAD_CHANNELS, |_, _, _| r.random_range(-2.0..2.0));
    let truths = vec![
        GroundTruth {
            bbox: OrientedBox::new(2.3, 3.1, 4.2, 1.9, 0.3),
            class: ObjectClass::Vehicle,
        },
        GroundTruth {
            bbox: OrientedBox::new(5.6, 1.2, 0.7, 0.5, 1.4),
            class: ObjectClass::Pedestrian,
        },
        GroundTruth {
            bbox: OrientedBox::new(6.9, 4.4, 4.6, 2.1, -1.2),
            class: ObjectClass::Vehicle,
        },
    ];
    let lambda = LossWeights::default();
    let f = |t: &Tensor| loss(t, &truths, &anchors, &frame, &lambda).map(|l| l.value);
    match loss(&out, &truths, &anchors, &frame, &lambda) {
        Ok(base) => {
            let mut probe = out.clone();
            let mut max_err: f64 = 0.0;
            for j in 0..out.data().len() {
                let v = out.data()[j];
                probe.data_mut()[j] = v + GRAD_STEP;
                let lp = f(&probe).unwrap_or(f64::NAN);
                probe.data_mut()[j] = v - GRAD_STEP;
                let lm = f(&probe).unwrap_or(f64::NAN);
                probe.data_mut()[j] = v;
                max_err = max_err.max(relative_error(
                    base.grad.data()[j],
                    (lp - lm) / (2.0 * GRAD_STEP),
                ));
            }
            ok &= max_err < GRAD_TOL && base.assigned == truths.len();
            worst.push(("loss".into(), max_err));
        }
        Err(e) => return Check::new("gradients", false, e.to_string(), start),
    }
    let detail = worst
        .iter()
        .map(|(k, e)| format!("{k} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Check::new(
        "gradients",
        ok && start.elapsed() < Duration::from_secs(120),
        detail,
        start,
    )
}

/// Input pixels that can influence one output fixel, counted from its block edge.
pub fn receptive_margin(seq: &Sequential) -> usize {
    let (mut reach, mut stride) = (0usize, 1usize);
    for l in &seq.layers {
        match l {
            Layer::Conv(c) => reach += (c.kernel / 2) * stride,
            Layer::MaxPool => stride *= 2,
            _ => {}
        }
    }
    reach + stride
}

/// Sparse synthetic occupancy in global pixel coordinates.
fn world_pixel(gx: i64, gy: i64, ch: usize) -> f64 {
    let h = (gx.wrapping_mul(0x9E37_79B9)
        ^ gy.wrapping_mul(0x85EB_CA6B)
        ^ (ch as i64).wrapping_mul(0xC2B2_AE35)) as u64;
    let h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    let h = h ^ (h >> 29);
    if h % 5 == 0 {
        ((h >> 8) % 16 + 1) as f64 / 16.0
    } else {
        0.0
    }
}

fn window(e: &PixelExtent) -> Tensor {
    Tensor::from_fn(e.height(), e.width(), 3, |row, col, ch| {
        world_pixel(e.x0 + col as i64, e.y1 - 1 - row as i64, ch)
    })
}

/// Mean and max absolute difference of the two placed grids over their
/// shared fixels, staying `margin` fixels away from either grid's border.
fn overlap_disagreement(
    a: &FeatureGrid,
    b: &FeatureGrid,
    margin: i64,
) -> Option<(f64, f64, usize)> {
    let shrink = |e: &PixelExtent| {
        PixelExtent::new(e.x0 + margin, e.y0 + margin, e.x1 - margin, e.y1 - margin)
    };
    let common = shrink(&a.extent).intersect(&shrink(&b.extent))?;
    let (ca, cb) = (a.crop(&common), b.crop(&common));
    let diffs: Vec<f64> = ca
        .tensor
        .data()
        .iter()
        .zip(cb.tensor.data())
        .map(|(x, y)| (x - y).abs())
        .collect();
    let n = diffs.len();
    (n > 0).then(|| {
        (
            diffs.iter().sum::<f64>() / n as f64,
            diffs.iter().fold(0.0, |m: f64, d| m.max(*d)),
            n,
        )
    })
}

/// Two observers of one world at integer-pixel offsets: with padding their
/// shared interior fixels coincide; without it they disagree.
pub fn tma_equivariance(seed: u64) -> Check {
    let start = Instant::now();
    let net = match Network::build(&NetConfig::compact(), seed) {
        Ok(n) => n,
        Err(e) => return Check::new("tma_equivariance", false, e.to_string(), start),
    };
    let k = net.downsampling();
    let margin = receptive_margin(&net.fec).div_ceil(k) as i64 + 1;
    let size = 64;
    let a_px = PixelExtent::new(-21, 7, -21 + size, 7 + size);
    let mut aligned = Vec::new();
    let mut unaligned = Vec::new();
    for (dx, dy) in [(5i64, -3i64), (-10, 6), (13, 9), (2, 1)] {
        let b_px = PixelExtent::new(a_px.x0 + dx, a_px.y0 + dy, a_px.x1 + dx, a_px.y1 + dy);
        let grid = |e: &PixelExtent, source: u32| -> Result<FeatureGrid, String> {
            let p = tma_padding(e, k);
            let padded = p.apply(e);
            let t = net
                .features(&pad_tensor(&window(e), &p))
                .map_err(|e| e.to_string())?;
            FeatureGrid::from_aligned(t, &padded, k, source).map_err(|e| e.to_string())
        };
        let (ga, gb) = match (grid(&a_px, 0), grid(&b_px, 1)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Check::new("tma_equivariance", false, e, start),
        };
        // placement on the shared canvas must preserve each grid's extent
        match place_on_canvas(&[ga.clone(), gb.clone()]) {
            Ok(c) => {
                let back = |i: usize, g: &FeatureGrid| {
                    let p = c.placements[i];
                    c.extent.x0 + p.dx as i64 == g.extent.x0
                        && c.extent.y1 - p.row as i64 == g.extent.y1
                };
                if !back(0, &ga) || !back(1, &gb) {
                    return Check::new(
                        "tma_equivariance",
                        false,
                        "canvas placement moved a grid".into(),
                        start,
                    );
                }
            }
            Err(e) => return Check::new("tma_equivariance", false, e.to_string(), start),
        }
        if let Some(d) = overlap_disagreement(&ga, &gb, margin) {
            aligned.push(d);
        }
        // every offset is off the lattice; without padding the receiver snaps the raw grid to the nearest lattice offset
        let raw = match net.features(&window(&b_px)) {
            Ok(t) => t,
            Err(e) => return Check::new("tma_equivariance", false, e.to_string(), start),
        };
        let rows = raw.h();
        let gu = FeatureGrid {
            extent: nearest_fixel_extent(&b_px, rows, raw.w(), k, &ga.extent),
            tensor: raw,
            k,
            source: 1,
        };
        if let Some(d) = overlap_disagreement(&ga, &gu, margin) {
            unaligned.push(d);
        }
    }
    if aligned.is_empty() || unaligned.is_empty() {
        return Check::new(
            "tma_equivariance",
            false,
            "scenario has no shared interior".into(),
            start,
        );
    }
    let max_aligned = aligned.iter().map(|d| d.1).fold(0.0, f64::max);
    let mean_aligned = aligned.iter().map(|d| d.0).sum::<f64>() / aligned.len() as f64;
    let mean_unaligned = unaligned.iter().map(|d| d.0).sum::<f64>() / unaligned.len() as f64;
    let ok = max_aligned < 1e-5
        && mean_unaligned > mean_aligned
        && mean_unaligned >= 10.0 * mean_aligned;
    Check::new(
        "tma_equivariance",
        ok,
        format!("padded max diff {max_aligned:.1e}, mean {mean_aligned:.1e}; unpadded mean {mean_unaligned:.3e}"),
        start,
    )
}

fn random_box(r: &mut rng::Rng, spread: f64) -> OrientedBox {
    OrientedBox::new(
        r.random_range(-spread..spread),
        r.random_range(-spread..spread),
        r.random_range(0.5..4.0),
        r.random_range(0.5..4.0),
        r.random_range(-3.2..3.2),
    )
}

/// Reference greedy suppression: the unique subset `S` such that no two
/// members of a class conflict and every outsider conflicts with a member
/// ranked before it. Found by trying every subset.
pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    assert!(n <= 16, "brute force is exponential");
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(dets[a].source.cmp(&dets[b].source))
            .then(a.cmp(&b))
    });
    let pos: Vec<usize> = {
        let mut p = vec![0; n];
        for (i, &d) in rank.iter().enumerate() {
            p[d] = i;
        }
        p
    };
    let conflict = |a: usize, b: usize| {
        dets[a].class == dets[b].class && iou(&dets[a].bbox, &dets[b].bbox) > thr
    };
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let free =
            (0..n).all(|i| !inside(i) || (0..n).all(|j| j == i || !inside(j) || !conflict(i, j)));
        let covered = (0..n)
            .all(|i| inside(i) || (0..n).any(|j| inside(j) && pos[j] < pos[i] && conflict(i, j)));
        if free && covered {
            return rank
                .iter()
                .filter(|&&i| inside(i))
                .map(|&i| dets[i])
                .collect();
        }
    }
    unreachable!("greedy suppression always has a stable set")
}

fn random_detection(r: &mut rng::Rng) -> Detection {
    Detection {
        bbox: random_box(r, 3.0),
        class: if r.random_bool(0.7) {
            ObjectClass::Vehicle
        } else {
            ObjectClass::Pedestrian
        },
        class_score: 0.5,
        // coarse confidences so ties occur
        confidence: (r.random_range(0..10) as f64) / 10.0,
        source: r.random_range(0..3),
    }
}

pub fn nms_oracle(sets: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng::stream(seed, "selftest-nms", 0);
    let mut failures = 0;
    for _ in 0..sets {
        let n = r.random_range(0..=8);
        let dets: Vec<Detection> = (0..n).map(|_| random_detection(&mut r)).collect();
        let thr = r.random_range(0.05..0.8);
        let kept = nms(&dets, thr);
        let same = kept == nms_reference(&dets, thr);
        let idempotent = nms(&kept, thr) == kept;
        let conflict_free = kept.iter().enumerate().all(|(i, a)| {
            kept[i + 1..]
                .iter()
                .all(|b| a.class != b.class || iou(&a.bbox, &b.bbox) <= thr)
        });
        if !(same && idempotent && conflict_free) {
            failures += 1;
        }
    }
    Check::new(
        "nms_oracle",
        failures == 0,
        format!("{sets} sets, {failures} failures"),
        start,
    )
}

/// IoU by sampling an `n x n` lattice over the pair's bounding square.
pub fn iou_raster(a: &OrientedBox, b: &OrientedBox, n: usize) -> f64 {
    let pts: Vec<Vec2> = a.corners().into_iter().chain(b.corners()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let inside = |bx: &OrientedBox, p: Vec2| {
        let d = p.sub(bx.center()).rotate(-bx.yaw);
        d.x.abs() <= bx.w / 2.0 && d.y.abs() <= bx.l / 2.0
    };
    let (sx, sy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut both, mut either) = (0usize, 0usize);
    for i in 0..n {
        let y = y0 + (i as f64 + 0.5) * sy;
        for j in 0..n {
            let p = Vec2 {
                x: x0 + (j as f64 + 0.5) * sx,
                y,
            };
            let (ia, ib) = (inside(a, p), inside(b, p));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn rotated_iou(pairs: usize, raster: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng::stream(seed, "selftest-iou", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let a = random_box(&mut r, 1.5);
        let b = random_box(&mut r, 1.5);
        worst = worst.max((iou(&a, &b) - iou_raster(&a, &b, raster)).abs());
    }
    let sq = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
    let diamond = OrientedBox::new(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
    let analytic = (iou(&sq, &diamond) - std::f64::consts::FRAC_1_SQRT_2).abs();
    Check::new(
        "rotated_iou",
        worst < 2e-3 && analytic < 1e-6,
        format!(
            "{pairs} pairs, max raster gap {worst:.2e}; 45-degree square off by {analytic:.1e}"
        ),
        start,
    )
}

fn fixel(values: Vec<f64>, c: usize, source: u32) -> FeatureGrid {
    FeatureGrid {
        tensor: Tensor::from_vec(1, 1, c, values),
        extent: PixelExtent::new(0, 0, 1, 1),
        k: 4,
        source,
    }
}

fn fuse(grids: &[FeatureGrid], mode: AggregationMode) -> Vec<f64> {
    let canvas = place_on_canvas(grids).expect("compatible grids");
    aggregate(grids, &canvas, mode)
        .expect("non-empty")
        .tensor
        .data()
        .to_vec()
}

pub fn aggregation_algebra(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng::stream(seed, "selftest-agg", 0);
    let mut bad = [0usize; 4];
    for _ in 0..cases {
        let n = r.random_range(1..=5);
        let c = r.random_range(1..=6);
        let mut grids: Vec<FeatureGrid> = (0..n)
            .map(|i| {
                // small integer grid so ties and duplicates are common
                let v = (0..c)
                    .map(|_| r.random_range(-3..=3) as f64 * 0.5 + r.random_range(0.0..1e-3))
                    .collect();
                fixel(v, c, i as u32)
            })
            .collect();
        if r.random_bool(0.3) && n > 1 {
            let t = grids[0].tensor.clone();
            grids[n - 1].tensor = t;
        }
        let mut shuffled = grids.clone();
        shuffled.shuffle(&mut r);
        for mode in AggregationMode::ALL {
            let (a, b) = (fuse(&grids, mode), fuse(&shuffled, mode));
            let ok = match mode {
                AggregationMode::Sum => a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6),
                _ => a == b,
            };
            bad[0] += !ok as usize;
        }
        // duplicating an input (as another sender) changes nothing under max operators
        let mut dup = grids.clone();
        let pick = r.random_range(0..n);
        let mut extra = grids[pick].clone();
        extra.source = n as u32 + 7;
        dup.push(extra);
        for mode in [AggregationMode::MaxOut, AggregationMode::MaxNorm] {
            bad[1] += (fuse(&dup, mode) != fuse(&grids, mode)) as usize;
        }
        let out = fuse(&grids, AggregationMode::MaxNorm);
        bad[2] += !grids.iter().any(|g| g.tensor.data() == out.as_slice()) as usize;
        let out = fuse(&grids, AggregationMode::MaxOut);
        bad[3] += !(0..c).all(|ch| grids.iter().any(|g| g.tensor.data()[ch] == out[ch])) as usize;
    }
    Check::new(
        "aggregation_algebra",
        bad.iter().all(|&b| b == 0),
        format!(
            "{cases} cases; permutation {}, duplicate {}, max-norm selectivity {}, max-out selectivity {} failures",
            bad[0], bad[1], bad[2], bad[3]
        ),
        start,
    )
}

/// Reference matcher: precomputed IoU table, explicit scans.
fn match_reference(dets: &[Detection], truths: &[GroundTruth], thr: f64) -> Vec<(f64, bool)> {
    let table: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| truths.iter().map(|t| iou(&d.bbox, &t.bbox)).collect())
        .collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort, stable, by descending confidence
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j - 1]].confidence < dets[order[j]].confidence {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; truths.len()];
    let mut out = Vec::new();
    for &i in &order {
        let mut pick = None;
        let mut best = -1.0;
        for j in 0..truths.len() {
            if !used[j] && table[i][j] >= thr && table[i][j] > best {
                best = table[i][j];
                pick = Some(j);
            }
        }
        if let Some(j) = pick {
            used[j] = true;
        }
        out.push((dets[i].confidence, pick.is_some()));
    }
    out
}

/// All-point AP from its definition: at every recall step, the best
/// precision reached at that recall or beyond.
pub fn ap_reference(scored: &[(f64, bool)], truths: usize) -> f64 {
    if truths == 0 {
        return 0.0;
    }
    let mut pr = Vec::new();
    let mut tp = 0;
    for (i, s) in scored.iter().enumerate() {
        tp += s.1 as usize;
        pr.push((tp as f64 / (i + 1) as f64, tp as f64 / truths as f64));
    }
    let mut ap = 0.0;
    for step in 1..=truths {
        let level = step as f64 / truths as f64;
        let best = pr
            .iter()
            .filter(|p| p.1 >= level - 1e-12)
            .map(|p| p.0)
            .fold(0.0, f64::max);
        ap += best / truths as f64;
    }
    ap
}

pub fn ap_correctness() -> Check {
    let start = Instant::now();
    let slots = [
        OrientedBox::new(0.0, 0.0, 4.0, 2.0, 0.0),
        OrientedBox::new(0.4, 0.0, 4.0, 2.0, 0.0),
        OrientedBox::new(1.0, 0.2, 4.0, 2.0, 0.1),
        OrientedBox::new(0.2, 0.3, 4.0, 2.0, 0.0),
    ];
    let confs = [0.9, 0.5, 0.5, 0.2];
    let mut instances = 0;
    let mut failures = 0;
    // every choice of up to three truths and three detections over the slots
    for tmask in 0u32..16 {
        let truths: Vec<GroundTruth> = (0..4)
            .filter(|i| tmask & (1 << i) != 0)
            .map(|i| GroundTruth {
                bbox: slots[i],
                class: ObjectClass::Vehicle,
            })
            .collect();
        for nd in 0..=3usize {
            for code in 0..16usize.pow(nd as u32) {
                let dets: Vec<Detection> = (0..nd)
                    .map(|i| {
                        let v = (code / 16usize.pow(i as u32)) % 16;
                        Detection {
                            bbox: slots[v % 4],
                            class: ObjectClass::Vehicle,
                            class_score: 1.0,
                            confidence: confs[v / 4],
                            source: 0,
                        }
                    })
                    .collect();
                for thr in [0.3, 0.5, 0.75] {
                    instances += 1;
                    let got = match_detections(&dets, &truths, ObjectClass::Vehicle, thr);
                    let want = match_reference(&dets, &truths, thr);
                    let ap = pr_curve(got.clone(), truths.len()).ap;
                    if got != want || (ap - ap_reference(&want, truths.len())).abs() > 1e-12 {
                        failures += 1;
                    }
                }
            }
        }
    }
    // three truths, a false positive on top, then three exact hits
    let truths: Vec<GroundTruth> = (0..3)
        .map(|i| GroundTruth {
            bbox: OrientedBox::new(10.0 * i as f64, 0.0, 4.0, 2.0, 0.0),
            class: ObjectClass::Vehicle,
        })
        .collect();
    let mut dets = vec![Detection {
        bbox: OrientedBox::new(50.0, 50.0, 4.0, 2.0, 0.0),
        class: ObjectClass::Vehicle,
        class_score: 1.0,
        confidence: 0.99,
        source: 0,
    }];
    dets.extend(truths.iter().enumerate().map(|(i, t)| Detection {
        bbox: t.bbox,
        class: ObjectClass::Vehicle,
        class_score: 1.0,
        confidence: 0.9 - 0.1 * i as f64,
        source: 0,
    }));
    let curve = pr_curve(
        match_detections(&dets, &truths, ObjectClass::Vehicle, 0.75),
        3,
    );
    let precisions: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    let hand = curve.ap == 0.75
        && precisions == [0.0, 0.5, 2.0 / 3.0, 0.75]
        && curve.points[3].recall == 1.0;
    Check::new(
        "ap_correctness",
        failures == 0 && hand,
        format!(
            "{instances} exhaustive instances, {failures} mismatches; hand case AP {}",
            curve.ap
        ),
        start,
    )
}

/// The parameter grid of the analytic-model check.
pub const HSM_GRID_N: [usize; 5] = [0, 1, 2, 4, 6];
pub const HSM_GRID_FP: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];
pub const HSM_GRID_M: [f64; 5] = [0.0, 0.1, 0.25, 0.5, 0.9];
pub const HSM_TP: u64 = 10;

pub fn hsm_model(trials: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cell = 0;
    for &n in &HSM_GRID_N {
        for &fp in &HSM_GRID_FP {
            for &m in &HSM_GRID_M {
                let model = hsm_fp_model(n, fp, m, HSM_TP as f64);
                let mc = hsm_fp_monte_carlo(n, fp, m, HSM_TP, trials, seed.wrapping_add(cell));
                worst = worst.max((model - mc).abs());
                cell += 1;
            }
        }
    }
    let monotone = HSM_GRID_FP.iter().filter(|&&fp| fp > 0.0).all(|&fp| {
        HSM_GRID_M.iter().all(|&m| {
            (0..8).all(|n| {
                hsm_fp_model(n + 1, fp, m, HSM_TP as f64) < hsm_fp_model(n, fp, m, HSM_TP as f64)
            })
        })
    });
    Check::new(
        "hsm_model",
        worst < 0.01 && monotone,
        format!(
            "125 cells x {trials} trials, max gap {worst:.4}; strictly decreasing in n: {monotone}"
        ),
        start,
    )
}

/// Measured payloads of one default-config frame with one coop, against
/// the closed forms.
pub fn bandwidth(seed: u64) -> Check {
    let start = Instant::now();
    let fail = |m: String| Check::new("bandwidth", false, m, start);
    let cfg = DatasetConfig::default();
    let frame = match gen_frame(&cfg, seed, 0) {
        Ok(f) => f,
        Err(e) => return fail(e.to_string()),
    };
    let net = match Network::build(&NetConfig::default(), seed) {
        Ok(n) => n,
        Err(e) => return fail(e.to_string()),
    };
    let grid = GridSpec::new(128, 32.0);
    let pipe = PipelineConfig::new(grid, default_anchors(), 0.5);
    let part = |i: usize| Participant {
        id: frame.observations[i].vehicle_id,
        pose: frame.observations[i].pose.to_wire_precision(),
        cloud: frame.observations[i].cloud.clone(),
    };
    if frame.observations.len() < 2 {
        return fail("frame has no coop".into());
    }
    let (ego, coop) = (part(0), part(1));
    let run = |m: Method, p: &PipelineConfig| {
        cooperation::run_method(m, &ego, std::slice::from_ref(&coop), &net, p, 0)
    };
    let dfs = Method::Dfs {
        mode: AggregationMode::Sum,
        tma: true,
    };
    let (ris_out, dfs_out, hsm_out) = match (
        run(Method::Ris, &pipe),
        run(dfs, &pipe),
        run(Method::Hsm, &pipe),
    ) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return fail(e.to_string()),
    };
    let c = net.feature_channels();
    let k = net.downsampling();
    let coop_dets = match cooperation::run_single(&coop, &net, &pipe) {
        Ok(o) => o.detections.len(),
        Err(e) => return fail(e.to_string()),
    };
    let px = global_extent(&coop.pose, &grid);
    let padded = tma_padding(&px, k).apply(&px);
    let cells = (padded.width() / k) * (padded.height() / k);
    let ris = ris_out.payload_bytes();
    let dfs_b = dfs_out.payload_bytes();
    let hsm = hsm_out.payload_bytes();
    let ris_ok = ris == 4 + 12 * coop.cloud.len();
    let hsm_ok = hsm == 4 + 29 * coop_dets;
    let feat = cells * c * 4;
    let dfs_ok = dfs_b == 7 + 2 * c + feat;
    let mut half = pipe.clone();
    half.keep_channels = Some((0..c / 2).collect());
    let halved = match run(dfs, &half) {
        Ok(o) => o.payload_bytes(),
        Err(e) => return fail(e.to_string()),
    };
    let halves = halved
        .checked_sub(7 + 2 * (c / 2))
        .is_some_and(|h| h * 2 == feat);
    let envelope = ris_out.message_bytes() == ris + wire::ENVELOPE_BYTES;
    // the same sender with a typical trained detector's output of twenty boxes
    let model = cooperation::bandwidth_model(
        coop.cloud.len(),
        (padded.height() / k, padded.width() / k),
        c,
        20,
    );
    let typical = model.ris > model.dfs && model.dfs > model.hsm && model.hsm == 4 + 29 * 20;
    Check::new(
        "bandwidth",
        ris > dfs_b && dfs_b > hsm && ris_ok && dfs_ok && hsm_ok && halves && envelope && typical,
        format!(
            "RIS {ris} B ({} points), DFS {dfs_b} B (C={c}), HSM {hsm} B ({coop_dets} detections, {} B at 20), DFS keeping C/2 {halved} B",
            coop.cloud.len(),
            model.hsm
        ),
        start,
    )
}

fn random_message(r: &mut rng::Rng) -> V2VMessage {
    let kind = [
        PayloadKind::RawCloud,
        PayloadKind::FeatureGrid,
        PayloadKind::DetectionList,
    ][r.random_range(0..3)];
    let len = r.random_range(0..64);
    V2VMessage {
        sender: r.random(),
        frame: r.random(),
        // f32-representable, as the envelope carries f32
        pose: Pose {
            x: r.random_range(-1e3f32..1e3) as f64,
            y: r.random_range(-1e3f32..1e3) as f64,
            heading: r.random_range(-3.2f32..3.2) as f64,
            altitude: r.random_range(0.0f32..3.0) as f64,
        },
        kind,
        payload: (0..len).map(|_| r.random()).collect(),
    }
}

pub fn wire_fuzz(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = rng::stream(seed, "selftest-wire", 0);
    let (mut trips, mut magic, mut crc) = (0, 0, 0);
    for _ in 0..cases {
        let m = random_message(&mut r);
        let bytes = wire::encode_message(&m);
        trips += (wire::decode_message(&bytes).as_ref() != Ok(&m)) as usize;
        let mut bad = bytes.clone();
        bad[r.random_range(0..4)] ^= 1 << r.random_range(0..8);
        magic += wire::decode_message(&bad).is_ok() as usize;
        let mut bad = bytes.clone();
        let at = r.random_range(4..bad.len());
        bad[at] ^= 1 << r.random_range(0..8);
        crc += wire::decode_message(&bad).is_ok() as usize;
    }
    Check::new(
        "wire_fuzz",
        trips + magic + crc == 0,
        format!(
            "{cases} messages; {trips} round-trip, {magic} bad-magic, {crc} corruption failures"
        ),
        start,
    )
}
