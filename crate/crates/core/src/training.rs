//! Single-vehicle (SVT) and cooperative-vehicle (CVT) training.
//!
//! SVT fits the whole network to one observation at a time. CVT runs the
//! ego and one coop observation through the same feature extractor, aligns
//! and aggregates the two grids, crops back to the ego extent and computes
//! the loss there, so the gradient reaches the shared weights through both
//! branches.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    aggregate_backward, aggregate_with_routes, AggregateError, AggregationMode,
};
use crate::align::{pad_bev, place_on_canvas, tma_padding, AlignError, FeatureGrid};
use crate::bev::{project_bev, GridSpec, PixelExtent, SATURATION};
use crate::dataset::{points_on_truths, Frame, Observation};
use crate::detector::{loss, Anchor, DetectorError, GridFrame, GroundTruth, LossWeights};
use crate::nn::io::TrainState;
use crate::nn::{LayerCache, Mode, Network, NnError, SeqGrads, Tensor};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("no training samples")]
    NoSamples,
    #[error("CVT needs paired samples; sample {0} has no coop view")]
    Unpaired(usize),
    #[error("grid resolution {resolution} is not divisible by K={k}")]
    Resolution { resolution: usize, k: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Svt,
    Cvt,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Svt => "svt",
            Strategy::Cvt => "cvt",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        match s {
            "svt" => Some(Strategy::Svt),
            "cvt" => Some(Strategy::Cvt),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate at 60% and again at 85% of the epochs.
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss: LossWeights,
    /// Fusion used by CVT.
    pub aggregation: AggregationMode,
    pub pair_radius_m: f64,
    /// A truth object is a training target only if the observations of the
    /// sample put at least this many points on it.
    pub min_truth_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            momentum: 0.9,
            batch_size: 8,
            loss: LossWeights::default(),
            aggregation: AggregationMode::Sum,
            pair_radius_m: 40.0,
            min_truth_points: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let e = self.epochs as f64;
        let steps = [0.6, 0.85]
            .iter()
            .filter(|&&f| epoch as f64 >= (f * e).floor())
            .count();
        self.learning_rate * self.lr_decay.powi(steps as i32)
    }
}

/// An observation rendered and padded onto the `K` lattice, stored as
/// saturated point counts to keep datasets small.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub counts: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    /// Padded global pixel extent.
    pub extent: PixelExtent,
    pub source: u32,
}

impl View {
    pub fn render(obs: &Observation, grid: &GridSpec, k: usize) -> View {
        let bev = project_bev(&obs.cloud, &obs.pose, grid);
        let padded = pad_bev(&bev, &tma_padding(&bev.extent, k));
        let s = SATURATION as f64;
        View {
            counts: padded
                .data
                .data()
                .iter()
                .map(|v| (v * s).round() as u8)
                .collect(),
            rows: padded.data.h(),
            cols: padded.data.w(),
            extent: padded.extent,
            source: obs.vehicle_id,
        }
    }

    /// An empty view over `extent`.
    pub fn blank(extent: PixelExtent, source: u32) -> View {
        let (rows, cols) = (extent.height(), extent.width());
        View {
            counts: vec![0; rows * cols * 3],
            rows,
            cols,
            extent,
            source,
        }
    }

    pub fn tensor(&self) -> Tensor {
        let s = SATURATION as f64;
        Tensor::from_vec(
            self.rows,
            self.cols,
            3,
            self.counts.iter().map(|&c| c as f64 / s).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub ego: View,
    /// Present in CVT samples.
    pub coop: Option<View>,
    /// Global boxes; the loss places them on the ego grid.
    pub truths: Vec<GroundTruth>,
}

/// An ego observation and the coop it was paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pairing {
    /// Position of the frame in the input slice.
    pub frame: usize,
    pub ego: u32,
    pub coop: u32,
}

/// Coops eligible for `ego`: other observers within `radius_m` that share at
/// least one target (a truth object other than the two vehicles) within
/// `radius_m` of both.
pub fn eligible_coops(frame: &Frame, ego: u32, radius_m: f64) -> Vec<u32> {
    let Some(e) = frame.observation(ego) else {
        return Vec::new();
    };
    let ep = e.pose.position();
    frame
        .neighbours(ego, radius_m)
        .into_iter()
        .filter(|c| {
            let cp = c.pose.position();
            frame.truths.iter().any(|t| {
                t.id != ego
                    && t.id != c.vehicle_id
                    && t.bbox.center().sub(ep).norm() <= radius_m
                    && t.bbox.center().sub(cp).norm() <= radius_m
            })
        })
        .map(|c| c.vehicle_id)
        .collect()
}

/// Pairs every observation with a uniformly chosen eligible coop. Returns
/// the pairs and how many observations had none.
pub fn pair_observations(frames: &[Frame], radius_m: f64, seed: u64) -> (Vec<Pairing>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (fi, f) in frames.iter().enumerate() {
        for o in &f.observations {
            let options = eligible_coops(f, o.vehicle_id, radius_m);
            if options.is_empty() {
                skipped += 1;
                continue;
            }
            let mut r = rng::stream2(seed, rng::PAIRING, f.index as u64, o.vehicle_id as u64);
            let coop = options[r.random_range(0..options.len())];
            pairs.push(Pairing {
                frame: fi,
                ego: o.vehicle_id,
                coop,
            });
        }
    }
    (pairs, skipped)
}

fn sample_truths(
    frame: &Frame,
    views: &[&Observation],
    ego: &View,
    grid: &GridSpec,
    min_points: usize,
) -> Vec<GroundTruth> {
    let mut points = vec![0; frame.truths.len()];
    for v in views {
        for (p, n) in points.iter_mut().zip(points_on_truths(v, &frame.truths)) {
            *p += n;
        }
    }
    let (x0, y0, x1, y1) = ego.extent.to_meters(grid.meters_per_px());
    frame
        .truths
        .iter()
        .zip(points)
        .filter(|(t, n)| {
            let c = t.bbox.center();
            t.id != ego.source && *n >= min_points && c.x >= x0 && c.x < x1 && c.y >= y0 && c.y < y1
        })
        .map(|(t, _)| GroundTruth {
            bbox: t.bbox,
            class: t.class,
        })
        .collect()
}

/// One SVT sample per observation.
pub fn svt_samples(
    frames: &[Frame],
    grid: &GridSpec,
    k: usize,
    min_points: usize,
) -> Vec<TrainSample> {
    let jobs: Vec<(&Frame, &Observation)> = frames
        .iter()
        .flat_map(|f| f.observations.iter().map(move |o| (f, o)))
        .collect();
    jobs.par_iter()
        .map(|(f, o)| {
            let ego = View::render(o, grid, k);
            let truths = sample_truths(f, &[o], &ego, grid, min_points);
            TrainSample {
                ego,
                coop: None,
                truths,
            }
        })
        .collect()
}

/// One CVT sample per pairing.
pub fn cvt_samples(
    frames: &[Frame],
    pairs: &[Pairing],
    grid: &GridSpec,
    k: usize,
    min_points: usize,
) -> Vec<TrainSample> {
    pairs
        .par_iter()
        .map(|p| {
            let f = &frames[p.frame];
            let (e, c) = (
                f.observation(p.ego).expect("paired ego"),
                f.observation(p.coop).expect("paired coop"),
            );
            let ego = View::render(e, grid, k);
            let truths = sample_truths(f, &[e, c], &ego, grid, min_points);
            TrainSample {
                ego,
                coop: Some(View::render(c, grid, k)),
                truths,
            }
        })
        .collect()
}

/// Gradients of the two halves of the network for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrads {
    /// Mean loss over the batch.
    pub loss: f64,
    pub odm: SeqGrads,
    /// Feature-extractor gradient through the ego branch.
    pub fec_ego: SeqGrads,
    /// Feature-extractor gradient through the coop branch (CVT only).
    pub fec_coop: Option<SeqGrads>,
}

impl BatchGrads {
    /// Total feature-extractor gradient of the shared weights.
    pub fn fec(&self) -> SeqGrads {
        let mut g = self.fec_ego.clone();
        if let Some(c) = &self.fec_coop {
            g.add_assign(c);
        }
        g
    }
}

struct BatchPass {
    grads: BatchGrads,
    fec_caches: Vec<Vec<LayerCache>>,
    odm_caches: Vec<LayerCache>,
}

fn head_frame(view: &View, k: usize, grid: &GridSpec) -> GridFrame {
    GridFrame {
        extent: view.extent,
        k,
        mpp: grid.meters_per_px(),
    }
}

fn losses(
    outputs: &[Tensor],
    batch: &[&TrainSample],
    anchors: &[Anchor],
    lambda: &LossWeights,
    k: usize,
    grid: &GridSpec,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let n = batch.len() as f64;
    let per: Vec<(f64, Tensor)> = outputs
        .par_iter()
        .zip(batch.par_iter())
        .map(|(out, s)| {
            let mut l = loss(
                out,
                &s.truths,
                anchors,
                &head_frame(&s.ego, k, grid),
                lambda,
            )?;
            l.grad.data_mut().iter_mut().for_each(|g| *g /= n);
            Ok((l.value, l.grad))
        })
        .collect::<Result<_, DetectorError>>()?;
    let total = per.iter().map(|p| p.0).sum::<f64>() / n;
    Ok((total, per.into_iter().map(|p| p.1).collect()))
}

fn svt_pass(
    net: &Network,
    batch: &[&TrainSample],
    anchors: &[Anchor],
    lambda: &LossWeights,
    grid: &GridSpec,
) -> Result<BatchPass, TrainError> {
    let k = net.downsampling();
    let xs: Vec<Tensor> = batch.iter().map(|s| s.ego.tensor()).collect();
    let pass = net.forward_train(&xs)?;
    let (value, upstream) = losses(&pass.outputs, batch, anchors, lambda, k, grid)?;
    let (dfeat, odm) = net.odm.backward(&pass.odm_caches, upstream)?;
    let (_, fec_ego) = net.fec.backward(&pass.fec_caches, dfeat)?;
    Ok(BatchPass {
        grads: BatchGrads {
            loss: value,
            odm,
            fec_ego,
            fec_coop: None,
        },
        fec_caches: vec![pass.fec_caches],
        odm_caches: pass.odm_caches,
    })
}

fn cvt_pass(
    net: &Network,
    batch: &[&TrainSample],
    anchors: &[Anchor],
    lambda: &LossWeights,
    mode: AggregationMode,
    grid: &GridSpec,
) -> Result<BatchPass, TrainError> {
    let k = net.downsampling();
    let ego_x: Vec<Tensor> = batch.iter().map(|s| s.ego.tensor()).collect();
    let coop_x: Vec<Tensor> = batch
        .iter()
        .map(|s| s.coop.as_ref().map(View::tensor))
        .collect::<Option<_>>()
        .ok_or(TrainError::Unpaired(0))?;
    // the same extractor for both branches; each branch keeps its own batch statistics
    let fec = &net.fec;
    let (ego_f, ego_caches) = fec.forward(&ego_x, Mode::Train)?;
    let (coop_f, coop_caches) = fec.forward(&coop_x, Mode::Train)?;

    struct Fused {
        grids: Vec<FeatureGrid>,
        canvas: crate::align::Canvas,
        routes: crate::aggregate::Routes,
        fused: Tensor,
    }
    let fused: Vec<Fused> = batch
        .par_iter()
        .zip(ego_f.into_par_iter().zip(coop_f.into_par_iter()))
        .map(|(s, (ef, cf))| {
            let coop = s.coop.as_ref().expect("checked above");
            let grids = vec![
                FeatureGrid::from_aligned(ef, &s.ego.extent, k, s.ego.source)?,
                FeatureGrid::from_aligned(cf, &coop.extent, k, coop.source)?,
            ];
            let canvas = place_on_canvas(&grids)?;
            let (agg, routes) = aggregate_with_routes(&grids, &canvas, mode)?;
            let fused = agg.crop(&grids[0].extent).tensor;
            Ok(Fused {
                grids,
                canvas,
                routes,
                fused,
            })
        })
        .collect::<Result<_, TrainError>>()?;

    let inputs: Vec<Tensor> = fused.iter().map(|f| f.fused.clone()).collect();
    let (outputs, odm_caches) = net.odm.forward(&inputs, Mode::Train)?;
    let (value, upstream) = losses(&outputs, batch, anchors, lambda, k, grid)?;
    let (dfused, odm) = net.odm.backward(&odm_caches, upstream)?;

    let branch_grads: Vec<(Tensor, Tensor)> = fused
        .par_iter()
        .zip(dfused.into_par_iter())
        .map(|(f, d)| {
            // undo the crop: the ego grid sits inside the canvas
            let ce = &f.canvas.extent;
            let ge = &f.grids[0].extent;
            let (row0, col0) = ((ce.y1 - ge.y1) as usize, (ge.x0 - ce.x0) as usize);
            let mut dcanvas = Tensor::zeros(ce.height(), ce.width(), f.canvas.channels);
            for r in 0..d.h() {
                for c in 0..d.w() {
                    dcanvas
                        .pixel_mut(row0 + r, col0 + c)
                        .copy_from_slice(d.pixel(r, c));
                }
            }
            let mut g = aggregate_backward(&f.grids, &f.canvas, &f.routes, &dcanvas);
            let coop = g.pop().expect("two grids");
            let ego = g.pop().expect("two grids");
            (ego, coop)
        })
        .collect();
    let (d_ego, d_coop): (Vec<Tensor>, Vec<Tensor>) = branch_grads.into_iter().unzip();
    let (_, fec_ego) = fec.backward(&ego_caches, d_ego)?;
    let (_, fec_coop) = fec.backward(&coop_caches, d_coop)?;
    Ok(BatchPass {
        grads: BatchGrads {
            loss: value,
            odm,
            fec_ego,
            fec_coop: Some(fec_coop),
        },
        fec_caches: vec![ego_caches, coop_caches],
        odm_caches,
    })
}

/// Mean loss and gradients of one batch. Samples with a coop view are
/// trained cooperatively with `mode`; a batch must not mix the two kinds.
pub fn batch_gradients(
    net: &Network,
    batch: &[&TrainSample],
    anchors: &[Anchor],
    lambda: &LossWeights,
    mode: AggregationMode,
    grid: &GridSpec,
) -> Result<BatchGrads, TrainError> {
    Ok(run_pass(net, batch, anchors, lambda, mode, grid)?.grads)
}

fn run_pass(
    net: &Network,
    batch: &[&TrainSample],
    anchors: &[Anchor],
    lambda: &LossWeights,
    mode: AggregationMode,
    grid: &GridSpec,
) -> Result<BatchPass, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let paired = batch[0].coop.is_some();
    if let Some(i) = batch.iter().position(|s| s.coop.is_some() != paired) {
        return Err(TrainError::Unpaired(i));
    }
    if paired {
        cvt_pass(net, batch, anchors, lambda, mode, grid)
    } else {
        svt_pass(net, batch, anchors, lambda, grid)
    }
}

fn sgd_update(
    seq: &mut crate::nn::Sequential,
    grads: &SeqGrads,
    velocity: &mut SeqGrads,
    lr: f64,
    momentum: f64,
) {
    for ((layer, g), v) in seq
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(velocity.layers.iter_mut())
    {
        for ((p, gp), vp) in layer.params_mut().into_iter().zip(g).zip(v.iter_mut()) {
            for ((x, gx), vx) in p.iter_mut().zip(gp).zip(vp.iter_mut()) {
                *vx = momentum * *vx + gx;
                *x -= lr * *vx;
            }
        }
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub net: Network,
    /// `(step, mean batch loss)` for every optimizer step.
    pub losses: Vec<(usize, f64)>,
    pub state: TrainState,
}

fn train_state(epoch: usize, r: &rng::Rng) -> TrainState {
    TrainState {
        epoch: epoch as u32,
        rng_seed: r.get_seed(),
        rng_stream: r.get_stream(),
        rng_word_pos: r.get_word_pos(),
    }
}

/// Mini-batch SGD with momentum. `on_epoch` sees the network and the
/// resumable state after every epoch.
pub fn train(
    mut net: Network,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    anchors: &[Anchor],
    grid: &GridSpec,
    seed: u64,
    mut on_epoch: impl FnMut(&Network, &TrainState),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let k = net.downsampling();
    if grid.resolution_px % k != 0 {
        return Err(TrainError::Resolution {
            resolution: grid.resolution_px,
            k,
        });
    }
    let mut shuffle = rng::stream(seed, rng::SHUFFLE, 0);
    let mut v_fec = SeqGrads::zeros_like(&net.fec);
    let mut v_odm = SeqGrads::zeros_like(&net.odm);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0;
    let mut state = train_state(0, &shuffle);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let pass = run_pass(&net, &batch, anchors, &cfg.loss, cfg.aggregation, grid)?;
            let loss = pass.grads.loss;
            if !loss.is_finite() || loss > 1e6 {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            let fec_grads = pass.grads.fec();
            sgd_update(&mut net.fec, &fec_grads, &mut v_fec, lr, cfg.momentum);
            sgd_update(&mut net.odm, &pass.grads.odm, &mut v_odm, lr, cfg.momentum);
            for caches in &pass.fec_caches {
                net.fec.update_running_stats(caches);
            }
            net.odm.update_running_stats(&pass.odm_caches);
            losses.push((step, loss));
            step += 1;
        }
        state = train_state(epoch + 1, &shuffle);
        on_epoch(&net, &state);
    }
    Ok(TrainOutcome { net, losses, state })
}

pub fn loss_curve_csv(losses: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, l) in losses {
        s.push_str(&format!("{step},{l}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TruthObject;
    use crate::geometry::OrientedBox;
    use crate::worldgen::{ObjectClass, PointCloud, Pose};

    fn obs(id: u32, x: f64, y: f64) -> Observation {
        let pose = Pose {
            x,
            y,
            heading: 0.0,
            altitude: 1.9,
        };
        Observation {
            vehicle_id: id,
            pose,
            cloud: PointCloud::empty(pose),
        }
    }

    fn truth(id: u32, x: f64, y: f64) -> TruthObject {
        TruthObject {
            id,
            class: ObjectClass::Vehicle,
            bbox: OrientedBox::new(x, y, 4.5, 2.0, 0.0),
        }
    }

    #[test]
    fn unique_pair_and_radius() {
        let f = Frame {
            index: 0,
            truths: vec![truth(0, 0.0, 0.0), truth(1, 30.0, 0.0), truth(2, 15.0, 5.0)],
            observations: vec![obs(0, 0.0, 0.0), obs(1, 30.0, 0.0)],
        };
        let (pairs, skipped) = pair_observations(std::slice::from_ref(&f), 40.0, 1);
        assert_eq!(skipped, 0);
        assert_eq!(
            pairs,
            vec![
                Pairing {
                    frame: 0,
                    ego: 0,
                    coop: 1
                },
                Pairing {
                    frame: 0,
                    ego: 1,
                    coop: 0
                }
            ]
        );

        let far = Frame {
            index: 0,
            truths: vec![truth(0, 0.0, 0.0), truth(1, 50.0, 0.0), truth(2, 25.0, 0.0)],
            observations: vec![obs(0, 0.0, 0.0), obs(1, 50.0, 0.0)],
        };
        let (pairs, skipped) = pair_observations(&[far], 40.0, 1);
        assert!(pairs.is_empty());
        assert_eq!(skipped, 2);
    }

    #[test]
    fn pairing_needs_a_mutual_target() {
        // only the two vehicles themselves are around
        let f = Frame {
            index: 0,
            truths: vec![truth(0, 0.0, 0.0), truth(1, 10.0, 0.0)],
            observations: vec![obs(0, 0.0, 0.0), obs(1, 10.0, 0.0)],
        };
        assert!(eligible_coops(&f, 0, 40.0).is_empty());
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 1.0,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1.0);
        assert_eq!(cfg.learning_rate_at(23), 1.0);
        assert!((cfg.learning_rate_at(24) - 0.1).abs() < 1e-15);
        assert!((cfg.learning_rate_at(34) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn loss_curve_format() {
        assert_eq!(
            loss_curve_csv(&[(0, 1.5), (1, 0.25)]),
            "step,loss\n0,1.5\n1,0.25\n"
        );
    }
}
