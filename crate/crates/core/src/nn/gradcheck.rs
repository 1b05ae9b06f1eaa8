//! Central finite-difference checks of the hand-written backward passes.

use rand::Rng as _;

use super::layers::{LayerCache, Mode, NnError, SeqGrads, Sequential};
use super::tensor::Tensor;
use crate::rng;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that gradients that are zero up to roundoff do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    /// Layer index inside the checked stack, `None` for the input gradient.
    pub layer: Option<usize>,
    pub kind: &'static str,
    /// Position in `Layer::params` (0 = weight/gamma, 1 = bias/beta).
    pub param: usize,
    pub checked: usize,
    /// Entries whose perturbation moved an activation across a ReLU kink or
    /// changed a pooling argmax; the function is not differentiable there.
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub entries: Vec<ParamReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Layers with at least one entry above `tol`.
    pub fn failing_layers(&self, tol: f64) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.max_rel_err >= tol)
            .filter_map(|e| e.layer)
            .collect();
        out.dedup();
        out
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < tol)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().map(|e| e.skipped).sum()
    }
}

/// Kink signature of a Train-mode forward: ReLU input signs and pool argmaxes.
fn signature(caches: &[LayerCache]) -> Vec<u32> {
    let mut sig = Vec::new();
    for c in caches {
        match c {
            LayerCache::LeakyRelu { inputs } => sig.extend(
                inputs
                    .iter()
                    .flat_map(|t| t.data().iter().map(|v| u32::from(*v > 0.0))),
            ),
            LayerCache::MaxPool { argmax, .. } => sig.extend(argmax.iter().flatten().copied()),
            _ => {}
        }
    }
    sig
}

struct Objective<'a> {
    weights: &'a [Tensor],
}

impl Objective<'_> {
    fn eval(&self, seq: &Sequential, xs: &[Tensor]) -> Result<(f64, Vec<u32>), NnError> {
        let (out, caches) = seq.forward(xs, Mode::Train)?;
        let l = out
            .iter()
            .zip(self.weights)
            .map(|(o, r)| {
                o.data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        Ok((l, signature(&caches)))
    }
}

pub fn check_gradients(
    seq: &Sequential,
    inputs: &[Tensor],
    eps: f64,
    seed: u64,
) -> Result<GradReport, NnError> {
    check_gradients_with(seq, inputs, eps, seed, |_| {})
}

/// Like [`check_gradients`], with a hook that may alter the analytic
/// gradients before comparison (used to verify that faults are caught).
pub fn check_gradients_with(
    seq: &Sequential,
    inputs: &[Tensor],
    eps: f64,
    seed: u64,
    tamper: impl FnOnce(&mut SeqGrads),
) -> Result<GradReport, NnError> {
    let (out, caches) = seq.forward(inputs, Mode::Train)?;
    let mut r = rng::stream(seed, "gradcheck", 0);
    let weights: Vec<Tensor> = out
        .iter()
        .map(|o| Tensor::from_fn(o.h(), o.w(), o.c(), |_, _, _| r.random_range(-1.0..1.0)))
        .collect();
    let (dx, mut grads) = seq.backward(&caches, weights.clone())?;
    tamper(&mut grads);
    let obj = Objective { weights: &weights };
    let base_sig = signature(&caches);

    let mut entries = Vec::new();
    let mut probe = seq.clone();
    for (li, layer) in seq.layers.iter().enumerate() {
        for (pi, values) in layer.params().iter().enumerate() {
            let mut rep = ParamReport {
                layer: Some(li),
                kind: layer.kind(),
                param: pi,
                checked: 0,
                skipped: 0,
                max_rel_err: 0.0,
            };
            for j in 0..values.len() {
                let orig = values[j];
                probe.layers[li].params_mut()[pi][j] = orig + eps;
                let (lp, sp) = obj.eval(&probe, inputs)?;
                probe.layers[li].params_mut()[pi][j] = orig - eps;
                let (lm, sm) = obj.eval(&probe, inputs)?;
                probe.layers[li].params_mut()[pi][j] = orig;
                if sp != base_sig || sm != base_sig {
                    rep.skipped += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * eps);
                rep.checked += 1;
                rep.max_rel_err = rep
                    .max_rel_err
                    .max(relative_error(grads.layers[li][pi][j], numeric));
            }
            entries.push(rep);
        }
    }

    let mut rep = ParamReport {
        layer: None,
        kind: "input",
        param: 0,
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    let mut xs = inputs.to_vec();
    for s in 0..xs.len() {
        for j in 0..xs[s].data().len() {
            let orig = xs[s].data()[j];
            xs[s].data_mut()[j] = orig + eps;
            let (lp, sp) = obj.eval(seq, &xs)?;
            xs[s].data_mut()[j] = orig - eps;
            let (lm, sm) = obj.eval(seq, &xs)?;
            xs[s].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                rep.skipped += 1;
                continue;
            }
            rep.checked += 1;
            rep.max_rel_err = rep
                .max_rel_err
                .max(relative_error(dx[s].data()[j], (lp - lm) / (2.0 * eps)));
        }
    }
    entries.push(rep);
    Ok(GradReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{BatchNorm, Conv2d, Layer};
    use rand_distr::{Distribution, StandardNormal};

    fn random_conv(k: usize, cin: usize, cout: usize, seed: u64) -> Conv2d {
        let mut r = rng::stream(seed, "test", 0);
        let mut c = Conv2d::zeros(k, cin, cout);
        for w in c.weight.iter_mut().chain(c.bias.iter_mut()) {
            *w = StandardNormal.sample(&mut r);
        }
        c
    }

    fn random_input(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test-input", 0);
        Tensor::from_fn(h, w, c, |_, _, _| StandardNormal.sample(&mut r))
    }

    #[test]
    fn zero_input_bias_grads_match() {
        let mut conv = random_conv(3, 2, 3, 1);
        conv.bias = vec![0.5, -0.7, 1.2];
        let seq = Sequential::new("t", vec![Layer::Conv(conv), Layer::LeakyRelu]);
        let rep = check_gradients(&seq, &[Tensor::zeros(4, 4, 2)], 1e-3, 2).unwrap();
        let bias = rep
            .entries
            .iter()
            .find(|e| e.layer == Some(0) && e.param == 1)
            .unwrap();
        assert_eq!(bias.checked, 3);
        assert!(bias.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn corrupted_conv_gradient_is_flagged() {
        let seq = Sequential::new(
            "t",
            vec![
                Layer::Conv(random_conv(3, 2, 3, 3)),
                Layer::BatchNorm(BatchNorm::new(3)),
                Layer::LeakyRelu,
                Layer::Conv(random_conv(1, 3, 2, 4)),
            ],
        );
        let x = random_input(4, 4, 2, 5);
        let clean = check_gradients(&seq, std::slice::from_ref(&x), 1e-3, 6).unwrap();
        assert!(clean.passes(1e-4), "{clean:?}");
        let bad = check_gradients_with(&seq, std::slice::from_ref(&x), 1e-3, 6, |g| {
            g.layers[3][0][1] += 0.1
        })
        .unwrap();
        assert_eq!(bad.failing_layers(1e-4), vec![3]);
    }
}
