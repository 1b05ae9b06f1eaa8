use coopsim::aggregate::AggregationMode;
use coopsim::bev::{GridSpec, PixelExtent};
use coopsim::dataset::{gen_frames, DatasetConfig};
use coopsim::detector::{default_anchors, GroundTruth, LossWeights};
use coopsim::geometry::OrientedBox;
use coopsim::nn::{NetConfig, Network, SeqGrads};
use coopsim::training::{
    batch_gradients, cvt_samples, pair_observations, train, TrainConfig, TrainSample, View,
};
use coopsim::worldgen::ObjectClass;
use rand::{Rng, SeedableRng};

// 16 px at 0.5 m: small enough for exhaustive finite differences
fn grid() -> GridSpec {
    GridSpec::new(16, 4.0)
}

fn random_view(extent: PixelExtent, source: u32, seed: u64) -> View {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = View::blank(extent, source);
    for c in v.counts.iter_mut() {
        *c = if r.random_bool(0.25) {
            r.random_range(1..=16)
        } else {
            0
        };
    }
    v
}

fn truths() -> Vec<GroundTruth> {
    vec![
        GroundTruth {
            bbox: OrientedBox::new(2.7, 5.1, 4.5, 2.0, 0.2),
            class: ObjectClass::Vehicle,
        },
        GroundTruth {
            bbox: OrientedBox::new(6.1, 1.4, 0.6, 0.6, 0.0),
            class: ObjectClass::Pedestrian,
        },
    ]
}

fn ego_extent() -> PixelExtent {
    PixelExtent::new(0, 0, 16, 16)
}

fn sample(coop: Option<View>, seed: u64) -> TrainSample {
    TrainSample {
        ego: random_view(ego_extent(), 1, seed),
        coop,
        truths: truths(),
    }
}

fn net() -> Network {
    Network::build(&NetConfig::compact(), 5).unwrap()
}

fn assert_grads_eq(a: &SeqGrads, b: &SeqGrads) {
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (pa, pb) in la.iter().zip(lb) {
            for (x, y) in pa.iter().zip(pb) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }
}

#[test]
fn zero_coop_under_sum_matches_single_vehicle_training() {
    // a fresh extractor maps an empty view to zero features (zero biases and
    // BN shifts), so fusing it by sum leaves the ego features unchanged
    let net = net();
    let svt = vec![sample(None, 1), sample(None, 2)];
    let cvt: Vec<TrainSample> = svt
        .iter()
        .map(|s| TrainSample {
            coop: Some(View::blank(PixelExtent::new(4, -8, 20, 8), 2)),
            ..s.clone()
        })
        .collect();
    let (a, l) = (default_anchors(), LossWeights::default());
    let g_svt = batch_gradients(
        &net,
        &svt.iter().collect::<Vec<_>>(),
        &a,
        &l,
        AggregationMode::Sum,
        &grid(),
    )
    .unwrap();
    let g_cvt = batch_gradients(
        &net,
        &cvt.iter().collect::<Vec<_>>(),
        &a,
        &l,
        AggregationMode::Sum,
        &grid(),
    )
    .unwrap();
    assert!((g_svt.loss - g_cvt.loss).abs() <= 1e-12 * g_svt.loss.abs());
    assert_grads_eq(&g_svt.odm, &g_cvt.odm);
    assert_grads_eq(&g_svt.fec_ego, &g_cvt.fec_ego);
}

fn batch_loss(net: &Network, batch: &[TrainSample], mode: AggregationMode) -> f64 {
    let refs: Vec<&TrainSample> = batch.iter().collect();
    batch_gradients(
        net,
        &refs,
        &default_anchors(),
        &LossWeights::default(),
        mode,
        &grid(),
    )
    .unwrap()
    .loss
}

/// Central differences of the shared extractor weights through fusion.
/// Entries whose two step sizes disagree straddle a kink (ReLU, pool or a
/// max-route switch) and are skipped.
fn check_cvt_fd(mode: AggregationMode) {
    let net = net();
    let batch = vec![
        sample(Some(random_view(PixelExtent::new(4, -8, 20, 8), 2, 11)), 3),
        sample(Some(random_view(PixelExtent::new(-8, 4, 8, 20), 3, 12)), 4),
    ];
    let refs: Vec<&TrainSample> = batch.iter().collect();
    let g = batch_gradients(
        &net,
        &refs,
        &default_anchors(),
        &LossWeights::default(),
        mode,
        &grid(),
    )
    .unwrap();
    assert!(g.fec_coop.is_some());
    let total = g.fec();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let (mut checked, mut skipped) = (0, 0);
    for (li, layer) in net.fec.layers.iter().enumerate() {
        for (pi, values) in layer.params().iter().enumerate() {
            for _ in 0..6 {
                let j = r.random_range(0..values.len());
                let fd = |h: f64| {
                    let mut p = net.clone();
                    p.fec.layers[li].params_mut()[pi][j] += h;
                    let lp = batch_loss(&p, &batch, mode);
                    p.fec.layers[li].params_mut()[pi][j] -= 2.0 * h;
                    let lm = batch_loss(&p, &batch, mode);
                    (lp - lm) / (2.0 * h)
                };
                let (a, b) = (fd(1e-4), fd(5e-5));
                let scale = a.abs().max(b.abs()).max(1e-6);
                if (a - b).abs() / scale > 1e-5 {
                    skipped += 1;
                    continue;
                }
                let analytic = total.layers[li][pi][j];
                let rel = (analytic - a).abs() / analytic.abs().max(a.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{mode:?} layer {li} param {pi}[{j}]: analytic {analytic} numeric {a}"
                );
                checked += 1;
            }
        }
    }
    assert!(
        checked >= 2 * skipped,
        "{mode:?}: {checked} checked, {skipped} skipped"
    );
}

#[test]
fn cvt_gradients_through_sum_match_finite_differences() {
    check_cvt_fd(AggregationMode::Sum);
}

#[test]
fn cvt_gradients_through_maxout_match_finite_differences() {
    check_cvt_fd(AggregationMode::MaxOut);
}

#[test]
fn cvt_gradients_through_maxnorm_match_finite_differences() {
    check_cvt_fd(AggregationMode::MaxNorm);
}

#[test]
fn one_small_step_lowers_the_loss() {
    for coop in [
        None,
        Some(random_view(PixelExtent::new(4, -8, 20, 8), 2, 21)),
    ] {
        let batch = vec![sample(coop, 7)];
        let net = net();
        let refs: Vec<&TrainSample> = batch.iter().collect();
        let g = batch_gradients(
            &net,
            &refs,
            &default_anchors(),
            &LossWeights::default(),
            AggregationMode::Sum,
            &grid(),
        )
        .unwrap();
        let (fec, odm) = (g.fec(), g.odm.clone());
        for eps in [1e-4, 1e-5] {
            let mut stepped = net.clone();
            for (seq, grads) in [(&mut stepped.fec, &fec), (&mut stepped.odm, &odm)] {
                for (layer, gl) in seq.layers.iter_mut().zip(&grads.layers) {
                    for (p, gp) in layer.params_mut().into_iter().zip(gl) {
                        for (x, gx) in p.iter_mut().zip(gp) {
                            *x -= eps * gx;
                        }
                    }
                }
            }
            let after = batch_loss(&stepped, &batch, AggregationMode::Sum);
            assert!(after < g.loss, "eps {eps}: {} -> {after}", g.loss);
        }
    }
}

fn tiny_run(jobs: usize) -> (Network, Vec<(usize, f64)>) {
    let mut ds = DatasetConfig::default();
    ds.world.half_extent_m = 30.0;
    ds.world.vehicles = 10;
    ds.world.lidar_vehicles = 8;
    ds.world.pedestrians = 4;
    ds.observers = 3;
    let spec = GridSpec::new(32, 8.0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .unwrap();
    pool.install(|| {
        let frames = gen_frames(&ds, 4, 0..2).unwrap();
        let (pairs, _) = pair_observations(&frames, 40.0, 4);
        assert!(!pairs.is_empty());
        let mut samples = cvt_samples(&frames, &pairs, &spec, 4, 1);
        samples.truncate(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(
            net(),
            &samples,
            &cfg,
            &default_anchors(),
            &spec,
            4,
            |_, _| {},
        )
        .unwrap();
        (out.net, out.losses)
    })
}

#[test]
fn training_is_bit_reproducible_across_pool_sizes() {
    let (a, la) = tiny_run(1);
    let (b, lb) = tiny_run(3);
    assert_eq!(la, lb);
    assert_eq!(
        coopsim::nn::io::encode_network(&a, None),
        coopsim::nn::io::encode_network(&b, None)
    );
    assert!(la.iter().all(|(_, l)| l.is_finite()));
}
