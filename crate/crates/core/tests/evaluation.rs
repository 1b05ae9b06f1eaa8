use coopsim::bev::GridSpec;
use coopsim::cooperation::{run_method, run_single, Method, PipelineConfig};
use coopsim::dataset::{gen_frames, read_dataset, write_dataset, DatasetConfig, Frame};
use coopsim::detector::default_anchors;
use coopsim::evaluation::{
    eligible_frames, noise_grid, sweep_noise, sweep_scale, Contender, EvalConfig, EvalFrame,
    Protocol,
};
use coopsim::nn::{NetConfig, Network};
use coopsim::{AggregationMode, Strategy};

fn world() -> DatasetConfig {
    let mut ds = DatasetConfig::default();
    ds.world.half_extent_m = 30.0;
    ds.world.vehicles = 10;
    ds.world.lidar_vehicles = 6;
    ds.world.pedestrians = 4;
    ds.observers = 5;
    ds
}

fn frames() -> Vec<Frame> {
    gen_frames(&world(), 17, 0..3).unwrap()
}

fn protocol() -> Protocol {
    Protocol {
        grid: GridSpec::new(32, 8.0),
        anchors: default_anchors(),
        cfg: EvalConfig::default(),
        seed: 3,
    }
}

fn methods() -> Vec<Method> {
    vec![
        Method::Single,
        Method::Ris,
        Method::Dfs {
            mode: AggregationMode::Sum,
            tma: true,
        },
        Method::Dfs {
            mode: AggregationMode::MaxNorm,
            tma: false,
        },
        Method::Hsm,
    ]
}

#[test]
fn noise_grid_covers_zero_to_max_inclusive() {
    assert_eq!(
        noise_grid(2.4, 0.4),
        vec![0.0, 0.4, 0.8, 1.2, 1.6, 2.0, 2.4]
    );
    assert_eq!(noise_grid(0.0, 0.4), vec![0.0]);
}

#[test]
fn with_no_coops_every_method_reduces_to_single_vehicle() {
    let net = Network::build(&NetConfig::compact(), 2).unwrap();
    let frames = frames();
    let p = protocol();
    let contenders: Vec<Contender> = methods()
        .into_iter()
        .map(|method| Contender {
            method,
            strategy: Strategy::Svt,
            net: &net,
        })
        .collect();
    let res = sweep_scale(&contenders, &frames, &[0], 0.0, &p).unwrap();
    let single: Vec<_> = res.rows.iter().filter(|r| r.method == "single").collect();
    for r in &res.rows {
        let s = single.iter().find(|s| s.class == r.class).unwrap();
        assert_eq!(
            (r.ap, r.precision, r.recall),
            (s.ap, s.precision, s.recall),
            "{}",
            r.method
        );
    }
}

#[test]
fn zero_noise_row_equals_a_clean_evaluation() {
    let net = Network::build(&NetConfig::compact(), 2).unwrap();
    let frames = frames();
    let p = protocol();
    let contenders: Vec<Contender> = methods()
        .into_iter()
        .map(|method| Contender {
            method,
            strategy: Strategy::Svt,
            net: &net,
        })
        .collect();
    let noisy = sweep_noise(&contenders, &frames, &noise_grid(0.8, 0.4), 1, &p).unwrap();
    let clean = sweep_scale(&contenders, &frames, &[1], 0.0, &p).unwrap();
    for r in &clean.rows {
        let n = noisy.find(&r.method, r.strategy, 0.0, 1, r.class).unwrap();
        assert_eq!(n, r);
    }
}

#[test]
fn late_fusion_hypotheses_add_up_over_participants() {
    let net = Network::build(&NetConfig::compact(), 2).unwrap();
    let frames = frames();
    let p = protocol();
    let (eval, _) = eligible_frames(&frames, &p.grid, &p.cfg, 4);
    assert!(!eval.is_empty());
    let pipe = PipelineConfig::new(p.grid, p.anchors.clone(), 0.05);
    for f in &eval {
        let coops = f.participants(4, 0.0, 1);
        let out = run_method(Method::Hsm, &f.ego, &coops, &net, &pipe, f.frame.index).unwrap();
        let per: Vec<usize> = std::iter::once(&f.ego)
            .chain(&coops)
            .map(|q| run_single(q, &net, &pipe).unwrap().hypotheses)
            .collect();
        assert_eq!(out.hypotheses, per.iter().sum::<usize>());
        if per.iter().all(|&h| h == per[0]) {
            assert_eq!(out.hypotheses, 5 * per[0]);
        }
        assert_eq!(out.sent.len(), 4);
    }
}

#[test]
fn coops_are_nearest_first_and_ego_truths_are_excluded() {
    let frames = frames();
    let p = protocol();
    for f in &frames {
        let e = EvalFrame::new(f, &p.grid, p.cfg.coop_radius_m).unwrap();
        let d: Vec<f64> = e
            .coops
            .iter()
            .map(|o| (o.pose.x - e.ego.pose.x).hypot(o.pose.y - e.ego.pose.y))
            .collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1] + 1e-9));
        assert!(d.iter().all(|&x| x <= p.cfg.coop_radius_m));
        let own = f.truths.iter().find(|t| t.id == e.ego.id).unwrap();
        assert!(!e.truths.iter().any(|t| t.bbox == own.bbox));
    }
}

#[test]
fn datasets_are_deterministic_and_survive_disk() {
    let a = frames();
    assert_eq!(a, frames());
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &a).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), a.len());
    for (x, y) in a.iter().zip(&back) {
        assert_eq!(x.index, y.index);
        assert_eq!(x.observations.len(), y.observations.len());
        for (o, q) in x.observations.iter().zip(&y.observations) {
            assert_eq!(o.cloud.points, q.cloud.points);
            assert_eq!(o.vehicle_id, q.vehicle_id);
        }
    }
    // a different seed gives a different world
    assert_ne!(gen_frames(&world(), 18, 0..1).unwrap()[0], a[0]);
}
