mod common;

use common::{bin, ok, run, tree, write_config, TINY};

#[test]
fn gen_twice_writes_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&cfg, &a, &[], &["gen"]));
    ok(&run(&cfg, &b, &[], &["gen"]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.keys().any(|p| p.ends_with("manifest.toml")));
    assert!(ta.len() > 6);
    assert_eq!(ta, tb);
}

#[test]
fn a_bad_value_exits_2_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n\n[grid]\nresolution_px = 30\n");
    let o = run(&cfg, &dir.path().join("out"), &[], &["gen"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err
        .lines()
        .find(|l| l.starts_with("error:"))
        .expect("an error line");
    assert!(line.contains("run.toml:4: grid.resolution_px:"), "{line}");
}

#[test]
fn an_unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepochz = 3\n");
    let o = run(&cfg, &dir.path().join("out"), &[], &["gen"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn a_bad_environment_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .env("COOPSIM_TRAIN__EPOCHS", "many")
        .arg("gen")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("COOPSIM_TRAIN__EPOCHS"));
}

#[test]
fn sweeping_before_training_exits_3_and_names_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    for cmd in ["sweep-noise", "sweep-scale", "bandwidth", "eval"] {
        let o = run(&cfg, &out, &[], &[cmd]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(
            err.contains(&out.join("weights").display().to_string()),
            "{err}"
        );
        assert!(err.contains(".cpnn"), "{err}");
    }
}

#[test]
fn defaults_parse_back_as_a_config() {
    let o = bin().arg("defaults").output().unwrap();
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[train.loss]"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &text);
    // a parseable config with every key spelled out
    let o = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("selftest")
        .arg("--help")
        .output()
        .unwrap();
    ok(&o);
    assert!(
        coopsim::config::load_config(&cfg, Vec::new()).unwrap() == coopsim::RunConfig::default()
    );
}

#[test]
fn quick_selftest_passes() {
    let o = bin().args(["selftest", "--quick"]).output().unwrap();
    ok(&o);
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(
        out.lines().filter(|l| l.starts_with("PASS ")).count(),
        9,
        "{out}"
    );
}

#[test]
fn the_full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    for cmd in [
        &["gen"][..],
        &["train"],
        &["eval", "--noise", "0.4"],
        &["sweep-noise"],
        &["sweep-scale"],
        &["bandwidth"],
    ] {
        ok(&run(&cfg, &out, &[], cmd));
    }
    for f in [
        "weights/svt.cpnn",
        "weights/cvt-sum.cpnn",
        "weights/cvt-maxout.cpnn",
        "loss/svt.csv",
        "eval.csv",
        "sweep_noise.csv",
        "sweep_noise_vehicle.svg",
        "sweep_scale.csv",
        "sweep_scale_pedestrian.svg",
        "bandwidth.csv",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let noise = std::fs::read_to_string(out.join("sweep_noise.csv")).unwrap();
    assert_eq!(
        noise.lines().next().unwrap(),
        coopsim::evaluation::CSV_HEADER
    );
    // six methods, three magnitudes, two classes
    assert_eq!(noise.lines().count(), 1 + 6 * 3 * 2);
    let scale = std::fs::read_to_string(out.join("sweep_scale.csv")).unwrap();
    assert_eq!(scale.lines().count(), 1 + 6 * 3 * 2);
    let loss = std::fs::read_to_string(out.join("loss/svt.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "step,loss");

    // every coop message is accounted for, and raw clouds dominate
    let bw = std::fs::read_to_string(out.join("bandwidth.csv")).unwrap();
    let payload = |m: &str| -> usize {
        bw.lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{m},")))
            .map(|l| l.split(',').nth(3).unwrap().parse::<usize>().unwrap())
            .sum()
    };
    assert!(payload("ris") > payload("dfs-sum"), "{bw}");
    assert!(payload("dfs-sum") > 0);
}

#[test]
fn retraining_one_checkpoint_leaves_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    ok(&run(&cfg, &out, &[], &["train", "--only", "svt"]));
    assert!(out.join("weights/svt.cpnn").is_file());
    assert!(!out.join("weights/cvt-sum.cpnn").exists());
    let o = run(&cfg, &out, &[], &["train", "--only", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}
