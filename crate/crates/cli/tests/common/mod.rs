#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A few small frames and a 32 px grid: every command finishes in seconds.
pub const TINY: &str = r#"
seed = 5

[dataset]
observers = 4

[dataset.world]
half_extent_m = 30.0
vehicles = 10
lidar_vehicles = 6
pedestrians = 4
occluders = 2

[frames]
train = 3
test = 3

[grid]
resolution_px = 32
half_range_m = 8.0

[train]
epochs = 2
batch_size = 4

[sweep]
methods = ["single:svt", "ris:svt", "dfs-sum:svt", "dfs-sum:cvt", "dfs-maxout-notma:cvt", "hsm:svt"]
noise_max_m = 0.8
scale_max_coops = 2

[bandwidth]
frames = 2
"#;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coopsim"));
    for (k, _) in std::env::vars() {
        if k.starts_with("COOPSIM_") {
            c.env_remove(k);
        }
    }
    c
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// `coopsim --config cfg --out out [extra...] args...`
pub fn run(cfg: &Path, out: &Path, extra: &[&str], args: &[&str]) -> Output {
    bin()
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .args(args)
        .output()
        .unwrap()
}

pub fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
