//! Run configuration: one TOML file with a section per component.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected. Errors carry the line of the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregationMode;
use crate::bev::GridSpec;
use crate::cooperation::Method;
use crate::dataset::DatasetConfig;
use crate::detector::{default_anchors, Anchor};
use crate::evaluation::EvalConfig;
use crate::nn::NetConfig;
use crate::training::{Strategy, TrainConfig};

/// Prefix of environment variables that override config keys, as in
/// `COOPSIM_TRAIN__EPOCHS=5` for `[train] epochs = 5`.
pub const ENV_PREFIX: &str = "COOPSIM_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}:{line}: {key}: {message}")]
    Invalid {
        path: String,
        line: usize,
        key: String,
        message: String,
    },
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FramesConfig {
    pub train: u32,
    pub test: u32,
}

impl Default for FramesConfig {
    fn default() -> Self {
        Self {
            train: 200,
            test: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Entries `method:strategy`, e.g. `dfs-sum:cvt` or `hsm:svt`.
    pub methods: Vec<String>,
    pub noise_max_m: f64,
    pub noise_step_m: f64,
    /// Coops taking part in the noise sweep.
    pub noise_coops: usize,
    pub scale_max_coops: usize,
    /// GPS error on the coops during the scale sweep.
    pub scale_noise_m: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: [
                "single:svt",
                "ris:svt",
                "dfs-sum:svt",
                "dfs-sum:cvt",
                "dfs-maxnorm:cvt",
                "hsm:svt",
            ]
            .map(String::from)
            .to_vec(),
            noise_max_m: 2.4,
            noise_step_m: 0.4,
            noise_coops: 1,
            scale_max_coops: 6,
            scale_noise_m: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthConfig {
    /// Test frames measured by the `bandwidth` command.
    pub frames: u32,
    /// Feature channels a DFS sender keeps; empty keeps all.
    pub keep_channels: Vec<usize>,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            frames: 10,
            keep_channels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    /// All artifacts go below this directory.
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub frames: FramesConfig,
    pub grid: GridSpec,
    pub net: NetConfig,
    pub anchors: Vec<Anchor>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub bandwidth: BandwidthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            frames: FramesConfig::default(),
            grid: GridSpec::new(128, 32.0),
            net: NetConfig::default(),
            anchors: default_anchors(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            bandwidth: BandwidthConfig::default(),
        }
    }
}

/// A sweep entry: which pipeline, and which trained weights it runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MethodEntry {
    pub method: Method,
    pub strategy: Strategy,
}

impl MethodEntry {
    pub fn parse(s: &str) -> Option<MethodEntry> {
        let (m, st) = s.split_once(':')?;
        Some(MethodEntry {
            method: Method::parse(m.trim())?,
            strategy: Strategy::parse(st.trim())?,
        })
    }

    /// Weights this entry runs: CVT weights are trained per aggregation mode.
    pub fn checkpoint(&self, default_mode: AggregationMode) -> Checkpoint {
        match self.strategy {
            Strategy::Svt => Checkpoint {
                strategy: Strategy::Svt,
                aggregation: None,
            },
            Strategy::Cvt => Checkpoint {
                strategy: Strategy::Cvt,
                aggregation: Some(self.method.aggregation().unwrap_or(default_mode)),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub strategy: Strategy,
    pub aggregation: Option<AggregationMode>,
}

impl Checkpoint {
    pub fn name(&self) -> String {
        match self.aggregation {
            Some(a) => format!("{}-{}", self.strategy.name(), a.name()),
            None => self.strategy.name().to_string(),
        }
    }
}

impl RunConfig {
    pub fn methods(&self) -> Vec<MethodEntry> {
        self.sweep
            .methods
            .iter()
            .filter_map(|m| MethodEntry::parse(m))
            .collect()
    }

    /// Distinct checkpoints the configured sweeps need, in first-use order.
    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        let mut out: Vec<Checkpoint> = Vec::new();
        for m in self.methods() {
            let c = m.checkpoint(self.train.aggregation);
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Semantic checks; returns the dotted key at fault and a message.
    pub fn check(&self) -> Result<(), (String, String)> {
        let err = |k: &str, m: String| Err((k.to_string(), m));
        if self.grid.resolution_px == 0 || !(self.grid.half_range_m > 0.0) {
            return err(
                "grid.resolution_px",
                "grid must have a positive size and range".into(),
            );
        }
        let k = self.net.downsampling();
        if self.grid.resolution_px % k != 0 {
            return err(
                "grid.resolution_px",
                format!("{} is not divisible by K={k}", self.grid.resolution_px),
            );
        }
        if self.net.width_divisor == 0 {
            return err("net.width_divisor", "must be positive".into());
        }
        if self.anchors.is_empty() || self.anchors.len() != crate::nn::ANCHORS {
            return err(
                "anchors",
                format!("exactly {} anchors are required", crate::nn::ANCHORS),
            );
        }
        if let Err(e) = self.dataset.world.validate() {
            return err("dataset.world", e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return err("train", e.to_string());
        }
        for m in &self.sweep.methods {
            if MethodEntry::parse(m).is_none() {
                return err(
                    "sweep.methods",
                    format!("cannot parse {m:?}; expected method:strategy such as dfs-sum:cvt"),
                );
            }
        }
        if !(self.sweep.noise_step_m > 0.0) || self.sweep.noise_max_m < 0.0 {
            return err(
                "sweep.noise_step_m",
                "noise grid needs a positive step and a non-negative maximum".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.eval.conf_threshold)
            || !(0.0..=1.0).contains(&self.eval.score_floor)
        {
            return err(
                "eval.conf_threshold",
                "thresholds must lie in [0, 1]".into(),
            );
        }
        if self.dataset.observers == 0 {
            return err("dataset.observers", "at least the ego must observe".into());
        }
        Ok(())
    }
}

/// Line (1-based) of `key = ...` for a dotted key, searched inside its section.
fn key_line(text: &str, dotted: &str) -> usize {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let leaf = parts.pop().unwrap_or(dotted);
    let section = parts.join(".");
    let mut current = String::new();
    let mut section_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim_matches(['[', ']']).trim().to_string();
            if current == dotted {
                return i + 1;
            }
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        if current == section && line.split_once('=').is_some_and(|(k, _)| k.trim() == leaf) {
            return i + 1;
        }
    }
    section_line.unwrap_or(1)
}

/// Applies `COOPSIM_SECTION__KEY=value` overrides to a parsed document.
/// The value is read as a TOML value, or as a string when it is not one.
pub fn apply_env_overrides(
    doc: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    const FLAGS: [&str; 4] = ["CONFIG", "SEED", "JOBS", "OUT"];
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (var, raw) in vars {
        let name = &var[ENV_PREFIX.len()..];
        // these are command-line flag defaults, handled by the CLI
        if FLAGS.contains(&name) {
            continue;
        }
        let path: Vec<String> = name.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::Env {
                var,
                message: "empty key segment".into(),
            });
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw.clone()));
        let mut table = &mut *doc;
        for seg in &path[..path.len() - 1] {
            let entry = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| ConfigError::Env {
                var: var.clone(),
                message: format!("{seg} is not a section"),
            })?;
        }
        table.insert(path[path.len() - 1].clone(), value);
        // checked one at a time so the error names the variable at fault
        RunConfig::deserialize(doc.clone()).map_err(|e| ConfigError::Env {
            var: var.clone(),
            message: e.to_string().trim_end().to_string(),
        })?;
    }
    Ok(())
}

/// Parses and validates a config document. `origin` names it in errors.
pub fn parse_config(
    text: &str,
    origin: &str,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig, ConfigError> {
    let parse_err = |e: toml::de::Error| ConfigError::Parse {
        path: origin.to_string(),
        message: e.to_string().trim_end().to_string(),
    };
    // straight from the text first, so type errors and unknown keys come with line and column
    toml::from_str::<RunConfig>(text).map_err(parse_err)?;
    let mut doc: toml::Table = text.parse().map_err(parse_err)?;
    apply_env_overrides(&mut doc, env)?;
    let cfg = RunConfig::deserialize(doc).map_err(|e| ConfigError::Env {
        var: ENV_PREFIX.to_string() + "*",
        message: e.to_string(),
    })?;
    cfg.check().map_err(|(key, message)| ConfigError::Invalid {
        path: origin.to_string(),
        line: key_line(text, &key),
        key,
        message,
    })?;
    Ok(cfg)
}

pub fn load_config(
    path: &Path,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, &path.display().to_string(), env)
}

/// The full default configuration as TOML, a reference of every key.
pub fn default_toml() -> String {
    toml::to_string(&RunConfig::default()).expect("config serializes")
}
