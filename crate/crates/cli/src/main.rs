use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng as _;

use coopsim::config::{self, Checkpoint, ConfigError, MethodEntry, RunConfig};
use coopsim::cooperation::{self, BandwidthReport, Method, PipelineConfig};
use coopsim::dataset::{self, Frame};
use coopsim::evaluation::{self, Contender, EvalFrame, Protocol, SweepResult};
use coopsim::nn::io::{decode_network, encode_network};
use coopsim::nn::Network;
use coopsim::rng;
use coopsim::selftest::{self, Budget};
use coopsim::training::{self, Strategy};

#[derive(Parser)]
#[command(
    name = "coopsim",
    version,
    about = "Cooperative perception simulator: RIS, DFS and HSM over simulated LIDAR"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Without it every key takes its default.
    #[arg(long, global = true, env = "COOPSIM_CONFIG")]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true, env = "COOPSIM_SEED")]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "COOPSIM_JOBS")]
    jobs: Option<usize>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true, env = "COOPSIM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test datasets.
    Gen,
    /// Train the checkpoints the configured methods need.
    Train {
        /// Train only these checkpoints (e.g. `svt`, `cvt-sum`).
        #[arg(long = "only")]
        only: Vec<String>,
    },
    /// Evaluate every configured method once and write eval.csv.
    Eval {
        /// GPS error on the coops, meters.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Number of coops; defaults to `sweep.noise_coops`.
        #[arg(long)]
        coops: Option<usize>,
    },
    /// AP against GPS error magnitude.
    SweepNoise,
    /// AP against the number of cooperating vehicles.
    SweepScale,
    /// Per-message payload sizes of RIS, DFS and HSM on test frames.
    Bandwidth,
    /// Run the property suites.
    Selftest {
        /// Reduced case counts.
        #[arg(long)]
        quick: bool,
    },
    /// Print the default configuration, a reference of every key.
    Defaults,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("missing weights {}: run `coopsim train` first", .0.display())]
    MissingWeights(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Lib(#[from] coopsim::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::MissingWeights(_) => 3,
            _ => 1,
        }
    }
}

macro_rules! lib_err {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Lib(e.into())
            }
        }
    )*};
}
lib_err!(
    coopsim::dataset::DatasetError,
    coopsim::training::TrainError,
    coopsim::evaluation::EvalError,
    coopsim::cooperation::CoopError,
    coopsim::nn::NnError
);

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

struct Ctx {
    cfg: RunConfig,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl Ctx {
    fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    fn dataset_dir(&self, split: Split) -> PathBuf {
        self.out(Path::new("dataset").join(split.name()))
    }

    fn split_seed(&self, split: Split) -> u64 {
        rng::stream(self.cfg.seed, rng::FRAMES, split as u64).random()
    }

    fn split_len(&self, split: Split) -> u32 {
        match split {
            Split::Train => self.cfg.frames.train,
            Split::Test => self.cfg.frames.test,
        }
    }

    /// What a dataset directory was generated from; a mismatch regenerates it.
    fn manifest(&self, split: Split) -> String {
        let world = toml::to_string(&self.cfg.dataset).unwrap_or_default();
        format!(
            "seed = {}\nframes = {}\n\n{world}",
            self.split_seed(split),
            self.split_len(split)
        )
    }

    fn generate(&self, split: Split) -> Result<Vec<Frame>, CliError> {
        let dir = self.dataset_dir(split);
        let t = Instant::now();
        let frames = dataset::gen_frames(
            &self.cfg.dataset,
            self.split_seed(split),
            0..self.split_len(split),
        )?;
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        dataset::write_dataset(&dir, &frames)?;
        write(&dir.join("manifest.toml"), self.manifest(split))?;
        eprintln!(
            "{} frames -> {} ({:.1}s)",
            frames.len(),
            dir.display(),
            t.elapsed().as_secs_f64()
        );
        Ok(frames)
    }

    /// The split from disk, generated first when absent or stale.
    fn frames(&self, split: Split) -> Result<Vec<Frame>, CliError> {
        let dir = self.dataset_dir(split);
        match std::fs::read_to_string(dir.join("manifest.toml")) {
            Ok(m) if m == self.manifest(split) => Ok(dataset::read_dataset(&dir)?),
            _ => self.generate(split),
        }
    }

    fn weights_path(&self, c: &Checkpoint) -> PathBuf {
        self.out(Path::new("weights").join(format!("{}.cpnn", c.name())))
    }

    fn load(&self, c: &Checkpoint) -> Result<Network, CliError> {
        let path = self.weights_path(c);
        let bytes = std::fs::read(&path).map_err(|_| CliError::MissingWeights(path.clone()))?;
        let (net, _) = decode_network(&bytes)
            .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        Ok(net)
    }

    /// Loads every checkpoint the entries need, failing on the first missing one.
    fn load_all(&self, entries: &[MethodEntry]) -> Result<Vec<(Checkpoint, Network)>, CliError> {
        let mut nets: Vec<(Checkpoint, Network)> = Vec::new();
        for e in entries {
            let c = e.checkpoint(self.cfg.train.aggregation);
            if !nets.iter().any(|(k, _)| *k == c) {
                nets.push((c, self.load(&c)?));
            }
        }
        Ok(nets)
    }

    fn protocol(&self) -> Protocol {
        Protocol {
            grid: self.cfg.grid,
            anchors: self.cfg.anchors.clone(),
            cfg: self.cfg.eval.clone(),
            seed: self.cfg.seed,
        }
    }
}

fn contenders<'a>(
    ctx: &Ctx,
    entries: &[MethodEntry],
    nets: &'a [(Checkpoint, Network)],
) -> Vec<Contender<'a>> {
    entries
        .iter()
        .map(|e| {
            let c = e.checkpoint(ctx.cfg.train.aggregation);
            let net = &nets.iter().find(|(k, _)| *k == c).expect("loaded above").1;
            Contender {
                method: e.method,
                strategy: e.strategy,
                net,
            }
        })
        .collect()
}

fn gen(ctx: &Ctx) -> Result<(), CliError> {
    ctx.generate(Split::Train)?;
    ctx.generate(Split::Test)?;
    Ok(())
}

fn train(ctx: &Ctx, only: &[String]) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let mut todo = cfg.checkpoints();
    if todo.is_empty() {
        todo.push(Checkpoint {
            strategy: Strategy::Svt,
            aggregation: None,
        });
    }
    if !only.is_empty() {
        for name in only {
            if !todo.iter().any(|c| &c.name() == name) {
                let known: Vec<String> = todo.iter().map(Checkpoint::name).collect();
                return Err(CliError::Usage(format!(
                    "unknown checkpoint {name:?}; configured: {}",
                    known.join(", ")
                )));
            }
        }
        todo.retain(|c| only.contains(&c.name()));
    }
    let frames = ctx.frames(Split::Train)?;
    let init = Network::build(&cfg.net, cfg.seed)?;
    let k = init.downsampling();
    let min_points = cfg.train.min_truth_points;
    let mut svt = None;
    let mut cvt = None;
    for c in todo {
        let samples = match c.strategy {
            Strategy::Svt => {
                svt.get_or_insert_with(|| training::svt_samples(&frames, &cfg.grid, k, min_points))
            }
            Strategy::Cvt => cvt.get_or_insert_with(|| {
                let (pairs, skipped) =
                    training::pair_observations(&frames, cfg.train.pair_radius_m, cfg.seed);
                if skipped > 0 {
                    eprintln!("{skipped} observations had no eligible partner");
                }
                training::cvt_samples(&frames, &pairs, &cfg.grid, k, min_points)
            }),
        };
        let mut tc = cfg.train.clone();
        if let Some(a) = c.aggregation {
            tc.aggregation = a;
        }
        let name = c.name();
        eprintln!(
            "training {name} on {} samples for {} epochs",
            samples.len(),
            tc.epochs
        );
        let t = Instant::now();
        let outcome = training::train(
            init.clone(),
            samples,
            &tc,
            &cfg.anchors,
            &cfg.grid,
            cfg.seed,
            |_, s| {
                eprintln!(
                    "  {name} epoch {} ({:.0}s)",
                    s.epoch,
                    t.elapsed().as_secs_f64()
                );
            },
        )?;
        write(
            &ctx.weights_path(&c),
            encode_network(&outcome.net, Some(&outcome.state)),
        )?;
        write(
            &ctx.out(Path::new("loss").join(format!("{name}.csv"))),
            training::loss_curve_csv(&outcome.losses),
        )?;
    }
    Ok(())
}

fn report(result: &SweepResult) {
    for r in &result.rows {
        let ap = r.ap.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<18} {:<4} noise {:<4} n {:<2} {:<10} AP {ap:<7} P {:.3} R {:.3}",
            r.method,
            r.strategy.name(),
            r.noise_m,
            r.n_coop,
            r.class.name(),
            r.precision,
            r.recall
        );
    }
    if result.skipped_frames > 0 {
        println!(
            "{} frames skipped for lack of coops, {} used",
            result.skipped_frames, result.frames_used
        );
    }
}

fn eval(ctx: &Ctx, noise: f64, coops: Option<usize>) -> Result<(), CliError> {
    let entries = ctx.cfg.methods();
    let nets = ctx.load_all(&entries)?;
    let frames = ctx.frames(Split::Test)?;
    let n = coops.unwrap_or(ctx.cfg.sweep.noise_coops);
    let result = evaluation::sweep_noise(
        &contenders(ctx, &entries, &nets),
        &frames,
        &[noise],
        n,
        &ctx.protocol(),
    )?;
    write(&ctx.out("eval.csv"), result.to_csv())?;
    report(&result);
    Ok(())
}

fn write_sweep(
    ctx: &Ctx,
    stem: &str,
    result: &SweepResult,
    x_is_noise: bool,
) -> Result<(), CliError> {
    write(&ctx.out(format!("{stem}.csv")), result.to_csv())?;
    for (class, svg) in evaluation::sweep_plots(result, x_is_noise) {
        write(&ctx.out(format!("{stem}_{}.svg", class.name())), svg)?;
    }
    Ok(())
}

fn sweep_noise(ctx: &Ctx) -> Result<(), CliError> {
    let entries = ctx.cfg.methods();
    let nets = ctx.load_all(&entries)?;
    let frames = ctx.frames(Split::Test)?;
    let s = &ctx.cfg.sweep;
    let grid = evaluation::noise_grid(s.noise_max_m, s.noise_step_m);
    let result = evaluation::sweep_noise(
        &contenders(ctx, &entries, &nets),
        &frames,
        &grid,
        s.noise_coops,
        &ctx.protocol(),
    )?;
    write_sweep(ctx, "sweep_noise", &result, true)?;
    report(&result);
    Ok(())
}

fn sweep_scale(ctx: &Ctx) -> Result<(), CliError> {
    let entries = ctx.cfg.methods();
    let nets = ctx.load_all(&entries)?;
    let frames = ctx.frames(Split::Test)?;
    let s = &ctx.cfg.sweep;
    let counts: Vec<usize> = (0..=s.scale_max_coops).collect();
    let result = evaluation::sweep_scale(
        &contenders(ctx, &entries, &nets),
        &frames,
        &counts,
        s.scale_noise_m,
        &ctx.protocol(),
    )?;
    write_sweep(ctx, "sweep_scale", &result, false)?;
    report(&result);
    Ok(())
}

fn bandwidth(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let net = ctx.load(&Checkpoint {
        strategy: Strategy::Svt,
        aggregation: None,
    })?;
    let frames = ctx.frames(Split::Test)?;
    let mut pipe = PipelineConfig::new(cfg.grid, cfg.anchors.clone(), cfg.eval.conf_threshold);
    pipe.nms_iou = cfg.eval.nms_iou;
    if !cfg.bandwidth.keep_channels.is_empty() {
        pipe.keep_channels = Some(cfg.bandwidth.keep_channels.clone());
    }
    let methods = [
        Method::Ris,
        Method::Dfs {
            mode: cfg.train.aggregation,
            tma: true,
        },
        Method::Hsm,
    ];
    let mut rep = BandwidthReport::default();
    for f in frames.iter().take(cfg.bandwidth.frames as usize) {
        let Some(ef) = EvalFrame::new(f, &cfg.grid, cfg.eval.coop_radius_m) else {
            continue;
        };
        let coops = ef.participants(cfg.sweep.noise_coops, 0.0, cfg.seed);
        for m in methods {
            let out = cooperation::run_method(m, &ef.ego, &coops, &net, &pipe, f.index)?;
            rep.push(&m.label(), f.index, &out);
        }
    }
    write(&ctx.out("bandwidth.csv"), rep.to_csv())?;
    for m in rep.methods() {
        let msgs = rep.rows.iter().filter(|r| r.method == m).count().max(1);
        println!(
            "{m:<10} payload {:>10} B  messages {:>10} B  mean payload {:>9} B",
            rep.total_payload(&m),
            rep.total_message(&m),
            rep.total_payload(&m) / msgs
        );
    }
    Ok(())
}

fn run_selftest(seed: u64, quick: bool) -> Result<(), CliError> {
    let budget = if quick {
        Budget {
            nms_sets: 200,
            iou_pairs: 50,
            iou_raster: 500,
            fixel_cases: 1000,
            mc_trials: 20_000,
            wire_cases: 1000,
        }
    } else {
        Budget::FULL
    };
    let checks = selftest::run_all(budget, seed);
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Other(format!(
            "{failed} of {} suites failed",
            checks.len()
        )));
    }
    Ok(())
}

fn load_ctx(g: &Global) -> Result<Ctx, CliError> {
    let env = std::env::vars();
    let mut cfg = match &g.config {
        Some(p) => config::load_config(p, env)?,
        None => config::parse_config("", "<defaults>", env)?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(Ctx { cfg })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(j) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| CliError::Other(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Defaults => {
            print!("{}", config::default_toml());
            Ok(())
        }
        Command::Selftest { quick } => {
            let seed = load_ctx(&cli.global)?.cfg.seed;
            run_selftest(seed, quick)
        }
        cmd => {
            let ctx = load_ctx(&cli.global)?;
            match cmd {
                Command::Gen => gen(&ctx),
                Command::Train { only } => train(&ctx, &only),
                Command::Eval { noise, coops } => eval(&ctx, noise, coops),
                Command::SweepNoise => sweep_noise(&ctx),
                Command::SweepScale => sweep_scale(&ctx),
                Command::Bandwidth => bandwidth(&ctx),
                Command::Selftest { .. } | Command::Defaults => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
