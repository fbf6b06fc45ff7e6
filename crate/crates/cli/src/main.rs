use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use ati_core::{
    ablation_csv, best_tradeoff, consolidate, default_taus, full_grid, grid_csv, read_lap_log, replay, run_dynamic_lighting,
    run_experiment, run_frame_routing, run_grid, run_threshold_ablation, train, AtiError, BanditTable, ConfigError, ConsolidatedPolicy,
    ConsolidationRules, ExperimentConfig, InferenceMode, PolicyBundle, RoutingThresholds, RunOutput, SensingMode, PRESETS,
};

#[derive(Parser)]
#[command(name = "ati", version, about = "Closed-loop camera sensing and inference-routing simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Learn a calibration policy; writes policy, table and logs.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one configuration and write its frame and lap logs.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Route every frame through the frame-level gates instead of the lap policy.
        #[arg(long)]
        frame_route: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Sensing × inference comparison table.
    Grid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Skip the l1_l2_inference rows (no policy needed).
        #[arg(long)]
        no_policy_rows: bool,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the local confidence threshold over one recorded run.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Weight of the escalation rate in the trade-off score.
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Auto exposure against the consolidated policy under alternating light.
    Dynamic {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Train on the same scenario first when no policy file is given.
        #[arg(long)]
        train_first: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-route a lap log under new thresholds.
    Replay {
        /// Lap log written by `train` or `eval`.
        log: PathBuf,
        /// Thresholds come from this config's routing section when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "l3_l4_split")]
        inference: InferenceMode,
        #[command(flatten)]
        th: ThresholdArgs,
        /// Also write per-class metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Freeze a bandit table checkpoint into a policy file.
    Consolidate {
        table: PathBuf,
        #[arg(long, default_value = "policy.csv")]
        out: PathBuf,
        #[arg(long)]
        min_visits: Option<u64>,
        #[arg(long)]
        stability_window: Option<usize>,
    },
    /// Print a preset (with overrides applied) as TOML.
    ShowConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: dark_track, dark_motion or alternating.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Laps per object.
    #[arg(long)]
    laps: Option<u64>,
    #[arg(long)]
    sensing: Option<SensingMode>,
    #[arg(long)]
    inference: Option<InferenceMode>,
    #[command(flatten)]
    th: ThresholdArgs,
    /// Override any scalar field, e.g. `--set network.late_prob=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    tau_conf: Option<f64>,
    #[arg(long)]
    tau_valid: Option<f64>,
    #[arg(long)]
    tau_task: Option<f64>,
}

impl ThresholdArgs {
    fn apply(&self, th: &mut RoutingThresholds) {
        if let Some(v) = self.tau_conf {
            th.tau_conf = v;
        }
        if let Some(v) = self.tau_valid {
            th.tau_valid = v;
        }
        if let Some(v) = self.tau_task {
            th.tau_task = v;
        }
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// Consolidated policy file.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Bandit table checkpoint; its greedy actions cover contexts the policy misses.
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Failure tagged with its exit code.
enum Fail {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Config(_) => 1,
            Fail::Data(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Fail::Config(e) | Fail::Data(e) => e,
        }
    }
}

impl From<AtiError> for Fail {
    fn from(e: AtiError) -> Self {
        match e {
            AtiError::Config(_) | AtiError::MissingPolicy(_) => Fail::Config(e.into()),
            _ => Fail::Data(e.into()),
        }
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail::Config(e.into())
    }
}

type CliResult<T = ()> = Result<T, Fail>;

trait DataContext<T> {
    fn data(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> DataContext<T> for Result<T, E> {
    fn data(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| Fail::Data(e.into().context(what())))
    }
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).map_err(Fail::Config)?;
                ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display())).map_err(Fail::Config)?
            }
            (None, Some(name)) => ExperimentConfig::preset(name)
                .ok_or_else(|| Fail::Config(anyhow!("unknown preset `{name}` (expected one of {})", PRESETS.join(", "))))?,
            (None, None) => return Err(Fail::Config(anyhow!("pass --config FILE or --preset NAME"))),
        };
        if let Some(v) = self.seed {
            cfg.run.seed = v;
        }
        if let Some(v) = self.laps {
            cfg.run.laps = v;
        }
        if let Some(v) = self.sensing {
            cfg.run.sensing = v;
        }
        if let Some(v) = self.inference {
            cfg.run.inference = v;
        }
        self.th.apply(&mut cfg.routing);
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| Fail::Config(anyhow!("`--set {kv}`: expected KEY=VALUE")))?;
            cfg.set_field(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl PolicyArgs {
    fn load(&self, cfg: &ExperimentConfig) -> CliResult<Option<PolicyBundle>> {
        let table = match &self.table {
            Some(path) => {
                let file = fs::File::open(path).data(|| format!("opening {}", path.display()))?;
                Some(BanditTable::read_checkpoint(file, cfg.bandit.clone()).data(|| format!("in {}", path.display()))?)
            }
            None => None,
        };
        let policy = match &self.policy {
            Some(path) => {
                let file = fs::File::open(path).data(|| format!("opening {}", path.display()))?;
                ConsolidatedPolicy::read_csv(file).data(|| format!("in {}", path.display()))?
            }
            None if table.is_some() => ConsolidatedPolicy::default(),
            None => return Ok(None),
        };
        Ok(Some(PolicyBundle { policy, table }))
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).data(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).data(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> CliResult
where
    F: FnOnce(&mut Vec<u8>) -> ati_core::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_file(path, &String::from_utf8(buf).expect("writers emit UTF-8"))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => write_file(path, text),
        None => std::io::stdout().write_all(text.as_bytes()).data(|| "writing to stdout".into()),
    }
}

fn write_run(dir: &Path, run: &RunOutput, lap_name: &str) -> CliResult {
    write_file(&dir.join("frames.csv"), &run.frame_csv())?;
    write_file(&dir.join(lap_name), &run.lap_csv())?;
    write_file(&dir.join("per_class.csv"), &run.metrics.per_class_csv())
}

fn execute(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let t = train(&cfg)?;
            write_run(&out, &t.run, "rl_log.csv")?;
            write_with(&out.join("table.csv"), |w| t.table.write_checkpoint(w))?;
            write_with(&out.join("policy.csv"), |w| t.policy.write_csv(w))?;
            println!("{}", t.run.metrics.summary());
            println!("consolidated {} context(s)", t.policy.len());
        }
        Cmd::Eval { cfg, policy, frame_route, out } => {
            let cfg = cfg.load()?;
            let bundle = policy.load(&cfg)?;
            let run = if frame_route { run_frame_routing(&cfg, bundle.as_ref())? } else { run_experiment(&cfg, bundle.as_ref())? };
            write_run(&out, &run, "laps.csv")?;
            println!("{}", run.metrics.summary());
            if let Some(r) = &run.frame_routing {
                println!(
                    "frames={} local={} resample={} deadline_infeasible={} negative_benefit={} escalated={} stale_discarded={} remote_accepted={}",
                    r.frames,
                    r.local_suffices,
                    r.resampled,
                    r.deadline_infeasible,
                    r.negative_benefit,
                    r.escalated,
                    r.stale_discarded,
                    r.remote_accepted
                );
            }
            if run.policy_misses > 0 {
                println!("policy misses: {} frame(s)", run.policy_misses);
            }
        }
        Cmd::Grid { cfg, policy, no_policy_rows, out } => {
            let cfg = cfg.load()?;
            let bundle = policy.load(&cfg)?;
            let modes: Vec<_> = full_grid().into_iter().filter(|(s, _)| !(no_policy_rows && *s == SensingMode::L1L2Inference)).collect();
            let rows = run_grid(&cfg, &modes, bundle.as_ref())?;
            emit(out.as_deref(), &grid_csv(&rows))?;
        }
        Cmd::Ablate { cfg, policy, taus, lambda, out } => {
            let cfg = cfg.load()?;
            let bundle = policy.load(&cfg)?;
            let taus = taus.unwrap_or_else(default_taus);
            if let Some(bad) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Fail::Config(anyhow!("tau {bad} outside [0, 1]")));
            }
            let (rows, _) = run_threshold_ablation(&cfg, &taus, bundle.as_ref())?;
            emit(out.as_deref(), &ablation_csv(&rows))?;
            if let Some(i) = best_tradeoff(&rows, lambda) {
                log::info!("best trade-off at tau_conf={} (lambda={lambda})", rows[i].tau_conf);
            }
        }
        Cmd::Dynamic { cfg, policy, train_first, out } => {
            let cfg = cfg.load()?;
            let bundle = match policy.load(&cfg)? {
                Some(b) => b,
                None if train_first => train(&cfg)?.bundle(),
                None => return Err(AtiError::MissingPolicy("pass --policy FILE or --train-first".into()).into()),
            };
            let report = run_dynamic_lighting(&cfg, &bundle)?;
            write_file(&out.join("summary.csv"), &report.summary_csv())?;
            write_file(&out.join("ae_frames.csv"), &report.ae.frame_csv())?;
            write_file(&out.join("ati_frames.csv"), &report.ati.frame_csv())?;
            print!("{}", report.summary_csv());
        }
        Cmd::Replay { log, config, inference, th, out } => {
            let mut thresholds = match config {
                Some(path) => {
                    let text =
                        fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display())).map_err(Fail::Config)?;
                    ExperimentConfig::from_toml(&text)?.routing
                }
                None => RoutingThresholds::default(),
            };
            th.apply(&mut thresholds);
            thresholds.validate()?;
            let file = fs::File::open(&log).data(|| format!("opening {}", log.display()))?;
            let laps = read_lap_log(file).data(|| format!("in {}", log.display()))?;
            let metrics = replay(&laps, &thresholds, inference);
            println!("{}", metrics.summary());
            if let Some(path) = out {
                write_file(&path, &metrics.per_class_csv())?;
            }
        }
        Cmd::Consolidate { table, out, min_visits, stability_window } => {
            let mut rules = ConsolidationRules::default();
            if let Some(v) = min_visits {
                rules.min_visits = v;
            }
            if let Some(v) = stability_window {
                rules.stability_window = v;
            }
            let file = fs::File::open(&table).data(|| format!("opening {}", table.display()))?;
            let t = BanditTable::read_checkpoint(file, Default::default()).data(|| format!("in {}", table.display()))?;
            let policy = consolidate(&t, &rules);
            write_with(&out, |w| policy.write_csv(w))?;
            println!("consolidated {} context(s)", policy.len());
        }
        Cmd::ShowConfig { cfg } => {
            print!("{}", cfg.load()?.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(fail) => {
            eprintln!("error: {:#}", fail.error());
            ExitCode::from(fail.code())
        }
    }
}
