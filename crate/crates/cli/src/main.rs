use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use ckv_core::metrics::{
    compare_runs, label_ground_truth, reports_to_csv, score_run, sweep_to_csv, GroundTruthLabels, MetricsReport,
    SweepCell, DEFAULT_LABEL_FRACTION,
};
use ckv_core::policy::{BudgetMode, PolicyConfig, PolicyKind};
use ckv_core::replay::{run_simulation, RunConfig};
use ckv_core::trace::{generate_synthetic, read_trace, write_trace, write_trace_text, AttentionTrace, SyntheticSpec};
use ckv_core::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "ckv", version, about = "Replay attention traces through KV-cache eviction policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trace and its planted-label sidecar.
    Gen(GenArgs),
    /// Replay one policy and write the run log and metrics report.
    Run(RunArgs),
    /// Replay several policies on the same trace and compare them.
    Compare(CompareArgs),
    /// Sweep lambda and top-p for LRFU.
    Sweep(SweepArgs),
    /// Render flat tables from stored metrics reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    prompt_len: u32,
    #[arg(long, default_value_t = 400)]
    think_len: u32,
    #[arg(long, default_value_t = 40)]
    answer_len: u32,
    #[arg(long, default_value_t = 0.3)]
    crystal_fraction: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().crystal_gap_mean)]
    crystal_gap_mean: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().slip_halflife)]
    slip_halflife: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().crystal_answer_mass)]
    crystal_answer_mass: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().num_layers)]
    layers: u32,
    #[arg(long, default_value_t = SyntheticSpec::default().num_heads)]
    heads: u32,
    #[arg(long, default_value_t = 1.0)]
    heterogeneity: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().spike_weight)]
    spike_weight: f64,
    /// Give crystals the slip-style local attention after they are created.
    #[arg(long)]
    crystal_local: bool,
    /// Write the line-oriented text encoding instead of binary.
    #[arg(long)]
    text: bool,
    /// Trace path; labels go next to it as <stem>.labels.json.
    #[arg(long)]
    out: PathBuf,
}

impl GenArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            prompt_len: self.prompt_len,
            think_len: self.think_len,
            answer_len: self.answer_len,
            crystal_fraction: self.crystal_fraction,
            crystal_gap_mean: self.crystal_gap_mean,
            slip_halflife: self.slip_halflife,
            crystal_answer_mass: self.crystal_answer_mass,
            noise_scale: self.noise_scale,
            num_layers: self.layers,
            num_heads: self.heads,
            heterogeneity: self.heterogeneity,
            spike_weight: self.spike_weight,
            crystal_local: self.crystal_local,
        }
    }
}

/// Trace source and policy knobs shared by run, compare and sweep.
#[derive(Debug, Args)]
struct ReplayArgs {
    /// Trace file. Without it a default synthetic trace is generated from --seed.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Seed for the generated trace when --trace is absent.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// fixed:N entries per head, or ratio:R of the think length.
    #[arg(long, default_value = "ratio:0.1")]
    budget: BudgetMode,
    /// Reallocation period in decode steps (0 disables).
    #[arg(long, default_value_t = 128)]
    realloc_interval: u32,
    #[arg(long, default_value_t = 16)]
    b_min: u32,
    /// Most recent entries that are never evicted.
    #[arg(long, default_value_t = 0)]
    protect_recent: u32,
    #[arg(long)]
    no_renormalize: bool,
    /// Keep compressing through the answer stage.
    #[arg(long)]
    compress_answer: bool,
    /// Track hits while a head is still under budget.
    #[arg(long)]
    warmup_tracking: bool,
    /// Reset CRF values after each reallocation.
    #[arg(long)]
    reset_crf_on_realloc: bool,
    #[arg(long, default_value_t = 0.3)]
    alpha_bound: f64,
    #[arg(long, default_value_t = 0.9)]
    beta_bound: f64,
    /// Reject lambda outside (alpha, beta) instead of warning.
    #[arg(long)]
    strict_bounds: bool,
    #[arg(long, default_value_t = 4)]
    sink_size: u32,
    #[arg(long, default_value_t = 0)]
    window_size: u32,
    #[arg(long, default_value_t = 32)]
    obs_window: u32,
    /// Fraction of think positions labeled crystal (and slip).
    #[arg(long, default_value_t = DEFAULT_LABEL_FRACTION)]
    label_fraction: f64,
}

impl ReplayArgs {
    fn policy_config(&self, policy: PolicyKind, lambda: f64, top_p: f64) -> PolicyConfig {
        PolicyConfig {
            policy,
            lambda,
            top_p,
            alpha_bound: self.alpha_bound,
            beta_bound: self.beta_bound,
            strict_bounds: self.strict_bounds,
            budget_mode: self.budget,
            realloc_interval: self.realloc_interval,
            b_min: self.b_min,
            renormalize: !self.no_renormalize,
            sink_size: self.sink_size,
            window_size: self.window_size,
            obs_window: self.obs_window,
            protect_recent: self.protect_recent,
            warmup_tracking: self.warmup_tracking,
            compress_answer: self.compress_answer,
            reset_crf_on_realloc: self.reset_crf_on_realloc,
        }
    }

    fn load(&self) -> Result<(AttentionTrace, GroundTruthLabels), Failure> {
        let trace = match &self.trace {
            Some(path) => {
                let file = fs::File::open(path).map_err(|e| Failure::io(anyhow!(e).context(format!("opening {}", path.display()))))?;
                read_trace(BufReader::new(file)).map_err(Failure::core)?
            }
            None => generate_synthetic(&SyntheticSpec { seed: self.seed, ..SyntheticSpec::default() })
                .map_err(Failure::core)?
                .0,
        };
        let labels = label_ground_truth(&trace, self.label_fraction).map_err(Failure::core)?;
        Ok((trace, labels))
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    replay: ReplayArgs,
    #[arg(long, default_value_t = 0.6)]
    lambda: f64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value = "lrfu")]
    policy: PolicyKind,
    /// Output directory for runlog.json, report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    replay: ReplayArgs,
    #[arg(long, default_value_t = 0.6)]
    lambda: f64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    /// Comma-separated policies; the first is the baseline for deltas.
    #[arg(long, value_delimiter = ',', default_value = "lrfu,lru,lfu,sink,accum,obs")]
    policies: Vec<PolicyKind>,
    /// Output directory for the comparison table and per-policy reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    replay: ReplayArgs,
    /// Lambda grid as start:end:step (inclusive) or a single value.
    #[arg(long = "lambda", default_value = "0:1:0.1")]
    lambda_grid: Grid,
    /// Top-p grid as start:end:step (inclusive) or a single value.
    #[arg(long = "top-p", default_value = "0.5:0.9:0.1")]
    top_p_grid: Grid,
    /// Output directory for sweep.csv and sweep.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metrics report files written by run or compare.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output format.
    #[arg(long, default_value = "csv", value_parser = ["csv", "table"])]
    format: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Inclusive arithmetic grid.
#[derive(Debug, Clone, PartialEq)]
struct Grid(Vec<f64>);

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let nums: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?} in grid {s:?}")))
            .collect::<Result<_, _>>()?;
        let values = match nums[..] {
            [v] => vec![v],
            [start, end, step] => {
                if !(step > 0.0) || end < start {
                    return Err(format!("grid {s:?} needs start <= end and step > 0"));
                }
                let n = ((end - start) / step + 1e-9).floor() as usize;
                // Round to kill accumulated binary noise like 0.30000000000000004.
                (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
            }
            _ => return Err(format!("grid {s:?} is not start:end:step")),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format!("grid {s:?} has non-finite values"));
        }
        Ok(Grid(values))
    }
}

/// A failure with its exit status class.
#[derive(Debug)]
struct Failure {
    class: ErrorClass,
    error: anyhow::Error,
}

impl Failure {
    fn core<E: Into<ckv_core::Error>>(e: E) -> Self {
        let e: ckv_core::Error = e.into();
        Failure { class: e.class(), error: e.into() }
    }

    fn io(error: anyhow::Error) -> Self {
        Failure { class: ErrorClass::Io, error }
    }

    fn config(error: anyhow::Error) -> Self {
        Failure { class: ErrorClass::Config, error }
    }

    fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Config => 3,
            ErrorClass::Io => 4,
            ErrorClass::Invariant => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self.class {
            ErrorClass::Config => "config",
            ErrorClass::Io => "io",
            ErrorClass::Invariant => "invariant",
        }
    }
}

/// Writes `contents` to `path` via a temporary file in the same directory.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    write_atomic_with(path, |w| w.write_all(contents).map_err(anyhow::Error::from))
}

fn write_atomic_with<F>(path: &Path, fill: F) -> Result<(), Failure>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let inner = || -> anyhow::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush()?;
        }
        tmp.as_file().sync_all()?;
        tmp.persist(path)?;
        Ok(())
    };
    inner().with_context(|| format!("writing {}", path.display())).map_err(Failure::io)
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::io)
}

fn labels_path(trace_path: &Path) -> PathBuf {
    let stem = trace_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    trace_path.with_file_name(format!("{stem}.labels.json"))
}

fn checked_config(replay: &ReplayArgs, policy: PolicyKind, lambda: f64, top_p: f64) -> Result<PolicyConfig, Failure> {
    let cfg = replay.policy_config(policy, lambda, top_p);
    for w in cfg.validate().map_err(Failure::core)? {
        log::warn!("{w}");
    }
    Ok(cfg)
}

fn replay_one(trace: &AttentionTrace, labels: &GroundTruthLabels, cfg: PolicyConfig) -> Result<(ckv_core::replay::RunLog, MetricsReport), Failure> {
    let log = run_simulation(trace, &RunConfig::new(cfg)).map_err(Failure::core)?;
    let report = score_run(&log, labels, trace).map_err(Failure::core)?;
    let agg = &report.aggregate;
    if agg.answer_mass_retained > agg.oracle_mass + 1e-9 {
        return Err(Failure {
            class: ErrorClass::Invariant,
            error: anyhow!("retained answer mass {} exceeds oracle {}", agg.answer_mass_retained, agg.oracle_mass),
        });
    }
    Ok((log, report))
}

fn cmd_gen(args: &GenArgs) -> Result<(), Failure> {
    let (trace, labels) = generate_synthetic(&args.spec()).map_err(Failure::core)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_atomic_with(&args.out, |w| {
        if args.text {
            write_trace_text(&trace, w)?;
        } else {
            write_trace(&trace, w)?;
        }
        Ok(())
    })?;
    let json = serde_json::to_string_pretty(&labels).map_err(|e| Failure::io(e.into()))?;
    write_atomic(&labels_path(&args.out), json.as_bytes())?;
    println!("{} {}", args.out.display(), trace.fingerprint());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = checked_config(&args.replay, args.policy, args.lambda, args.top_p)?;
    let (trace, labels) = args.replay.load()?;
    let (log, report) = replay_one(&trace, &labels, cfg)?;
    ensure_dir(&args.out)?;
    write_atomic(&args.out.join("runlog.json"), log.to_json().as_bytes())?;
    write_atomic(&args.out.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&args.out.join("report.csv"), reports_to_csv(std::slice::from_ref(&report)).as_bytes())?;
    let a = &report.aggregate;
    println!(
        "{} crystal_retention={:.6} normalized_score={:.6} slip_occupancy={:.6}",
        report.policy, a.crystal_retention, a.normalized_score, a.slip_occupancy
    );
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), Failure> {
    if args.policies.is_empty() {
        return Err(Failure::config(anyhow!("no policies given")));
    }
    let configs = args
        .policies
        .iter()
        .map(|&p| checked_config(&args.replay, p, args.lambda, args.top_p))
        .collect::<Result<Vec<_>, _>>()?;
    let (trace, labels) = args.replay.load()?;
    let reports = configs
        .into_iter()
        .map(|cfg| replay_one(&trace, &labels, cfg).map(|(_, r)| r))
        .collect::<Result<Vec<_>, _>>()?;
    let table = compare_runs(&reports, 0).map_err(Failure::core)?;
    ensure_dir(&args.out)?;
    for r in &reports {
        write_atomic(&args.out.join(format!("report-{}.json", r.policy)), r.to_json().as_bytes())?;
    }
    write_atomic(&args.out.join("comparison.json"), table.to_json().as_bytes())?;
    write_atomic(&args.out.join("comparison.txt"), table.render().as_bytes())?;
    write_atomic(&args.out.join("reports.csv"), reports_to_csv(&reports).as_bytes())?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for &l in &args.lambda_grid.0 {
        for &p in &args.top_p_grid.0 {
            cells.push((l, p));
        }
    }
    let configs = cells
        .iter()
        .map(|&(lambda, top_p)| {
            let mut cfg = args.replay.policy_config(PolicyKind::Lrfu, lambda, top_p);
            // Sweeps deliberately cross the recommended lambda bounds.
            cfg.strict_bounds = false;
            cfg.validate().map_err(Failure::core).map(|_| cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (trace, labels) = args.replay.load()?;
    let results = configs
        .into_par_iter()
        .map(|cfg| {
            let (lambda, top_p) = (cfg.lambda, cfg.top_p);
            replay_one(&trace, &labels, cfg).map(|(_, r)| SweepCell { lambda, top_p, metrics: r.aggregate })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ensure_dir(&args.out)?;
    write_atomic(&args.out.join("sweep.csv"), sweep_to_csv(&results).as_bytes())?;
    let json = serde_json::to_string_pretty(&results).map_err(|e| Failure::io(e.into()))?;
    write_atomic(&args.out.join("sweep.json"), json.as_bytes())?;
    println!("{} cells", results.len());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let reports = args
        .inputs
        .iter()
        .map(|p| {
            let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::io)?;
            MetricsReport::from_json(&s)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(Failure::io)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = match args.format.as_str() {
        "table" => compare_runs(&reports, 0).map_err(Failure::core)?.render(),
        _ => reports_to_csv(&reports),
    };
    match &args.out {
        Some(path) => write_atomic(path, out.as_bytes()),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CKV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(anyhow!("CKV_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(anyhow!("configuring thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = format!("{:#}", f.error).replace('\n', " ");
            eprintln!("ckv: error kind={} code={} message={msg:?}", f.kind(), f.exit_code());
            ExitCode::from(f.exit_code())
        }
    }
}
