//! `ptrmix`: generation, scoring, evaluation, synthetic traces and benchmarks.
//!
//! Exit status is 0 on success, 1 when the input is at fault (bad flags,
//! malformed files, inconsistent traces) and 2 on internal failure.

mod commands;
mod config;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptrmix::engine::{Aggregator, LayerSelector};
use ptrmix::eval::Mc3Averaging;
use ptrmix::TokenId;

use config::{RunConfig, SelectMetric};

#[derive(Debug)]
pub enum Failure {
    Input(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Internal(_) => 2,
        }
    }

    pub fn context(self, prefix: impl fmt::Display) -> Self {
        match self {
            Failure::Input(m) => Failure::Input(format!("{prefix}: {m}")),
            Failure::Internal(m) => Failure::Internal(format!("{prefix}: {m}")),
        }
    }

    pub fn io(e: std::io::Error, path: &Path) -> Self {
        let msg = format!("{}: {e}", path.display());
        match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => Failure::Input(msg),
            _ => Failure::Internal(msg),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "{m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<ptrmix::Error> for Failure {
    fn from(e: ptrmix::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Internal(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ptrmix", version, about = "Pointer-generator decoding over recorded layer traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate from one trace, or from every trace in a directory.
    Decode {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        pig: PigArgs,
        #[command(flatten)]
        gen: GenArgs,
        /// `.pigtrace` file or directory of them.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Teacher-forced log-probability of a token sequence.
    Score {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        pig: PigArgs,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Candidate ids; the trace's forced tokens by default.
        #[arg(long, value_delimiter = ',')]
        tokens: Option<Vec<TokenId>>,
    },
    /// MC1/MC2/MC3 over a multiple-choice dataset.
    EvalMc {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        pig: PigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// MC3 averaging: `multiset` or `per-item`.
        #[arg(long, value_parser = parse_mc3)]
        mc3: Option<Mc3Averaging>,
        /// Cross-validated α selection over this many folds.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        fold_seed: Option<u64>,
        /// Metric maximized during α selection.
        #[arg(long, value_enum)]
        select: Option<SelectMetric>,
    },
    /// Token F1 and exact match of predictions against gold answers.
    EvalF1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Completion-ranking accuracy.
    EvalFactor {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        pig: PigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Write a seeded synthetic trace.
    TraceSynth {
        #[command(flatten)]
        run: RunArgs,
        /// Step plan such as `f,f,c,f`.
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        vocab: Option<usize>,
        /// Number of layers; the top one is the anchor.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        span: Option<Vec<TokenId>>,
        /// Minimum content-step divergence.
        #[arg(long)]
        floor: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        forced: Option<Vec<TokenId>>,
    },
    /// Decode-step latency against a plain softmax.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        pig: PigArgs,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        layer_counts: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PigArgs {
    /// Copy scale; a comma-separated list runs each value.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Divergence aggregation: mean, max or min.
    #[arg(long)]
    agg: Option<Aggregator>,
    /// Candidate layers: `last16`, `last16:even`, `last8:odd` or `24,26,28`.
    #[arg(long)]
    layers: Option<LayerSelector>,
    #[arg(long)]
    anchor: Option<usize>,
    #[arg(long)]
    attn_layer: Option<usize>,
    /// Ceiling on the copy probability.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Token ids that never receive pointer mass.
    #[arg(long, value_delimiter = ',')]
    filter: Option<Vec<TokenId>>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Argmax instead of sampling.
    #[arg(long)]
    greedy: bool,
    #[arg(long, value_delimiter = ',')]
    stop: Option<Vec<TokenId>>,
}

fn parse_mc3(s: &str) -> Result<Mc3Averaging, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown MC3 averaging `{s}` (expected multiset or per-item)"))
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn set_some<T>(dst: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *dst = v;
    }
}

impl RunArgs {
    fn base(&self, command: &str) -> Result<RunConfig, Failure> {
        let mut rc = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        rc.command = command.to_string();
        set(&mut rc.seed, self.seed);
        set(&mut rc.jobs, self.jobs);
        set_some(&mut rc.out, self.out.clone());
        Ok(rc)
    }
}

impl PigArgs {
    fn apply(self, rc: &mut RunConfig) {
        set(&mut rc.alpha, self.alpha);
        set(&mut rc.agg, self.agg);
        set(&mut rc.layers, self.layers);
        set_some(&mut rc.anchor, self.anchor);
        set_some(&mut rc.attn_layer, self.attn_layer);
        set(&mut rc.clip, self.clip);
        set_some(&mut rc.temperature, self.temperature);
        set(&mut rc.filter, self.filter);
    }
}

fn resolve(command: Command) -> Result<RunConfig, Failure> {
    let rc = match command {
        Command::Decode { run, pig, gen, trace } => {
            let mut rc = run.base("decode")?;
            pig.apply(&mut rc);
            set(&mut rc.max_new_tokens, gen.max_new_tokens);
            rc.greedy |= gen.greedy;
            set(&mut rc.stop, gen.stop);
            set_some(&mut rc.trace, trace);
            rc
        }
        Command::Score { run, pig, trace, tokens } => {
            let mut rc = run.base("score")?;
            pig.apply(&mut rc);
            set_some(&mut rc.trace, trace);
            set_some(&mut rc.tokens, tokens);
            rc
        }
        Command::EvalMc {
            run,
            pig,
            data,
            trace_dir,
            mc3,
            folds,
            fold_seed,
            select,
        } => {
            let mut rc = run.base("eval-mc")?;
            pig.apply(&mut rc);
            set_some(&mut rc.data, data);
            set_some(&mut rc.trace_dir, trace_dir);
            set(&mut rc.mc3, mc3);
            set(&mut rc.folds, folds);
            set(&mut rc.fold_seed, fold_seed);
            set(&mut rc.select, select);
            rc
        }
        Command::EvalF1 { run, data, predictions } => {
            let mut rc = run.base("eval-f1")?;
            set_some(&mut rc.data, data);
            set_some(&mut rc.predictions, predictions);
            rc
        }
        Command::EvalFactor { run, pig, data, trace_dir } => {
            let mut rc = run.base("eval-factor")?;
            pig.apply(&mut rc);
            set_some(&mut rc.data, data);
            set_some(&mut rc.trace_dir, trace_dir);
            rc
        }
        Command::TraceSynth {
            run,
            steps,
            vocab,
            layers,
            span,
            floor,
            forced,
        } => {
            let mut rc = run.base("trace-synth")?;
            set(&mut rc.synth.steps, steps);
            set(&mut rc.synth.vocab, vocab);
            set(&mut rc.synth.layers, layers);
            set_some(&mut rc.synth.span, span);
            set_some(&mut rc.synth.floor, floor);
            set_some(&mut rc.synth.forced, forced);
            rc
        }
        Command::Bench {
            run,
            pig,
            vocab,
            layer_counts,
            reps,
        } => {
            let mut rc = run.base("bench")?;
            pig.apply(&mut rc);
            set(&mut rc.bench.vocab, vocab);
            set(&mut rc.bench.layer_counts, layer_counts);
            set(&mut rc.bench.reps, reps);
            rc
        }
    };
    rc.validate()?;
    Ok(rc)
}

/// Write-then-rename in the destination directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Failure::io(e, dir))?;
    tmp.write_all(bytes).map_err(|e| Failure::io(e, path))?;
    tmp.as_file().sync_all().map_err(|e| Failure::io(e, path))?;
    tmp.persist(path).map_err(|e| Failure::io(e.error, path))?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let rc = resolve(cli.command)?;
    log::info!("{} fingerprint {}", rc.command, rc.fingerprint());
    let bytes = commands::run(&rc)?;
    match &rc.out {
        Some(path) => write_atomic(path, &bytes),
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| Failure::Internal(format!("stdout: {e}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ptrmix: {f}");
            ExitCode::from(f.code())
        }
    }
}
