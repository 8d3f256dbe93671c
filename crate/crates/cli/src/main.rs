mod bench;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lsce::alloc::CountingAllocator;
use lsce::calibration::AceEmpty;
use lsce::tensor::BlockOverrides;
use lsce::Reduction;

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator::system();

#[derive(Parser, Debug)]
#[command(name = "lsce", version, about = "Memory-efficient smoothed cross-entropy, calibration metrics and entropy bounds")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads for the parallel engine paths.
    #[arg(long, global = true, env = "SCE_THREADS")]
    pub threads: Option<usize>,

    /// File of `key = value` lines, one per long flag, applied before the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute the smoothed cross-entropy of stored E, C and targets.
    Loss(LossArgs),
    /// Compare blocked gradients with the naive oracle and finite differences.
    Gradcheck(GradcheckArgs),
    /// Time forward/backward passes and report peak auxiliary memory.
    Bench(BenchArgs),
    /// Calibration metrics and reliability table for JSONL records.
    Calibrate(CalibrateArgs),
    /// Sweep the softmax entropy lower bound over (d, v, rho) grids.
    Entropy(EntropyArgs),
    /// Write a seeded random instance as SCE1 files.
    Gen(GenArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Engine {
    Blocked,
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Sum,
    Mean,
}

impl From<ReductionArg> for Reduction {
    fn from(r: ReductionArg) -> Self {
        match r {
            ReductionArg::Sum => Reduction::Sum,
            ReductionArg::Mean => Reduction::Mean,
        }
    }
}

fn parse_beta(s: &str) -> Result<f64, String> {
    let beta: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&beta) {
        Ok(beta)
    } else {
        Err(format!("beta must be in [0, 1], got {beta}"))
    }
}

fn parse_epsilon(s: &str) -> Result<f64, String> {
    let eps = match s.strip_prefix("2^") {
        Some(exp) => 2f64.powf(exp.parse::<f64>().map_err(|_| format!("`{s}` is not a number"))?),
        None => s.parse().map_err(|_| format!("`{s}` is not a number"))?,
    };
    if (0.0..1.0).contains(&eps) {
        Ok(eps)
    } else {
        Err(format!("epsilon must be in [0, 1), got {eps}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("expected a positive number, got {x}"))
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TileArgs {
    /// Tokens per tile.
    #[arg(long)]
    pub n_block: Option<usize>,
    /// Vocabulary entries per tile.
    #[arg(long)]
    pub v_block: Option<usize>,
    /// Hidden-dim chunk per tile.
    #[arg(long)]
    pub d_block: Option<usize>,
    /// Run token/vocabulary blocks on the thread pool.
    #[arg(long)]
    pub parallel: bool,
}

impl TileArgs {
    pub fn overrides(&self) -> BlockOverrides {
        BlockOverrides {
            n_block: self.n_block,
            v_block: self.v_block,
            d_block: self.d_block,
        }
    }
}

#[derive(Args, Debug)]
pub struct LossArgs {
    /// Embeddings E (D × N).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Classifier C (D × |V|).
    #[arg(long)]
    pub classifier: PathBuf,
    /// Target ids (N × 1, u32).
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, default_value = "0", value_parser = parse_beta)]
    pub beta: f64,
    #[arg(long, value_enum, default_value = "blocked")]
    pub engine: Engine,
    #[arg(long, value_enum, default_value = "sum")]
    pub reduction: ReductionArg,
    /// Write `token,lse,o,loss` rows here.
    #[arg(long, value_name = "CSV")]
    pub per_token: Option<PathBuf>,
    #[command(flatten)]
    pub tiles: TileArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "0")]
    pub seed: u64,
    #[arg(long, default_value = "8")]
    pub n: usize,
    #[arg(long, default_value = "64")]
    pub v: usize,
    #[arg(long, default_value = "16")]
    pub d: usize,
    #[arg(long, default_value = "0.1", value_parser = parse_beta)]
    pub beta: f64,
    #[arg(long, value_enum, default_value = "sum")]
    pub reduction: ReductionArg,
    /// Finite-difference step.
    #[arg(long, default_value = "1e-3", value_parser = parse_positive)]
    pub h: f64,
    #[arg(long, default_value = "1e-9", value_parser = parse_positive)]
    pub tol_analytic: f64,
    #[arg(long, default_value = "1e-4", value_parser = parse_positive)]
    pub tol_fd: f64,
    /// Enable gradient filtering at this threshold (`2^-12` syntax accepted);
    /// relaxes the analytic tolerance to at least 1e-3.
    #[arg(long, value_parser = parse_epsilon)]
    pub filter_eps: Option<f64>,
    /// Visit vocabulary blocks in estimated-logit order.
    #[arg(long)]
    pub vocab_sort: bool,
    /// Perturb the blocked gradient before comparing (negative control).
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
    #[command(flatten)]
    pub tiles: TileArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value = "1024")]
    pub n: usize,
    #[arg(long, default_value = "8192")]
    pub v: usize,
    #[arg(long, default_value = "128")]
    pub d: usize,
    #[arg(long, default_value = "0")]
    pub seed: u64,
    /// Smoothing rates to bench, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1", value_parser = parse_beta)]
    pub betas: Vec<f64>,
    /// Timed repetitions per row (median reported).
    #[arg(long, default_value = "10", value_parser = clap::value_parser!(u32).range(3..))]
    pub reps: u32,
    /// Untimed warmup runs per row.
    #[arg(long, default_value = "3")]
    pub warmup: u32,
    /// Only bench the blocked engine.
    #[arg(long)]
    pub skip_naive: bool,
    /// Write `wall_time_ms` as empty so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    /// Refuse naive runs whose logit buffer would exceed this many MiB.
    #[arg(long, default_value = "1024")]
    pub naive_limit_mib: usize,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub tiles: TileArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Ece,
    #[value(name = "rms_ce", alias = "rms-ce")]
    RmsCe,
    Sce,
    Ace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AceEmptyArg {
    Skip,
    Zero,
}

impl From<AceEmptyArg> for AceEmpty {
    fn from(a: AceEmptyArg) -> Self {
        match a {
            AceEmptyArg::Skip => AceEmpty::Skip,
            AceEmptyArg::Zero => AceEmpty::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    EqualWidth,
    EqualMass,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// JSONL records.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "10", value_parser = clap::value_parser!(u64).range(1..))]
    pub bins: u64,
    /// Metrics to report. Defaults to all metrics the records support.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub metrics: Option<Vec<MetricArg>>,
    #[arg(long, value_enum, default_value = "skip")]
    pub ace_empty: AceEmptyArg,
    /// Metrics CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reliability table CSV destination.
    #[arg(long)]
    pub reliability: Option<PathBuf>,
    /// Binning scheme for the reliability table.
    #[arg(long, value_enum, default_value = "equal-width")]
    pub reliability_scheme: SchemeArg,
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,64,1024")]
    pub v: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5")]
    pub rho: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_positive)]
    pub temperature: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_positive)]
    pub softcap: Vec<f64>,
    /// Check every row against the projected-gradient oracle.
    #[arg(long)]
    pub verify: bool,
    #[arg(long, default_value = "64")]
    pub restarts: usize,
    #[arg(long, default_value = "5000")]
    pub iterations: usize,
    #[arg(long, default_value = "0")]
    pub seed: u64,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value = "0")]
    pub seed: u64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub v: usize,
    #[arg(long)]
    pub d: usize,
    /// Entry standard deviation; defaults to D^(-1/4) so logits have unit variance.
    #[arg(long, value_parser = parse_positive)]
    pub scale: Option<f64>,
    /// Draw targets from a Zipf prior with this exponent and bias the logits to match.
    #[arg(long, value_parser = parse_positive)]
    pub zipf: Option<f64>,
    /// Directory for embeddings.sce, classifier.sce and targets.sce.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Store matrices as f32.
    #[arg(long)]
    pub f32: bool,
}

fn main() -> ExitCode {
    let argv = match config::expand_args(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Loss(a) => commands::loss(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => bench::run(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Entropy(a) => commands::entropy(a),
        Command::Gen(a) => commands::gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
