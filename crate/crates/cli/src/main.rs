use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Fit latent class mixture models with one-, two- or three-step estimation.
#[derive(Debug, Parser)]
#[command(name = "stepfit", version, about)]
struct Cli {
    /// Worker threads for inits, bootstrap repetitions and study replications
    /// [default: available parallelism]
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write it as JSON together with a report
    Fit(FitArgs),
    /// Write class probabilities and modal classes for each unit
    Predict(PredictArgs),
    /// Print the average log-likelihood and information criteria
    Score(PredictArgs),
    /// Bootstrap standard errors of a fitted configuration
    Bootstrap(BootstrapArgs),
    /// Draw units from a fitted model
    Sample(SampleArgs),
    /// Generate one dataset of a simulation design
    Simulate(SimulateArgs),
    /// Run a replication study and write the bias/RMSE table
    Study(StudyArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Measurement-model data (CSV with header)
    #[arg(long = "mm", value_name = "CSV")]
    mm: PathBuf,

    /// Structural-model data (CSV with header, same rows as --mm)
    #[arg(long = "sm", value_name = "CSV")]
    sm: Option<PathBuf>,

    /// Column of --mm holding sample weights; applied to both datasets
    #[arg(long, value_name = "NAME")]
    weight_column: Option<String>,
}

#[derive(Debug, Args)]
struct EmArgs {
    /// Maximum EM iterations per run
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,

    /// Stop when the average log-likelihood changes by less than this
    #[arg(long, default_value_t = 1e-10)]
    abs_tol: f64,

    /// Also stop on a relative change below this
    #[arg(long)]
    rel_tol: Option<f64>,

    /// Random initializations; the best final log-likelihood wins
    #[arg(long, default_value_t = 1)]
    n_init: usize,

    /// Base random seed
    #[arg(long, env = "STEPFIT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Number of latent classes
    #[arg(short = 'k', long)]
    n_components: usize,

    /// Measurement descriptor: a family tag (e.g. binary, gaussian_diag_nan),
    /// a JSON object with a "blocks" array, or a path to a JSON file
    #[arg(long, value_name = "DESCRIPTOR")]
    mm_descriptor: String,

    /// Structural descriptor, same forms as --mm-descriptor
    #[arg(long, value_name = "DESCRIPTOR")]
    sm_descriptor: Option<String>,

    /// 1 (joint), 2 (measurement fixed) or 3 (imputed class weights)
    #[arg(long, default_value_t = 1)]
    n_steps: usize,

    /// Three-step class assignment: soft or modal [default: modal]
    #[arg(long)]
    assignment: Option<String>,

    /// Three-step correction: none, bch or ml [default: none]
    #[arg(long)]
    correction: Option<String>,

    #[command(flatten)]
    em: EmArgs,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    model: ModelArgs,

    /// Where to write the fitted model (JSON)
    #[arg(long, value_name = "JSON")]
    model_out: Option<PathBuf>,

    /// Where to write the report [default: stdout]
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,

    /// Report detail: 0 prints fit statistics, 1 adds parameter tables
    #[arg(long, default_value_t = 1)]
    verbose: u8,

    /// Three-step only: write the imputed class weights (CSV)
    #[arg(long, value_name = "CSV")]
    weights_out: Option<PathBuf>,

    /// Three-step with bch or ml only: write the misclassification matrix (CSV)
    #[arg(long, value_name = "CSV")]
    confusion_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Fitted model (JSON)
    #[arg(long, value_name = "JSON")]
    model: PathBuf,

    #[command(flatten)]
    data: DataArgs,

    /// Output CSV [default: stdout]
    #[arg(long, short, value_name = "CSV")]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BootstrapArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    model: ModelArgs,

    /// Bootstrap repetitions
    #[arg(long, default_value_t = 100)]
    reps: usize,

    /// Long-form samples (rep, module, param, class, dim, value)
    #[arg(long, value_name = "CSV")]
    samples_out: Option<PathBuf>,

    /// Per-parameter mean and standard deviation [default: stdout]
    #[arg(long, value_name = "CSV")]
    summary_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Fitted model (JSON)
    #[arg(long, value_name = "JSON")]
    model: PathBuf,

    /// Number of units
    #[arg(long)]
    n: usize,

    #[arg(long, env = "STEPFIT_SEED", default_value_t = 0)]
    seed: u64,

    /// Output files are PREFIX_mm.csv, PREFIX_sm.csv and PREFIX_classes.csv
    #[arg(long, default_value = "sample")]
    prefix: String,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// bakk-response, bakk-covariate or bakk-complete
    design: String,

    #[arg(long)]
    n: usize,

    /// Indicator separation
    #[arg(long, default_value_t = 0.8)]
    sep: f64,

    /// Share of indicator and outcome cells missing (complete design)
    #[arg(long, default_value_t = 0.0)]
    missing: f64,

    #[arg(long, env = "STEPFIT_SEED", default_value_t = 0)]
    seed: u64,

    /// Output files are PREFIX_mm.csv, PREFIX_sm.csv and PREFIX_classes.csv
    #[arg(long, default_value = "simulated")]
    prefix: String,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// response, covariate or complete
    design: String,

    /// Sample sizes
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
    n: Vec<usize>,

    /// Indicator separations
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.8,0.9")]
    sep: Vec<f64>,

    /// Missing ratios (complete design)
    #[arg(long, value_delimiter = ',', default_value = "0")]
    missing: Vec<f64>,

    /// Replications per design
    #[arg(long, default_value_t = 100)]
    reps: usize,

    /// Estimators among 1-step, 2-step, 3-naive, 3-bch, 3-ml
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1-step,2-step,3-naive,3-bch,3-ml"
    )]
    estimators: Vec<String>,

    #[command(flatten)]
    em: EmArgs,

    /// Output CSV [default: stdout]
    #[arg(long, short, value_name = "CSV")]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(stepfit::Error::Io { source, .. })
            if source.kind() == std::io::ErrorKind::BrokenPipe =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
