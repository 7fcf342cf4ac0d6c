use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use coupled_vae::figures::{fig_latent, grid_tiles, render_histogram_svg, render_pgm, GridSource};
use coupled_vae::metrics::{evaluate, histogram, render_table, EvalMode, EvalSpec, MetricsReport, CSV_HEADER};
use coupled_vae::mnist::{load_split, Dataset, LoadOptions, Split};
use coupled_vae::train::{grid, resume_with, sweep, train_with, Checkpoint, Progress, RunConfig, TrainOutcome};

const DATA_DIR_ENV: &str = "COUPLED_VAE_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "data/mnist-desk";

#[derive(Parser)]
#[command(name = "coupled-vae", about = "Coupled variational autoencoder on MNIST", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration, or continue a checkpoint with --resume.
    Train(TrainArgs),
    /// Train and evaluate a grid of (kappa_d, kappa_l) configurations.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Scatter plot of the latent means (SVG, z_dim = 2 only).
    FigLatent(FigArgs),
    /// Histogram of test log-likelihoods with the three metric lines (SVG).
    FigHist(HistArgs),
    /// Grid of originals, reconstructions or samples (PGM).
    FigGrid(GridArgs),
    /// Print the version.
    Version,
}

#[derive(Args, Default)]
struct RunArgs {
    /// TOML file with run settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kappa_d: Option<f64>,
    #[arg(long)]
    kappa_l: Option<f64>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    hidden_layers: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_limit: Option<usize>,
    /// Threshold pixels at 0.5.
    #[arg(long)]
    binarize: bool,
    /// MNIST directory [default: $COUPLED_VAE_DATA_DIR or data/mnist-desk]
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Schema of `--config` files. Every key is optional.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    kappa_d: Option<f64>,
    kappa_l: Option<f64>,
    z_dim: Option<usize>,
    hidden: Option<usize>,
    hidden_layers: Option<usize>,
    epochs: Option<u32>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    dropout: Option<f64>,
    seed: Option<u64>,
    train_limit: Option<usize>,
    binarize: Option<bool>,
    data_dir: Option<PathBuf>,
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Continue this checkpoint for --epochs more epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the loss of every batch.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.15")]
    kappa_d_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.15")]
    kappa_l_values: Vec<f64>,
    /// Configurations trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "deterministic")]
    mode: EvalMode,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// MNIST directory [default: $COUPLED_VAE_DATA_DIR, then the checkpoint's]
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use only the first N test images.
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value = "deterministic")]
    mode: EvalMode,
    /// Evaluation seed for sampled mode [default: the run seed]
    #[arg(long)]
    seed: Option<u64>,
    /// Where the metrics CSV goes [default: next to the checkpoint]
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FigArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HistArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, default_value = "deterministic")]
    mode: EvalMode,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Needed for reconstructions and samples.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "originals")]
    source: GridSource,
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// Seed of the latent draws for samples [default: the run seed]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn env_data_dir() -> Option<PathBuf> {
    std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Defaults, then the config file, then flags.
fn resolve_config(args: &RunArgs, base: RunConfig) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<FileConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let mut c = base;
    macro_rules! layer {
        ($($field:ident),*) => {$(
            if let Some(v) = file.$field.clone() { c.$field = v; }
            if let Some(v) = args.$field.clone() { c.$field = v; }
        )*};
    }
    layer!(kappa_d, kappa_l, z_dim, hidden, hidden_layers, epochs, batch_size, lr, dropout, seed, data_dir, out_dir);
    if let Some(v) = file.train_limit {
        c.train_limit = Some(v);
    }
    if let Some(v) = args.train_limit {
        c.train_limit = Some(v);
    }
    if let Some(v) = file.binarize {
        c.binarize = v;
    }
    if args.binarize {
        c.binarize = true;
    }
    c.validate()?;
    Ok(c)
}

fn fresh_base() -> RunConfig {
    RunConfig {
        data_dir: env_data_dir().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
        ..RunConfig::default()
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_progress(verbose: bool, total_epochs: u32) -> impl FnMut(Progress) {
    move |p| match p {
        Progress::Batch { epoch, batch, total } if verbose => {
            eprintln!("  epoch {epoch} batch {batch}: loss {total:.4}")
        }
        Progress::Epoch(r) => eprintln!(
            "epoch {}/{total_epochs}: total {:.4} recon {:.4} kl {:.4} ({:.1}s)",
            r.epoch, r.total, r.recon, r.kl, r.seconds
        ),
        _ => {}
    }
}

fn save_run(outcome: &TrainOutcome, append_log: bool) -> Result<()> {
    let c = &outcome.checkpoint.config;
    fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
    outcome.checkpoint.save(&c.checkpoint_path())?;
    outcome.log.write(&c.log_path(), append_log)?;
    println!("checkpoint {}", c.checkpoint_path().display());
    println!("log {}", c.log_path().display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    match &args.resume {
        None => {
            let config = resolve_config(&args.run, fresh_base())?;
            let data = config
                .load_training_data()
                .with_context(|| format!("loading training data from {}", config.data_dir.display()))?;
            let outcome = train_with(&config, &data, &mut print_progress(args.verbose, config.epochs))?;
            save_run(&outcome, false)
        }
        Some(path) => {
            let checkpoint = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let mut base = checkpoint.config.clone();
            if let Some(dir) = env_data_dir() {
                base.data_dir = dir;
            }
            let requested = resolve_config(&args.run, base)?;
            let extra = args.run.epochs.context("--resume needs --epochs (number of additional epochs)")?;
            let data = requested
                .load_training_data()
                .with_context(|| format!("loading training data from {}", requested.data_dir.display()))?;
            let target = checkpoint.epoch + extra;
            let mut outcome = resume_with(checkpoint, &requested, &data, extra, &mut print_progress(args.verbose, target))?;
            outcome.checkpoint.config.out_dir = requested.out_dir.clone();
            outcome.checkpoint.config.data_dir = requested.data_dir.clone();
            save_run(&outcome, true)
        }
    }
}

fn load_test(dir: &Path, limit: Option<usize>, binarize: bool) -> Result<Dataset> {
    let opts = LoadOptions { limit, binarize };
    load_split(dir, Split::Test, &opts).with_context(|| format!("loading test data from {}", dir.display()))
}

fn write_metrics(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut text = format!("{CSV_HEADER}\n");
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_file(path, text)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = resolve_config(&args.run, fresh_base())?;
    let configs = grid(&base, &args.kappa_d_values, &args.kappa_l_values);
    let data = base
        .load_training_data()
        .with_context(|| format!("loading training data from {}", base.data_dir.display()))?;
    let test = load_test(&base.data_dir, None, base.binarize)?;
    let mut reports = Vec::new();
    let mut failures = 0;
    for entry in sweep(&configs, &data, args.jobs)? {
        let name = entry.config.run_name();
        match entry.outcome {
            Ok(outcome) => {
                save_run(&outcome, false)?;
                let spec = EvalSpec::for_run(&entry.config, args.mode);
                let report = evaluate(&outcome.checkpoint.params, &test, &spec)?.report;
                write_metrics(&entry.config.out_dir.join(format!("{name}.metrics.csv")), std::slice::from_ref(&report))?;
                reports.push(report);
            }
            Err(e) => {
                failures += 1;
                eprintln!("run {name} failed: {e}");
            }
        }
    }
    if !reports.is_empty() {
        write_metrics(&base.out_dir.join("sweep.metrics.csv"), &reports)?;
        let table = render_table(&reports);
        write_file(&base.out_dir.join("sweep.table.txt"), &table)?;
        print!("{table}");
    }
    if failures > 0 {
        bail!("{failures} of {} runs failed", configs.len());
    }
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint,
    test: Dataset,
}

fn load_source(src: &SourceArgs) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(&src.checkpoint).with_context(|| format!("loading {}", src.checkpoint.display()))?;
    let dir = src
        .data_dir
        .clone()
        .or_else(env_data_dir)
        .unwrap_or_else(|| checkpoint.config.data_dir.clone());
    let test = load_test(&dir, src.test_limit, checkpoint.config.binarize)?;
    Ok(Loaded { checkpoint, test })
}

/// `<checkpoint dir>/<checkpoint stem><suffix>`.
fn beside(checkpoint: &Path, suffix: &str) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let Loaded { checkpoint, test } = load_source(&args.source)?;
    let mut spec = EvalSpec::for_run(&checkpoint.config, args.mode);
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let report = evaluate(&checkpoint.params, &test, &spec)?.report;
    let path = match &args.out_dir {
        Some(dir) => dir.join(beside(&args.source.checkpoint, ".metrics.csv").file_name().unwrap_or_default()),
        None => beside(&args.source.checkpoint, ".metrics.csv"),
    };
    write_metrics(&path, std::slice::from_ref(&report))?;
    print!("{}", report.to_csv());
    eprint!("{}", render_table(std::slice::from_ref(&report)));
    eprintln!("metrics {}", path.display());
    Ok(())
}

fn cmd_fig_latent(args: FigArgs) -> Result<()> {
    let Loaded { checkpoint, test } = load_source(&args.source)?;
    let title = format!("latent means, kappa_D {} kappa_L {}", checkpoint.config.kappa_d, checkpoint.config.kappa_l);
    let svg = fig_latent(&checkpoint.params, &test, &title)?;
    let out = args.out.unwrap_or_else(|| beside(&args.source.checkpoint, ".latent.svg"));
    write_file(&out, svg)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_fig_hist(args: HistArgs) -> Result<()> {
    let Loaded { checkpoint, test } = load_source(&args.source)?;
    let mut spec = EvalSpec::for_run(&checkpoint.config, args.mode);
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let eval = evaluate(&checkpoint.params, &test, &spec)?;
    let hist = histogram(eval.log_likelihoods.values(), args.bins)?;
    let title = format!("test likelihoods, kappa_D {} kappa_L {}", spec.kappa_d, spec.kappa_l);
    let svg = render_histogram_svg(&hist, &eval.report, &title)?;
    let out = args.out.unwrap_or_else(|| beside(&args.source.checkpoint, ".hist.svg"));
    write_file(&out, svg)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_fig_grid(args: GridArgs) -> Result<()> {
    if args.rows == 0 || args.cols == 0 {
        bail!("--rows and --cols must be >= 1");
    }
    let count = args.rows * args.cols;
    let checkpoint = match &args.checkpoint {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let needs_data = matches!(args.source, GridSource::Originals | GridSource::Reconstructions);
    let test = if needs_data {
        let dir = args
            .data_dir
            .clone()
            .or_else(env_data_dir)
            .or_else(|| checkpoint.as_ref().map(|c| c.config.data_dir.clone()))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let binarize = checkpoint.as_ref().is_some_and(|c| c.config.binarize);
        Some(load_test(&dir, Some(count), binarize)?)
    } else {
        None
    };
    let (kappa_d, run_seed) = checkpoint.as_ref().map_or((0.0, 0), |c| (c.config.kappa_d, c.config.seed));
    let tiles = grid_tiles(
        args.source,
        checkpoint.as_ref().map(|c| &c.params),
        test.as_ref(),
        count,
        kappa_d,
        args.seed.unwrap_or(run_seed),
    )?;
    let pgm = render_pgm(&tiles, args.rows, args.cols)?;
    let suffix = match args.source {
        GridSource::Originals => ".originals.pgm",
        GridSource::Reconstructions => ".reconstructions.pgm",
        GridSource::Samples => ".samples.pgm",
    };
    let out = match (args.out, &args.checkpoint) {
        (Some(o), _) => o,
        (None, Some(c)) => beside(c, suffix),
        (None, None) => PathBuf::from(&suffix[1..]),
    };
    write_file(&out, pgm)?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::FigLatent(a) => cmd_fig_latent(a),
        Command::FigHist(a) => cmd_fig_hist(a),
        Command::FigGrid(a) => cmd_fig_grid(a),
        Command::Version => {
            println!("coupled-vae {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 2 inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
