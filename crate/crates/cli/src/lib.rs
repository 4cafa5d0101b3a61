//! Experiment runner for the `hsprobe` head.
//!
//! Everything lives behind [`run`], which takes an argv and returns the
//! process exit code: 0 on success, 1 for bad input or usage, 2 for a
//! numeric failure (including a failed gradient check).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hsprobe::grad::random_gradcheck;
use hsprobe::report::{
    dump_analysis, param_count, write_metrics_csv, MetricsRow, ParamCountInput, ParamMethod,
};
use hsprobe::tensorio::{read_dataset, write_dataset};
use hsprobe::toygen::{generate_any, GeneratorSpec};
use hsprobe::train::{
    ablation_grid, few_shot_subset, train, train_avg_baseline, transfer_eval, SampleMode,
    TrainConfig, TrainReport,
};
use hsprobe::Error;

pub mod snapshot;

use snapshot::{load_model, save_model};

/// Environment variable that caps the worker pool size.
pub const THREADS_ENV: &str = "HSPROBE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hsprobe", version, about = "Train and analyse a light head over frozen hidden states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a generator spec (JSON).
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the head and save a model directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a saved model on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the four v1/v2 cells plus the averaging baseline; write a CSV.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on k examples sampled from the training split.
    Fewshot {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        k: usize,
        /// Sample uniformly instead of round-robin over classes.
        #[arg(long)]
        uniform: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on another dataset without retraining.
    Transfer {
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic and finite-difference gradients on random heads.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
    },
    /// Extra trainable parameters of a method, classifier excluded.
    Params {
        #[arg(long)]
        method: String,
        /// Transformer layers, embedding layer excluded.
        #[arg(long = "L")]
        layers: u64,
        #[arg(long = "d")]
        dim: u64,
        /// Prompt length for the prompt-tuning methods.
        #[arg(long = "K", default_value_t = 0)]
        prompt_len: u64,
    },
    /// Dump layer weights, mask ranking and attention for a saved model.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        /// Dataset whose examples get attention and subspace records.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Defaults to MODEL/analysis.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training config (JSON); missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value = "test")]
    eval_split: String,
    /// Overrides the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_numeric() { 2 } else { 1 }, message: e.to_string() }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Train { run, out } => cmd_train(&run, &out),
        Command::Eval { data, model, split } => cmd_eval(&model, &data, &split),
        Command::Ablate { run, out } => cmd_ablate(&run, &out),
        Command::Fewshot { run, k, uniform, out } => cmd_fewshot(&run, k, uniform, &out),
        Command::Transfer { source_model, target, split } => cmd_eval(&source_model, &target, &split),
        Command::Gradcheck { trials, tol, seed, step } => cmd_gradcheck(trials, tol, seed, step),
        Command::Params { method, layers, dim, prompt_len } => {
            let method: ParamMethod = method.parse()?;
            println!("{}", param_count(&ParamCountInput { method, layers, dim, prompt_len })?);
            Ok(())
        }
        Command::Inspect { model, top_k, data, split, out } => {
            cmd_inspect(&model, top_k, data.as_deref(), split.as_deref(), out)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })?;
    serde_json::from_slice(&bytes).map_err(|e| Failure { code: 1, message: format!("{}: {e}", path.display()) })
}

fn load_config(args: &RunArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_gen(spec: &Path, out: &Path) -> CmdResult {
    let spec: GeneratorSpec = read_json(spec)?;
    let bundle = generate_any(&spec)?;
    write_dataset(&bundle, out)?;
    println!("wrote {} examples to {}", bundle.examples.len(), out.display());
    Ok(())
}

fn summarize(report: &TrainReport) {
    let total: f64 = report.epoch_seconds.iter().sum();
    let n = report.epoch_seconds.len().max(1) as f64;
    eprintln!("{} epochs in {total:.2}s ({:.3}s/epoch)", report.history.len(), total / n);
    if let Some(last) = report.history.last() {
        let eval = last.eval_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!(
            "train_loss {:.6} train_accuracy {:.4} eval_accuracy {eval}",
            last.train_loss, last.train_accuracy
        );
    }
}

fn cmd_train(args: &RunArgs, out: &Path) -> CmdResult {
    let config = load_config(args)?;
    let data = read_dataset(&args.data)?;
    let report = train(&data, &args.split, Some(&args.eval_split), &config)?;
    summarize(&report);
    save_model(&report, config.seed, out)?;
    Ok(())
}

fn cmd_fewshot(args: &RunArgs, k: usize, uniform: bool, out: &Path) -> CmdResult {
    let config = load_config(args)?;
    let data = read_dataset(&args.data)?;
    let mode = if uniform { SampleMode::Uniform } else { SampleMode::Stratified };
    let subset = few_shot_subset(&data, &args.split, k, config.seed, mode)?;
    let config = TrainConfig { few_shot_k: None, ..config };
    let report = train(&subset, &args.split, Some(&args.eval_split), &config)?;
    summarize(&report);
    save_model(&report, config.seed, out)?;
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path, split: &str) -> CmdResult {
    let model = load_model(model)?;
    let data = read_dataset(data)?;
    println!("{}", transfer_eval(&model.report, &data, split)?);
    Ok(())
}

fn cmd_ablate(args: &RunArgs, out: &Path) -> CmdResult {
    let config = load_config(args)?;
    let data = read_dataset(&args.data)?;
    let started = Instant::now();
    let grid = ablation_grid(&data, &args.split, Some(&args.eval_split), &config)?;
    let baseline = train_avg_baseline(&data, &args.split, Some(&args.eval_split), &config)?;
    let mut rows: Vec<MetricsRow> = grid.iter().map(|(cell, r)| MetricsRow::from_report(cell, r)).collect();
    rows.push(MetricsRow::from_report("avg", &baseline));
    for row in &rows {
        let eval = row.eval_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{:>4}  params {:>8}  train_acc {:.4}  eval_acc {eval}", row.cell, row.trainable_params, row.train_accuracy);
    }
    eprintln!("ablation finished in {:.2}s", started.elapsed().as_secs_f64());
    let file = fs::File::create(out).map_err(Error::from)?;
    write_metrics_csv(file, &rows)?;
    Ok(())
}

fn cmd_gradcheck(trials: usize, tol: f64, seed: u64, step: f64) -> CmdResult {
    let started = Instant::now();
    let summary = random_gradcheck(trials, seed, step)?;
    println!(
        "max_relative_error {:e} worst_trial {} trials {}",
        summary.max_relative_error, summary.worst_trial, summary.trials
    );
    eprintln!("gradcheck took {:.2}s", started.elapsed().as_secs_f64());
    if summary.max_relative_error < tol {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            message: format!("relative error {:e} is not below {tol:e}", summary.max_relative_error),
        })
    }
}

fn cmd_inspect(
    model_dir: &Path,
    top_k: usize,
    data: Option<&Path>,
    split: Option<&str>,
    out: Option<PathBuf>,
) -> CmdResult {
    let model = load_model(model_dir)?;
    let bundle = data.map(read_dataset).transpose()?;
    let dump = dump_analysis(
        &model.report.params,
        &model.report.flags,
        bundle.as_ref().map(|b| (b, split)),
        top_k,
    )?;
    let out = out.unwrap_or_else(|| model_dir.join("analysis.json"));
    fs::write(&out, dump.to_json()?).map_err(Error::from)?;
    let layer = dump
        .layer_weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    println!("top layer {layer} (weight {:.4})", dump.layer_weights[layer]);
    println!("top dims {:?}", &dump.top_dims[..dump.top_dims.len().min(10)]);
    println!("wrote {}", out.display());
    Ok(())
}
