use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iiu::graph::{generate_synthetic, load_dataset, write_dataset, DatasetMeta, SynthConfig};
use iiu::model::{gradcheck_setup, model_grad_check};
use iiu::trainer::{
    aggregate_trace, check_dims, evaluate, load_checkpoint, prepare_all, train, trace_run, write_aggregate_csv,
    write_predictions, write_trace_csv, TrainConfig, CHECKPOINT_FILE, METRICS_FILE,
};
use iiu::variants::Registry;
use iiu::Error;

const PREDICTIONS_FILE: &str = "predictions.jsonl";
const TRACE_FILE: &str = "trace.csv";
const AGGREGATE_FILE: &str = "trace_aggregate.csv";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "iiu", version, about = "Train and inspect sparse-unit reasoning models over memory graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a model, writing metrics and a checkpoint after every epoch.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write per-sample predictions.
    Eval(EvalArgs),
    /// Record unit activations per step as CSV.
    Trace(TraceArgs),
    /// Compare analytic gradients with central differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// List the model variants accepted by `--variant`.
    Variants,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator settings; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Write the first N samples to `train/` and the rest to `test/`.
    #[arg(long, value_name = "N")]
    split: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; replaces any data source in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the predictions file; defaults to the checkpoint's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Append zero-input steps after the real ones, e.g. `zero_tail=10`.
    #[arg(long, value_parser = parse_probe)]
    probe: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn parse_probe(s: &str) -> Result<usize, String> {
    let n = s.strip_prefix("zero_tail=").ok_or_else(|| format!("expected zero_tail=<n>, got `{s}`"))?;
    n.parse().map_err(|_| format!("zero_tail needs a non-negative integer, got `{n}`"))
}

enum Failure {
    Usage(String),
    Data(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e)
        }
    }
}

fn gen(a: GenArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.samples {
        cfg.n_samples = n;
    }
    let data = generate_synthetic(&cfg)?;
    match a.split {
        Some(n) => {
            let (tr, te) = data.split_at(n);
            write_dataset(&a.out.join("train"), &data.meta, &tr)?;
            write_dataset(&a.out.join("test"), &data.meta, &te)?;
            println!("wrote {} train and {} test samples under {}", tr.len(), te.len(), a.out.display());
        }
        None => {
            write_dataset(&a.out, &data.meta, &data.samples)?;
            println!("wrote {} samples to {}", data.samples.len(), a.out.display());
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = a.data {
        cfg.data = Some(d);
        cfg.synth = None;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let out = train(&cfg, &a.out)?;
    let last = out.metrics.last().expect("at least one epoch");
    println!(
        "epochs {} loss {:.6} train_acc {:.4}; wrote {} and {}",
        out.metrics.len(),
        last.loss,
        last.acc,
        a.out.join(METRICS_FILE).display(),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_for_eval(checkpoint: &Path, data: &Path) -> Result<(iiu::trainer::Checkpoint, Vec<iiu::inference::PreparedSample>), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let meta = DatasetMeta { d_node: ds.d_node(), ..ds.meta };
    check_dims(&ck.model, &meta, &ds.samples)?;
    let prepared = prepare_all(&ds.samples, &ck.model.dims)?;
    Ok((ck, prepared))
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let (ck, data) = load_for_eval(&a.checkpoint, &a.data)?;
    let e = evaluate(&ck.model, &data, &ck.train.loss)?;
    let dir = a.out.unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(PREDICTIONS_FILE);
    write_predictions(&path, &e.predictions)?;
    println!("samples {} accuracy {:.4} loss {:.6}; wrote {}", data.len(), e.accuracy, e.loss, path.display());
    Ok(())
}

fn trace(a: TraceArgs) -> Result<(), Failure> {
    let (ck, data) = load_for_eval(&a.checkpoint, &a.data)?;
    let rows = trace_run(&ck.model, &data, a.probe.unwrap_or(0))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_trace_csv(&a.out.join(TRACE_FILE), &rows)?;
    let agg = aggregate_trace(&rows);
    write_aggregate_csv(&a.out.join(AGGREGATE_FILE), &agg)?;
    println!("{} rows; wrote {} and {}", rows.len(), TRACE_FILE, AGGREGATE_FILE);
    for r in &agg {
        println!("{:<9} unit {:>2} {:.3}", r.modality, r.unit, r.frequency);
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Failure::Usage(format!("--eps must be positive, got {}", a.eps)));
    }
    let (model, sample) = gradcheck_setup(a.seed)?;
    let report = model_grad_check(&model, &sample, a.eps, a.seed)?;
    println!("{report}");
    let rel = report.max_rel_error();
    if rel < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("max relative error {rel:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Trace(a) => trace(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Variants => {
            for v in Registry::default().iter() {
                println!("{:<18} {}", v.name(), v.description());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
