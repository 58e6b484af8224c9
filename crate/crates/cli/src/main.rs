use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use squat::data::{load_event_tensor, load_fashion_mnist, save_event_tensor, synth_spikes, Dataset, SyntheticSpec};
use squat::harness::{
    evaluate, load_records, prepare_data, ptq_run, report, resolve_data_dir, run_matrix, run_trials, save_record,
    ExperimentConfig, RunMode, RunOutput,
};
use squat::model::{load, save};
use squat::quantizer::{build_exponential_grid, build_uniform_grid, default_ratio, Scheme};
use squat::{Error, Result};

#[derive(Parser)]
#[command(name = "squat", version, about = "Quantization-aware training for spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config for each of its seeds.
    Train(TrainArgs),
    /// Run a matrix of modes, bit widths and schemes, then write a report.
    Matrix(MatrixArgs),
    /// Post-training quantization of a checkpoint.
    Ptq(PtqArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Aggregate saved run records into CSV files and tables.
    Report(ReportArgs),
    /// Print the levels of a quantization grid, one per line.
    Grid(GridArgs),
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train only this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "fp32,ptq_ws,qat_w,squat_s,qat_squat")]
    modes: Vec<RunMode>,
    #[arg(long, value_delimiter = ',', default_value = "8,4,2")]
    bits: Vec<u8>,
    #[arg(long, value_delimiter = ',', default_value = "uniform,exponential")]
    schemes: Vec<Scheme>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Weights,
    States,
    Both,
}

#[derive(Args)]
struct PtqArgs {
    #[arg(long)]
    from: PathBuf,
    #[arg(long, value_enum)]
    what: What,
    #[arg(long)]
    bits: u8,
    #[arg(long, default_value = "exponential")]
    scheme: Scheme,
    #[arg(long)]
    ratio: Option<f32>,
    /// Config supplying the dataset and calibration settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint; defaults to `<from>.ptq.sqt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `fashion-mnist`, a directory of IDX files, or an event-tensor file.
    #[arg(long, default_value = "fashion-mnist")]
    dataset: String,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 500)]
    batch_size: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    bits: u8,
    #[arg(long)]
    scheme: Scheme,
    #[arg(long, allow_hyphen_values = true)]
    min: f32,
    #[arg(long, allow_hyphen_values = true)]
    max: f32,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    theta: f32,
    #[arg(long)]
    ratio: Option<f32>,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a synthetic spike dataset as an event tensor.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    /// Input channels per step.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Matrix(a) => matrix(a),
        Command::Ptq(a) => ptq(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => {
            let records = load_records(&a.input)?;
            for row in report(&records, &a.out)? {
                println!("{} {:?} {:?} {:.4} ± {:.4} (n={})", row.mode, row.bits, row.scheme, row.mean_acc, row.std_acc, row.trials);
            }
            Ok(())
        }
        Command::Grid(a) => grid(a),
        Command::Data {
            command: DataCommand::Synth(a),
        } => {
            let batch = synth_spikes(&SyntheticSpec::new(a.classes, a.size, a.steps, a.samples, a.seed))?;
            save_event_tensor(&a.out, &batch)?;
            println!("wrote {} samples to {}", batch.batch_size(), a.out.display());
            Ok(())
        }
    }
}

fn persist(outputs: &[RunOutput], out: &Path) -> Result<()> {
    for o in outputs {
        save_record(&o.record, out)?;
        save(&o.checkpoint, out.join(format!("{}.sqt", o.record.run_id)))?;
        println!("{} accuracy {:.4}", o.record.run_id, o.record.accuracy());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let outputs = run_trials(&cfg, &data)?;
    persist(&outputs, &a.out)
}

fn matrix(a: MatrixArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(n) = a.trials {
        cfg.trials = n;
        cfg.seeds.clear();
    }
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let outputs = run_matrix(&cfg, &a.modes, &a.bits, &a.schemes, &data)?;
    persist(&outputs, &a.out)?;
    let records: Vec<_> = outputs.into_iter().map(|o| o.record).collect();
    report(&records, &a.out)?;
    print!("{}", std::fs::read_to_string(a.out.join("tables.txt")).unwrap_or_default());
    Ok(())
}

fn ptq(a: PtqArgs) -> Result<()> {
    let source = load(&a.from)?;
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            model: source.spec.name.clone(),
            ..ExperimentConfig::default()
        },
    };
    cfg.mode = match a.what {
        What::Weights => RunMode::PtqW,
        What::States => RunMode::PtqS,
        What::Both => RunMode::PtqWs,
    };
    cfg.n_bits = a.bits;
    cfg.scheme = a.scheme;
    cfg.ratio = a.ratio.or(cfg.ratio);
    cfg.source_checkpoint = Some(a.from.clone());
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let out = ptq_run(&cfg, source.meta.seed, &source, &data)?;
    let path = a.out.unwrap_or_else(|| a.from.with_extension("ptq.sqt"));
    save(&out.checkpoint, &path)?;
    println!("{} accuracy {:.4} -> {}", out.record.run_id, out.record.accuracy(), path.display());
    Ok(())
}

fn eval_dataset(spec: &str) -> Result<Dataset> {
    let path = Path::new(spec);
    if path.is_file() {
        let batch = load_event_tensor(path)?;
        return Ok(Dataset::from_sequences(&batch.materialize(), batch.labels)?);
    }
    let dir = match spec {
        "fashion-mnist" | "fashion_mnist" | "fmnist" => resolve_data_dir(None),
        _ => resolve_data_dir(Some(path)),
    };
    Ok(load_fashion_mnist(dir)?.1)
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.steps == 0 || a.batch_size == 0 {
        return Err(Error::Config("steps and batch size must be >= 1".into()));
    }
    let ck = load(&a.ckpt)?;
    let mut model = ck.to_model()?;
    let data = eval_dataset(&a.dataset)?.with_feature_shape(&ck.spec.input_shape)?;
    let cfg = ExperimentConfig::default();
    let rec = evaluate(&mut model, &data, a.steps, a.batch_size, cfg.loss, cfg.targets)?;
    println!("samples {} loss {:.6} accuracy {:.4}", data.len(), rec.loss, rec.accuracy);
    Ok(())
}

/// `v` with nine significant digits.
fn sig9(v: f32) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = (v.abs() as f64).log10().floor() as i32;
    if (-5..9).contains(&exp) {
        format!("{:.*}", (8 - exp).max(0) as usize, v)
    } else {
        format!("{v:.8e}")
    }
}

fn grid(a: GridArgs) -> Result<()> {
    let g = match a.scheme {
        Scheme::Uniform => build_uniform_grid(a.bits, a.min, a.max)?,
        Scheme::Exponential => build_exponential_grid(
            a.bits,
            a.min,
            a.max,
            a.theta,
            a.ratio.unwrap_or_else(|| default_ratio(a.bits)),
        )?,
    };
    for &l in g.levels() {
        println!("{}", sig9(l));
    }
    Ok(())
}
