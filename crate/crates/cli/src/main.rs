use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use paanet::data::{list_images, load_dataset_root, load_image, save_saliency, synth_generate};
use paanet::experiment::{self, evaluate_samples};
use paanet::metrics::{evaluate_dataset, MetricReport, SaliencyMap};
use paanet::training::stored_dtype;
use paanet::{Checkpoint, DType, PaaNet, Real, RunConfig, SynthConfig, Tensor, Trainer};

#[derive(Parser)]
#[command(name = "paanet", version, about = "Train, evaluate and ablate contrast-based saliency models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt and train_log.csv.
    Train(RunArgs),
    /// Score predictions against ground truth, or a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write one saliency PNG per input image.
    Predict(PredictArgs),
    /// Train and evaluate one model per operator order; writes ablation.csv.
    Ablate(AblateArgs),
    /// Generate a synthetic dataset with images/ and masks/.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// frozen or unfrozen
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of 8-bit grayscale predictions.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint", requires = "gt")]
    pred: Option<PathBuf>,
    /// Ground-truth mask directory, used with --pred.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Checkpoint to run on --data before scoring.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Dataset root with images/ and masks/, used with --checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated operator orders.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    orders: Vec<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lower contrast and more distractors.
    #[arg(long)]
    challenge: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Predict(a) => predict(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Synth(a) => synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("override `{kv}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &a.strategy {
        cfg.strategy = s.parse()?;
    }
    if let Some(out) = &a.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match p {
        Some(p) if p.is_dir() => Ok(p),
        Some(p) => bail!("`{key}` directory {} does not exist", p.display()),
        None => bail!("`{key}` is not set"),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_preds(dir: &Path, ids: &[String], preds: &[SaliencyMap]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (id, map) in ids.iter().zip(preds) {
        save_saliency(map, &dir.join(format!("{id}.png")))?;
    }
    Ok(())
}

fn train(a: &RunArgs) -> Result<()> {
    let cfg = load_config(a)?;
    match cfg.precision {
        DType::F32 => train_as::<f32>(&cfg),
        DType::F64 => train_as::<f64>(&cfg),
    }
}

fn train_as<T: Real>(cfg: &RunConfig) -> Result<()> {
    let root = data_path(&cfg.train_data, "train_data")?;
    let data = load_dataset_root::<T>(root, cfg.input_size)?;
    let mut trainer = experiment::trainer_for(cfg, &data)?;
    trainer.train(&data)?;

    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    std::fs::write(cfg.out.join("train_log.csv"), trainer.log().to_csv())?;
    write_atomic(&cfg.out.join("model.ckpt"), &trainer.checkpoint().to_bytes())?;
    let means = trainer.log().epoch_means();
    if let (Some(first), Some(last)) = (means.first(), means.last()) {
        println!("epoch {} loss {:.6} -> epoch {} loss {:.6}", first.0, first.1, last.0, last.1);
    }

    if let Some(test) = &cfg.test_data {
        let test = load_dataset_root::<T>(test, cfg.input_size)?;
        let (report, _) = evaluate_samples(&mut trainer.model, &test, cfg.batch_size)?;
        report.write(&cfg.out, &format!("order{}", cfg.order))?;
        print_report(&report);
    }
    Ok(())
}

fn print_report(r: &MetricReport) {
    for (k, v) in r.scalars() {
        println!("{k:>8} {v:.4}");
    }
}

fn load_model<T: Real>(bytes: &[u8]) -> Result<(PaaNet<T>, RunConfig)> {
    let ckpt = Checkpoint::<T>::from_bytes(bytes)?;
    let cfg = RunConfig::parse(&ckpt.config)?;
    Ok((Trainer::from_checkpoint(&ckpt)?.model, cfg))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let report = match (&a.pred, &a.checkpoint) {
        (Some(pred), _) => {
            let gt = a.gt.as_ref().context("--pred needs --gt")?;
            evaluate_dataset(pred, gt)?
        }
        (None, Some(ckpt)) => {
            let bytes = std::fs::read(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
            let data = a.data.as_ref().context("--checkpoint needs --data")?;
            match stored_dtype(&bytes)? {
                DType::F32 => eval_checkpoint::<f32>(&bytes, data, &a.out)?,
                DType::F64 => eval_checkpoint::<f64>(&bytes, data, &a.out)?,
            }
        }
        (None, None) => bail!("give --pred and --gt, or --checkpoint and --data"),
    };
    report.write(&a.out, "eval")?;
    print_report(&report);
    Ok(())
}

fn eval_checkpoint<T: Real>(bytes: &[u8], data: &Path, out: &Path) -> Result<MetricReport> {
    let (mut model, cfg) = load_model::<T>(bytes)?;
    let samples = load_dataset_root::<T>(data, cfg.input_size)?;
    let (report, preds) = evaluate_samples(&mut model, &samples, cfg.batch_size)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    write_preds(&out.join("pred"), &ids, &preds)?;
    Ok(report)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let bytes = std::fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let failed = match stored_dtype(&bytes)? {
        DType::F32 => predict_as::<f32>(&bytes, &a.images, &a.out)?,
        DType::F64 => predict_as::<f64>(&bytes, &a.images, &a.out)?,
    };
    if failed > 0 {
        bail!("{failed} image(s) could not be processed");
    }
    Ok(())
}

fn predict_as<T: Real>(bytes: &[u8], images: &Path, out: &Path) -> Result<usize> {
    let (mut model, cfg) = load_model::<T>(bytes)?;
    let files = list_images(images)?;
    std::fs::create_dir_all(out)?;
    let mut failed = 0;
    for (stem, path) in files {
        let res = (|| -> Result<()> {
            let image: Tensor<T> = load_image(&path, cfg.input_size, None)?;
            let pred = model.predict(&image)?;
            save_saliency(&SaliencyMap::from_tensor(&pred, 0)?, &out.join(format!("{stem}.png")))?;
            Ok(())
        })();
        if let Err(e) = res {
            eprintln!("{}: {e:#}", path.display());
            failed += 1;
        }
    }
    Ok(failed)
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = load_config(&a.run)?;
    if a.orders.is_empty() {
        bail!("--orders is empty");
    }
    for (i, n) in a.orders.iter().enumerate() {
        if a.orders[..i].contains(n) {
            bail!("order {n} listed twice");
        }
    }
    let mut table = String::from("order,MAE,MaxFm,MeanFm,MaxEm,MeanEm,Sm\n");
    let mut failures = Vec::new();
    for &order in &a.orders {
        let cfg = RunConfig {
            order,
            out: base.out.join(format!("order{order}")),
            ..base.clone()
        };
        let run = match cfg.precision {
            DType::F32 => ablate_run::<f32>(&cfg),
            DType::F64 => ablate_run::<f64>(&cfg),
        };
        match run {
            Ok(r) => {
                let _ = writeln!(
                    table,
                    "{order},{},{},{},{},{},{}",
                    r.mae, r.max_fm, r.mean_fm, r.max_em, r.mean_em, r.sm
                );
                println!("order {order}: MAE {:.4} MaxFm {:.4} Sm {:.4}", r.mae, r.max_fm, r.sm);
            }
            Err(e) => {
                eprintln!("order {order}: {e:#}");
                failures.push(order);
            }
        }
    }
    std::fs::create_dir_all(&base.out)?;
    std::fs::write(base.out.join("ablation.csv"), table)?;
    if !failures.is_empty() {
        bail!("runs failed for orders {failures:?}");
    }
    Ok(())
}

fn ablate_run<T: Real>(cfg: &RunConfig) -> Result<MetricReport> {
    let train = load_dataset_root::<T>(data_path(&cfg.train_data, "train_data")?, cfg.input_size)?;
    let test = load_dataset_root::<T>(data_path(&cfg.test_data, "test_data")?, cfg.input_size)?;
    let outcome = experiment::run(cfg, &train, &test)?;
    let report = outcome.report.context("test set is empty")?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("train_log.csv"), outcome.trainer.log().to_csv())?;
    write_atomic(&cfg.out.join("model.ckpt"), &outcome.trainer.checkpoint().to_bytes())?;
    report.write(&cfg.out, &format!("order{}", cfg.order))?;
    Ok(report)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = if a.challenge {
        SynthConfig::challenge(a.count, a.size, a.seed)
    } else {
        SynthConfig::standard(a.count, a.size, a.seed)
    };
    let ids = synth_generate(&cfg, &a.out)?;
    println!("wrote {} pairs to {}", ids.len(), a.out.display());
    Ok(())
}
