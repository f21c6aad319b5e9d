//! `tdnet`: phantom generation, training, inference and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tdnet::checkpoint::Checkpoint;
use tdnet::config::{Precision, TrainConfig};
use tdnet::data::{Shape3, Volume};
use tdnet::dataset::{phantom_dataset_options, write_phantom_dataset, Dataset, Split};
use tdnet::inference::predict_mask;
use tdnet::io;
use tdnet::metrics::{evaluate_case, write_report_csv, CaseReport};
use tdnet::preprocessing::{window_and_normalize, DEFAULT_LEVEL, DEFAULT_WINDOW};
use tdnet::training::{model_from_checkpoint, run_training_from_config, RunOptions};
use tdnet::{Error, Scalar};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "tdnet", version, about = "Scribble-supervised 3D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with scribbles and a manifest.
    MakePhantoms(MakePhantomsArgs),
    /// Train a model from a TOML config plus `key=value` overrides.
    Train(TrainArgs),
    /// Predict label volumes with a checkpoint (primary decoder, sliding window).
    Infer(InferArgs),
    /// Score predicted label volumes against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct MakePhantomsArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 4)]
    classes: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set num_decoders=1` or `--set network.dilation_rates=[1,1,1]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from `latest.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed iterations (a checkpoint is written).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; predicts every case of `--split`.
    #[arg(long, conflicts_with = "input")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Individual image files.
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Input images are already in [0, 1]; otherwise they are windowed as CT.
    #[arg(long)]
    normalized: bool,
    /// Sliding-window stride as `d,h,w`; defaults to half the patch.
    #[arg(long, value_parser = parse_shape)]
    stride: Option<Shape3>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted label volumes named `<case>.nii.gz`.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset whose `--split` labels are the references.
    #[arg(long, conflicts_with = "reference")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory of reference volumes with the same file names as `--pred`.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Number of classes including background; read from the dataset when given.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok([*a, *b, *c]),
        _ => Err("expected three positive integers `d,h,w`".into()),
    }
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config {
            key: "split".into(),
            message: format!("`{s}` is not one of train, val, test"),
        }),
    }
}

/// Command failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config { .. }) { EXIT_USAGE } else { EXIT_RUNTIME };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    crate_version: &'a str,
    args: A,
}

fn write_record<A: Serialize>(dir: &Path, command: &str, args: A) -> Result<(), Failure> {
    let record = RunRecord {
        command,
        crate_version: env!("CARGO_PKG_VERSION"),
        args,
    };
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(())
}

fn make_phantoms(a: &MakePhantomsArgs) -> Result<(), Failure> {
    if a.size == 0 || a.classes < 2 {
        return Err(usage("--size must be positive and --classes at least 2"));
    }
    let opts = phantom_dataset_options(a.count as usize, a.seed, [a.size; 3], a.classes);
    let manifest = write_phantom_dataset(&a.out, &opts)?;
    write_record(
        &a.out,
        "make-phantoms",
        serde_json::json!({ "count": a.count, "seed": a.seed, "size": a.size, "classes": a.classes }),
    )?;
    println!(
        "wrote {} cases to {} (train {}, val {}, test {})",
        manifest.cases.len(),
        a.out.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = TrainConfig::load(a.config.as_deref(), &a.overrides)?;
    cfg.require_dataset()?;
    let opts = RunOptions {
        resume: a.resume,
        stop_after: a.stop_after,
    };
    let summary = run_training_from_config(&cfg, &opts)?;
    match summary.best {
        Some(b) => println!(
            "finished {} iterations in {}; best validation mean DSC {:.4} at iteration {}",
            summary.iterations,
            summary.output_dir.display(),
            b.mean_dsc,
            b.iteration
        ),
        None => println!("finished {} iterations in {}", summary.iterations, summary.output_dir.display()),
    }
    Ok(())
}

fn infer(a: &InferArgs) -> Result<(), Failure> {
    let precision = Checkpoint::<f64>::load(&a.checkpoint)?.config.precision;
    match precision {
        Precision::F32 => infer_with::<f32>(a),
        Precision::F64 => infer_with::<f64>(a),
    }
}

fn infer_with<T: Scalar>(a: &InferArgs) -> Result<(), Failure> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let model = model_from_checkpoint(&ck)?;
    let patch = ck.config.patch_size;
    let stride = a.stride.or(ck.config.inference_stride);
    let inputs: Vec<Volume<T>> = if let Some(dir) = &a.dataset {
        let ds = Dataset::open(dir)?;
        if ds.num_classes() != model.config().num_classes {
            return Err(usage(format!(
                "the dataset has {} classes but the checkpoint predicts {}",
                ds.num_classes(),
                model.config().num_classes
            )));
        }
        let split = parse_split(&a.split)?;
        ds.load_split::<T>(split)?.into_iter().map(|c| c.volume).collect()
    } else if !a.input.is_empty() {
        a.input
            .iter()
            .map(|p| {
                let v = io::read_volume::<T>(p)?;
                if a.normalized {
                    Ok(v)
                } else {
                    window_and_normalize(&v, DEFAULT_WINDOW, DEFAULT_LEVEL)
                }
            })
            .collect::<Result<_, Error>>()?
    } else {
        return Err(usage("give --dataset or --input"));
    };
    fs::create_dir_all(&a.out)?;
    for v in &inputs {
        let mask = predict_mask(&model, v, patch, stride)?;
        io::write_segmentation(a.out.join(format!("{}.nii.gz", v.id)), &mask, v.spacing)?;
        println!("{}", v.id);
    }
    write_record(
        &a.out,
        "infer",
        serde_json::json!({
            "checkpoint": a.checkpoint,
            "checkpoint_iteration": ck.iteration,
            "stride": stride,
            "cases": inputs.iter().map(|v| v.id.as_str()).collect::<Vec<_>>(),
            "config": ck.config,
        }),
    )?;
    Ok(())
}

struct Pair {
    id: String,
    pred: PathBuf,
    reference: PathBuf,
}

fn evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let (pairs, classes) = if let Some(dir) = &a.dataset {
        let ds = Dataset::open(dir)?;
        let split = parse_split(&a.split)?;
        let pairs = ds
            .manifest
            .split(split)
            .map(|e| Pair {
                id: e.id.clone(),
                pred: a.pred.join(format!("{}.nii.gz", e.id)),
                reference: ds.root.join(&e.label),
            })
            .collect::<Vec<_>>();
        if let Some(c) = a.classes.filter(|&c| c != ds.num_classes()) {
            return Err(usage(format!("--classes {c} disagrees with the dataset's {}", ds.num_classes())));
        }
        (pairs, ds.num_classes())
    } else if let Some(ref_dir) = &a.reference {
        let classes = a.classes.ok_or_else(|| usage("--classes is required with --ref"))?;
        let mut names: Vec<_> = fs::read_dir(&a.pred)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".nii") || n.ends_with(".nii.gz"))
            .collect();
        names.sort();
        let pairs = names
            .into_iter()
            .map(|n| Pair {
                id: n.trim_end_matches(".gz").trim_end_matches(".nii").to_string(),
                pred: a.pred.join(&n),
                reference: ref_dir.join(&n),
            })
            .collect();
        (pairs, classes)
    } else {
        return Err(usage("give --dataset or --ref"));
    };
    if classes < 2 {
        return Err(usage("at least 2 classes are required"));
    }

    let mut reports: Vec<CaseReport> = Vec::new();
    let mut failures: Vec<(String, String)> = Vec::new();
    for p in &pairs {
        match evaluate_pair(p, classes) {
            Ok(r) => reports.push(r),
            Err(e) => {
                eprintln!("warning: case {} skipped: {e}", p.id);
                failures.push((p.id.clone(), e.to_string()));
            }
        }
    }
    fs::create_dir_all(&a.out)?;
    write_report_csv(fs::File::create(a.out.join("metrics.csv"))?, &reports)?;
    write_record(
        &a.out,
        "evaluate",
        serde_json::json!({
            "pred": a.pred,
            "dataset": a.dataset,
            "reference": a.reference,
            "split": a.split,
            "classes": classes,
            "evaluated": reports.len(),
            "failures": failures.iter().map(|(id, e)| serde_json::json!({"case": id, "error": e})).collect::<Vec<_>>(),
        }),
    )?;
    if !reports.is_empty() {
        let mean = reports.iter().map(CaseReport::mean_dsc).sum::<f64>() / reports.len() as f64;
        println!("evaluated {} cases, mean DSC {mean:.4}", reports.len());
    }
    if !failures.is_empty() {
        eprintln!("warning: {} of {} cases failed:", failures.len(), pairs.len());
        for (id, e) in &failures {
            eprintln!("  {id}: {e}");
        }
    }
    Ok(())
}

fn evaluate_pair(p: &Pair, classes: usize) -> Result<CaseReport, Error> {
    let (pred, pred_spacing) = io::read_segmentation(&p.pred, classes)?;
    let (reference, ref_spacing) = io::read_segmentation(&p.reference, classes)?;
    if pred.shape() != reference.shape() {
        return Err(Error::InvalidArgument(format!(
            "prediction shape {:?} differs from reference {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    if pred_spacing.iter().zip(&ref_spacing).any(|(a, b)| (a - b).abs() > 1e-4 * b.abs().max(1.0)) {
        return Err(Error::InvalidArgument(format!(
            "prediction spacing {pred_spacing:?} differs from reference {ref_spacing:?}"
        )));
    }
    evaluate_case(&p.id, &pred, &reference, classes, ref_spacing)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakePhantoms(a) => make_phantoms(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
