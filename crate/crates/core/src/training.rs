//! SGD training loop with poly learning-rate decay, validation, logging and checkpoints.
//!
//! Every iteration draws its randomness (case choice, crop, decoder dropout) from a
//! ChaCha stream keyed by `(seed, t)`, so a resumed run replays the same batches.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{BestScore, Checkpoint};
use crate::config::{Precision, TrainConfig};
use crate::data::{ProbabilityMap, Shape3};
use crate::dataset::{Case, Dataset, Split};
use crate::error::{Error, Result};
use crate::inference::predict_mask;
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{evaluate_case, CaseReport};
use crate::network::TDNet;
use crate::nn::Tensor;
use crate::preprocessing::{extract_random_patch_with, Patch};
use crate::scalar::Scalar;

pub const TRAIN_LOG: &str = "train.csv";
pub const VAL_LOG: &str = "val.csv";
pub const RUN_RECORD: &str = "run.json";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// `lr0 · (1 − t/t_max)^power`, with `t` clamped to `[0, t_max]`.
pub fn poly_lr(lr0: f64, t: usize, t_max: usize, power: f64) -> f64 {
    let frac = t.min(t_max) as f64 / t_max.max(1) as f64;
    lr0 * (1.0 - frac).powf(power)
}

/// Randomness for iteration `t`: its own ChaCha stream under `seed`.
pub fn iteration_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// SGD with momentum: `v ← μv + g + λw` (λ only on kernels), then `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &TDNet<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut TDNet<T>, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for (p, v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            let decay = if p.kind.decays() { wd } else { T::zero() };
            for ((w, &g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = mu * *vi + g + decay * *w;
                *w = *w - lr * *vi;
            }
        }
    }
}

/// What one iteration logs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Draws `batch_size` random crops from random training cases.
pub fn sample_batch<T: Scalar, R: Rng>(cases: &[Case<T>], patch: Shape3, batch_size: usize, rng: &mut R) -> Result<Vec<Patch<T>>> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no training cases".into()));
    }
    (0..batch_size)
        .map(|_| {
            let case = &cases[rng.random_range(0..cases.len())];
            extract_random_patch_with(&case.volume, &case.scribble, patch, rng)
        })
        .collect()
}

/// One optimization step at iteration `t`: forward every decoder, total loss, backward,
/// SGD update. Loss terms are averaged over the batch.
pub fn train_step<T: Scalar, R: Rng>(
    model: &mut TDNet<T>,
    optimizer: &mut Sgd<T>,
    batch: &[Patch<T>],
    t: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    model.zero_grad();
    let weights = cfg.loss_weights(t);
    let options = cfg.loss_options();
    let scale = T::lit(1.0 / batch.len() as f64);
    let mut sum = LossBreakdown::default();
    for patch in batch {
        let (logits, cache) = model.forward_train(&Tensor::from_image(&patch.volume.data), rng)?;
        let probs: Vec<ProbabilityMap<T>> = logits.into_iter().map(|l| ProbabilityMap::from_logits(&l.into_array4())).collect();
        let loss = total_loss(&probs, &patch.scribble, &weights, &options)?;
        if !loss.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: t,
                case_id: patch.volume.id.clone(),
                breakdown: format!("{:?}", loss.breakdown),
            });
        }
        let d_logits: Vec<Tensor<T>> = loss
            .grad_logits(&probs)
            .into_iter()
            .map(|g| Tensor::from_array4(&g.mapv(|v| v * scale)))
            .collect();
        model.backward(cache, &d_logits);
        let b = loss.breakdown;
        sum.total += b.total;
        sum.sup += b.sup;
        sum.uspc += b.uspc;
        sum.mpcc += b.mpcc;
        sum.alpha_t = b.alpha_t;
        sum.beta_t = b.beta_t;
    }
    let n = batch.len() as f64;
    sum.total /= n;
    sum.sup /= n;
    sum.uspc /= n;
    sum.mpcc /= n;
    let lr = poly_lr(cfg.lr0, t, cfg.t_max, cfg.poly_power);
    optimizer.step(model, lr);
    Ok(StepRecord { iter: t, loss: sum, lr })
}

/// Primary-decoder sliding-window predictions scored against dense labels.
pub fn evaluate_cases<T: Scalar>(model: &TDNet<T>, cases: &[Case<T>], patch: Shape3, stride: Option<Shape3>) -> Result<Vec<CaseReport>> {
    cases
        .iter()
        .map(|case| {
            let pred = predict_mask(model, &case.volume, patch, stride)?;
            evaluate_case(&case.id, &pred, &case.labels, model.config().num_classes, case.volume.spacing)
        })
        .collect()
}

/// Case-averaged mean DSC, ASD and HD95.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub mean_dsc: f64,
    pub mean_asd: f64,
    pub mean_hd95: f64,
}

impl SplitScores {
    pub fn from_reports(reports: &[CaseReport]) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&CaseReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            mean_dsc: avg(CaseReport::mean_dsc),
            mean_asd: avg(CaseReport::mean_asd),
            mean_hd95: avg(CaseReport::mean_hd95),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iter: usize,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_sup")]
    pub l_sup: f64,
    #[serde(rename = "L_uspc")]
    pub l_uspc: f64,
    #[serde(rename = "L_mpcc")]
    pub l_mpcc: f64,
    pub alpha_t: f64,
    pub beta_t: f64,
    pub lr: f64,
}

impl From<&StepRecord> for TrainRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            iter: r.iter,
            l_total: r.loss.total,
            l_sup: r.loss.sup,
            l_uspc: r.loss.uspc,
            l_mpcc: r.loss.mpcc,
            alpha_t: r.loss.alpha_t,
            beta_t: r.loss.beta_t,
            lr: r.lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub iter: usize,
    pub mean_dsc: f64,
    pub mean_asd: f64,
    pub mean_hd95: f64,
}

/// Reads a training log written by [`run_training`].
pub fn read_train_log(path: impl AsRef<Path>) -> Result<Vec<TrainRow>> {
    read_rows(path.as_ref())
}

pub fn read_val_log(path: impl AsRef<Path>) -> Result<Vec<ValRow>> {
    read_rows(path.as_ref())
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Opens a CSV log for appending, first dropping rows with `iter >= keep_below`.
fn open_log<R>(path: &Path, keep_below: usize, iter_of: fn(&R) -> usize) -> Result<csv::Writer<fs::File>>
where
    R: Serialize + for<'de> Deserialize<'de>,
{
    let kept: Vec<R> = if keep_below > 0 && path.exists() {
        read_rows::<R>(path)?.into_iter().filter(|r| iter_of(r) < keep_below).collect()
    } else {
        Vec::new()
    };
    let mut w = csv::Writer::from_path(path)?;
    for r in &kept {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(w)
}

/// Options for [`run_training`] beyond the config itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `latest.ckpt` in the output directory when present.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many iterations are complete.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSummary {
    pub output_dir: PathBuf,
    /// Completed iterations.
    pub iterations: usize,
    pub last: Option<StepRecord>,
    pub best: Option<BestScore>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    crate_version: &'a str,
    seed: u64,
    precision: Precision,
    started_at_iteration: usize,
    config: &'a TrainConfig,
}

/// Loads the dataset named by the config and trains in the configured precision.
pub fn run_training_from_config(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainingSummary> {
    cfg.validate()?;
    let dataset = Dataset::open(cfg.require_dataset()?)?;
    match cfg.precision {
        Precision::F32 => run_training::<f32>(cfg, &dataset, opts),
        Precision::F64 => run_training::<f64>(cfg, &dataset, opts),
    }
}

/// Trains on the dataset's train split for `t_max` iterations.
///
/// The output directory receives `train.csv` (every iteration), `val.csv`, `latest.ckpt`,
/// `best.ckpt` (highest validation mean DSC) and `run.json`.
pub fn run_training<T: Scalar>(cfg: &TrainConfig, dataset: &Dataset, opts: &RunOptions) -> Result<TrainingSummary> {
    cfg.validate()?;
    if dataset.num_classes() != cfg.network.num_classes {
        return Err(Error::Config {
            key: "network.num_classes".into(),
            message: format!("is {} but the dataset has {} classes", cfg.network.num_classes, dataset.num_classes()),
        });
    }
    let train: Vec<Case<T>> = dataset.load_split(Split::Train)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("the dataset has no training cases".into()));
    }
    let val: Vec<Case<T>> = dataset.load_split(Split::Val)?;
    train_on_cases(cfg, &train, &val, opts)
}

/// [`run_training`] on cases already in memory.
pub fn train_on_cases<T: Scalar>(cfg: &TrainConfig, train: &[Case<T>], val: &[Case<T>], opts: &RunOptions) -> Result<TrainingSummary> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let latest_path = out.join(LATEST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);

    let mut model = TDNet::<T>::new(cfg.network.clone(), cfg.seed)?;
    let mut optimizer = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut start = 0;
    let mut best = None;
    if opts.resume && latest_path.exists() {
        let ck = Checkpoint::<T>::load(&latest_path)?;
        if ck.config.network != cfg.network {
            return Err(Error::Config {
                key: "network".into(),
                message: "differs from the network in the checkpoint being resumed".into(),
            });
        }
        restore(&mut model, &mut optimizer, &ck)?;
        start = ck.iteration;
        best = ck.best;
        log::info!("resuming from iteration {start}");
    }

    let record = RunRecord {
        crate_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        precision: cfg.precision,
        started_at_iteration: start,
        config: cfg,
    };
    fs::write(out.join(RUN_RECORD), serde_json::to_string_pretty(&record)?)?;

    let mut train_log = open_log::<TrainRow>(&out.join(TRAIN_LOG), start, |r| r.iter)?;
    let mut val_log = open_log::<ValRow>(&out.join(VAL_LOG), start, |r| r.iter)?;
    let end = opts.stop_after.map_or(cfg.t_max, |s| s.min(cfg.t_max)).max(start);
    let every = cfg.validation_every();
    let mut last = None;

    let save = |model: &TDNet<T>, optimizer: &Sgd<T>, iteration: usize, best: Option<BestScore>, path: &Path| {
        Checkpoint {
            config: cfg.clone(),
            iteration,
            best,
            params: model.params().iter().map(|p| p.value.clone()).collect(),
            velocity: optimizer.velocity.clone(),
        }
        .save(path)
    };

    for t in start..end {
        let mut rng = iteration_rng(cfg.seed, t);
        let batch = sample_batch(train, cfg.patch_size, cfg.batch_size, &mut rng)?;
        let rec = train_step(&mut model, &mut optimizer, &batch, t, cfg, &mut rng)?;
        train_log.serialize(TrainRow::from(&rec))?;
        log::debug!("iter {t} loss {:.5} lr {:.6}", rec.loss.total, rec.lr);
        last = Some(rec);

        let done = t + 1;
        if done % every == 0 || done == cfg.t_max {
            if !val.is_empty() {
                let scores = SplitScores::from_reports(&evaluate_cases(&model, val, cfg.patch_size, cfg.inference_stride)?);
                val_log.serialize(ValRow {
                    iter: done,
                    mean_dsc: scores.mean_dsc,
                    mean_asd: scores.mean_asd,
                    mean_hd95: scores.mean_hd95,
                })?;
                val_log.flush()?;
                log::info!("iter {done}: loss {:.4}, val mean DSC {:.4}", rec.loss.total, scores.mean_dsc);
                if best.is_none_or(|b: BestScore| scores.mean_dsc > b.mean_dsc) {
                    best = Some(BestScore {
                        iteration: done,
                        mean_dsc: scores.mean_dsc,
                    });
                    save(&model, &optimizer, done, best, &best_path)?;
                }
            } else {
                log::info!("iter {done}: loss {:.4}", rec.loss.total);
            }
            train_log.flush()?;
            save(&model, &optimizer, done, best, &latest_path)?;
        }
    }
    train_log.flush()?;
    if end > start {
        save(&model, &optimizer, end, best, &latest_path)?;
    }
    Ok(TrainingSummary {
        output_dir: out,
        iterations: end,
        last,
        best,
    })
}

/// Copies checkpoint parameters (and momentum, when stored) into a model and optimizer.
pub fn restore<T: Scalar>(model: &mut TDNet<T>, optimizer: &mut Sgd<T>, ck: &Checkpoint<T>) -> Result<()> {
    load_params(model, &ck.params)?;
    if !ck.velocity.is_empty() {
        if ck.velocity.len() != optimizer.velocity.len()
            || ck.velocity.iter().zip(&optimizer.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint("optimizer state does not match the network".into()));
        }
        optimizer.velocity = ck.velocity.clone();
    }
    Ok(())
}

/// Overwrites model parameters, checking every tensor length.
pub fn load_params<T: Scalar>(model: &mut TDNet<T>, params: &[Vec<T>]) -> Result<()> {
    let mut dst = model.params_mut();
    if dst.len() != params.len() || dst.iter().zip(params).any(|(p, v)| p.value.len() != v.len()) {
        return Err(Error::Checkpoint("parameter shapes do not match the network".into()));
    }
    for (p, v) in dst.iter_mut().zip(params) {
        p.value.copy_from_slice(v);
    }
    Ok(())
}

/// Builds the checkpoint's network with its stored parameters.
pub fn model_from_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<TDNet<T>> {
    let mut model = TDNet::new(ck.config.network.clone(), ck.config.seed)?;
    load_params(&mut model, &ck.params)?;
    Ok(model)
}
