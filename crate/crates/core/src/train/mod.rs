//! Multi-task pretraining, fine-tuning with restored optimizer state,
//! learning-rate schedules, early stopping and checkpoint persistence.

mod checkpoint;
mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, ArchConfig, Batch, ModelParams};
use crate::numcodec::{encode_y, P10Config};
use crate::synthgen::{Record, RegressionDataset, Split};
use crate::textenc::{encode_text, truncate, TokenId, Vocabulary, BOS, EOS};

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, FORMAT_VERSION};
pub use optim::AdamState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then `base_lr * sqrt(warmup / step)`.
    InverseSqrt,
    /// Inverse-sqrt multiplied by `decay_factor^k`, where `k` counts the
    /// completed `steps_per_decay` blocks inside the current cycle.
    Cyclic { decay_factor: f64, steps_per_decay: u64, steps_per_cycle: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub eval_every: u64,
    /// Consecutive evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Validation records scored per evaluation (evenly strided subset).
    pub max_eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 2e-3,
            warmup_steps: 100,
            max_steps: 2000,
            eval_every: 200,
            early_stop_patience: 5,
            seed: 0,
            schedule: Schedule::InverseSqrt,
            grad_clip: 1.0,
            max_eval_examples: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if let Schedule::Cyclic { decay_factor, steps_per_decay, steps_per_cycle } = self.schedule {
            if steps_per_decay == 0 || steps_per_cycle == 0 || !(decay_factor > 0.0) {
                return Err(Error::Config("cyclic schedule needs positive decay parameters".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Number of training records taken from the target task.
    pub examples: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub max_eval_examples: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            max_epochs: 200,
            examples: 512,
            early_stop_patience: 5,
            batch_size: 32,
            seed: 0,
            grad_clip: 1.0,
            max_eval_examples: 500,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("batch_size and early_stop_patience must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("invalid learning_rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps;
    let base = if w == 0 {
        cfg.base_lr
    } else if step < w {
        cfg.base_lr * step as f64 / w as f64
    } else {
        cfg.base_lr * (w as f64 / step as f64).sqrt()
    };
    match cfg.schedule {
        Schedule::InverseSqrt => base,
        Schedule::Cyclic { decay_factor, steps_per_decay, steps_per_cycle } => {
            if step < w {
                return base;
            }
            let k = ((step - w) % steps_per_cycle) / steps_per_decay;
            base * decay_factor.powi(k as i32)
        }
    }
}

/// One encoded record: encoder ids, decoder input `BOS + y` and targets
/// `y + EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub enc: Vec<TokenId>,
    pub dec_in: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

pub fn encode_example(x: &str, y: f64, vocab: &Vocabulary, max_encoder_len: usize) -> Result<Example> {
    let enc = truncate(&encode_text(x, vocab), max_encoder_len.max(1)).ids;
    let enc = if max_encoder_len == 0 { Vec::new() } else { enc };
    let yt = vocab.encode_p10(&encode_y(y, vocab.p10())?);
    let mut dec_in = Vec::with_capacity(yt.len() + 1);
    dec_in.push(BOS);
    dec_in.extend_from_slice(&yt);
    let mut targets = yt;
    targets.push(EOS);
    Ok(Example { enc, dec_in, targets })
}

fn encode_records(records: &[&Record], vocab: &Vocabulary, max_encoder_len: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            encode_example(&r.x, r.y, vocab, max_encoder_len).map_err(|e| {
                Error::Dataset(format!("task {}: y = {} is not encodable: {e}", r.task_id, r.y))
            })
        })
        .collect()
}

fn batch_of<'e>(examples: impl IntoIterator<Item = &'e Example>) -> Batch {
    let mut b = Batch::default();
    for ex in examples {
        b.push(ex.enc.clone(), ex.dec_in.clone(), ex.targets.clone());
    }
    b
}

/// Evenly strided subset of at most `cap` records.
fn strided(records: Vec<&Record>, cap: usize) -> Vec<&Record> {
    if records.len() <= cap {
        return records;
    }
    (0..cap).map(|i| records[i * records.len() / cap]).collect()
}

const EVAL_CHUNK: usize = 32;

/// Mean per-example cross-entropy over the y tokens of `examples`.
pub fn eval_loss(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Dataset("no examples to evaluate".into()));
    }
    let net = params.net();
    let mut total = 0.0f64;
    for chunk in examples.chunks(EVAL_CHUNK) {
        total += net.batch_loss(&batch_of(chunk))? as f64 * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Mean validation loss of `params` over a dataset's validation split.
pub fn validation_loss(
    params: &ModelParams,
    data: &RegressionDataset,
    vocab: &Vocabulary,
    max_examples: usize,
) -> Result<f64> {
    let recs = strided(data.split(Split::Val), max_examples);
    eval_loss(params, &encode_records(&recs, vocab, params.arch.max_encoder_len)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,split,loss,lr";

/// Appends rows to a `step,split,loss,lr` CSV, writing the header when the
/// file is new or empty.
pub fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(LOG_HEADER);
        s.push('\n');
    }
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.loss, r.lr));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != LOG_HEADER {
        return Err(Error::Dataset(format!("{}: expected header {LOG_HEADER}", path.display())));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Dataset(format!("{}: bad {what} in {:?}", path.display(), rec));
        out.push(LogRow {
            step: rec[0].parse().map_err(|_| bad("step"))?,
            split: rec[1].parse().map_err(|_| bad("split"))?,
            loss: rec[2].parse().map_err(|_| bad("loss"))?,
            lr: rec[3].parse().map_err(|_| bad("lr"))?,
        });
    }
    Ok(out)
}

/// Checkpoints taken at every evaluation, with the best-validation one
/// flagged.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<ModelCheckpoint>,
    pub best: usize,
    pub log: Vec<LogRow>,
}

impl TrainRun {
    pub fn best_checkpoint(&self) -> &ModelCheckpoint {
        &self.checkpoints[self.best]
    }

    pub fn last_checkpoint(&self) -> &ModelCheckpoint {
        self.checkpoints.last().expect("a run holds at least one checkpoint")
    }

    pub fn min_val_loss(&self) -> f64 {
        self.best_checkpoint().val_loss.unwrap_or(f64::NAN)
    }
}

/// Called after each evaluation with the new checkpoint and its log rows.
pub type Observer<'o> = dyn FnMut(&ModelCheckpoint, &[LogRow]) -> Result<()> + 'o;

pub(crate) fn check_compat(params: &ModelParams, p10: &P10Config, vocab: &Vocabulary) -> Result<()> {
    if params.arch.vocab_size != vocab.size() {
        return Err(Error::Compatibility(format!(
            "model vocab_size {} differs from vocabulary size {}",
            params.arch.vocab_size,
            vocab.size()
        )));
    }
    if p10 != vocab.p10() {
        return Err(Error::Compatibility(format!("checkpoint P10 config {p10:?} differs from {:?}", vocab.p10())));
    }
    Ok(())
}

fn check_splits(datasets: &[RegressionDataset]) -> Result<()> {
    if datasets.is_empty() {
        return Err(Error::Dataset("no datasets to train on".into()));
    }
    for d in datasets {
        let (tr, va, _) = d.counts();
        if tr == 0 || va == 0 {
            return Err(Error::Dataset(format!(
                "dataset {:?} needs train and validation records (has {tr}/{va})",
                d.task_ids()
            )));
        }
    }
    Ok(())
}

/// Trains a freshly initialized model on the union of the datasets' train
/// splits.
pub fn pretrain(
    datasets: &[RegressionDataset],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<TrainRun> {
    pretrain_observed(datasets, arch, cfg, vocab, &mut |_, _| Ok(()))
}

pub fn pretrain_observed(
    datasets: &[RegressionDataset],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let params = init_model(arch)?;
    let start = ModelCheckpoint::new(params, *vocab.p10(), ChaCha8Rng::seed_from_u64(cfg.seed));
    run_training(start, datasets, cfg, vocab, observer)
}

/// Continues a pretraining run from one of its checkpoints. With the same
/// data and config the subsequent checkpoints equal the uninterrupted run's.
pub fn resume(
    ckpt: &ModelCheckpoint,
    datasets: &[RegressionDataset],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    cfg.validate()?;
    run_training(ckpt.clone(), datasets, cfg, vocab, observer)
}

fn run_training(
    mut ck: ModelCheckpoint,
    datasets: &[RegressionDataset],
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    check_compat(&ck.params, &ck.p10, vocab)?;
    check_splits(datasets)?;
    let max_len = ck.params.arch.max_encoder_len;
    let train_recs: Vec<&Record> = datasets.iter().flat_map(|d| d.split(Split::Train)).collect();
    let train = encode_records(&train_recs, vocab, max_len)?;
    let val_recs: Vec<&Record> = datasets.iter().flat_map(|d| d.split(Split::Val)).collect();
    let val = encode_records(&strided(val_recs, cfg.max_eval_examples), vocab, max_len)?;

    let mut rng = ck.rng()?;
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    let mut since_eval = (0.0f64, 0u64);

    let mut evaluate = |ck: &mut ModelCheckpoint, since: (f64, u64), checkpoints: &mut Vec<ModelCheckpoint>, log: &mut Vec<LogRow>, rng: &ChaCha8Rng| -> Result<bool> {
        let v = eval_loss(&ck.params, &val)?;
        let lr = lr_schedule(ck.step, cfg);
        let mut rows = Vec::new();
        if since.1 > 0 {
            rows.push(LogRow { step: ck.step, split: Split::Train, loss: since.0 / since.1 as f64, lr });
        }
        rows.push(LogRow { step: ck.step, split: Split::Val, loss: v, lr });
        ck.val_loss = Some(v);
        match ck.best_val_loss {
            Some(b) if v >= b => ck.stale_evals += 1,
            _ => {
                ck.best_val_loss = Some(v);
                ck.stale_evals = 0;
            }
        }
        ck.set_rng(rng);
        observer(ck, &rows)?;
        log.extend(rows);
        checkpoints.push(ck.clone());
        Ok(ck.stale_evals >= cfg.early_stop_patience)
    };

    // a fresh checkpoint is scored before the first update
    if ck.val_loss.is_none() && evaluate(&mut ck, since_eval, &mut checkpoints, &mut log, &rng)? {
        return finish(checkpoints, log);
    }
    while ck.step < cfg.max_steps {
        let step = ck.step + 1;
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let batch = batch_of(idx.iter().map(|&i| &train[i]));
        let (loss, grad) = ck.params.net().loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {loss} on batch {step} (examples {idx:?})"),
            });
        }
        ck.optimizer.update(&mut ck.params.data, grad, lr_schedule(step, cfg) as f32, cfg.grad_clip);
        if !ck.params.all_finite() {
            return Err(Error::Training { step, msg: "parameters became non-finite".into() });
        }
        ck.step = step;
        since_eval.0 += loss as f64;
        since_eval.1 += 1;
        if step.is_multiple_of(cfg.eval_every) || step == cfg.max_steps {
            let stop = evaluate(&mut ck, since_eval, &mut checkpoints, &mut log, &rng)?;
            since_eval = (0.0, 0);
            if stop {
                break;
            }
        }
    }
    if checkpoints.is_empty() {
        checkpoints.push(ck);
    }
    finish(checkpoints, log)
}

fn finish(checkpoints: Vec<ModelCheckpoint>, log: Vec<LogRow>) -> Result<TrainRun> {
    let best = checkpoints
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.val_loss.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(i, _)| i);
    Ok(TrainRun { checkpoints, best, log })
}

/// Result of a fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub best: ModelCheckpoint,
    /// State after the final epoch.
    pub last: ModelCheckpoint,
    pub epochs_run: usize,
    pub log: Vec<LogRow>,
}

/// Fine-tunes a checkpoint on the first `cfg.examples` training records of
/// `data`, restoring its weights and optimizer state, and returns the
/// best-validation checkpoint (possibly the input itself).
pub fn finetune(
    ckpt: &ModelCheckpoint,
    data: &RegressionDataset,
    cfg: &FinetuneConfig,
    vocab: &Vocabulary,
) -> Result<ModelCheckpoint> {
    finetune_logged(ckpt, data, cfg, vocab).map(|r| r.best)
}

pub fn finetune_logged(
    ckpt: &ModelCheckpoint,
    data: &RegressionDataset,
    cfg: &FinetuneConfig,
    vocab: &Vocabulary,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    check_compat(&ckpt.params, &ckpt.p10, vocab)?;
    if cfg.max_epochs == 0 || cfg.examples == 0 {
        return Ok(FinetuneRun { best: ckpt.clone(), last: ckpt.clone(), epochs_run: 0, log: Vec::new() });
    }
    let max_len = ckpt.params.arch.max_encoder_len;
    let train_recs: Vec<&Record> = data.split(Split::Train).into_iter().take(cfg.examples).collect();
    if train_recs.is_empty() {
        return Err(Error::Dataset("fine-tuning needs at least one training record".into()));
    }
    let val_recs = data.split(Split::Val);
    if val_recs.is_empty() {
        return Err(Error::Dataset("fine-tuning needs a validation split".into()));
    }
    let train = encode_records(&train_recs, vocab, max_len)?;
    let val = encode_records(&strided(val_recs, cfg.max_eval_examples), vocab, max_len)?;

    // Small sets are repeated to fill one batch.
    let pool: Vec<usize> = (0..train.len().max(cfg.batch_size)).map(|i| i % train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ck = ckpt.clone();
    let lr = cfg.learning_rate as f32;
    let v0 = eval_loss(&ck.params, &val)?;
    ck.val_loss = Some(v0);
    ck.best_val_loss = Some(v0);
    ck.stale_evals = 0;
    let mut best = ck.clone();
    let mut log = vec![LogRow { step: ck.step, split: Split::Val, loss: v0, lr: cfg.learning_rate }];
    let mut epochs_run = 0;
    for _ in 0..cfg.max_epochs {
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut n = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let step = ck.step + 1;
            let (loss, grad) = ck.params.net().loss_and_grad(&batch_of(chunk.iter().map(|&i| &train[i])))?;
            if !loss.is_finite() {
                return Err(Error::Training { step, msg: format!("non-finite loss {loss} during fine-tuning") });
            }
            ck.optimizer.update(&mut ck.params.data, grad, lr, cfg.grad_clip);
            ck.step = step;
            sum += loss as f64;
            n += 1;
        }
        epochs_run += 1;
        let v = eval_loss(&ck.params, &val)?;
        log.push(LogRow { step: ck.step, split: Split::Train, loss: sum / n as f64, lr: cfg.learning_rate });
        log.push(LogRow { step: ck.step, split: Split::Val, loss: v, lr: cfg.learning_rate });
        ck.val_loss = Some(v);
        ck.set_rng(&rng);
        if v < ck.best_val_loss.unwrap_or(f64::INFINITY) {
            ck.best_val_loss = Some(v);
            ck.stale_evals = 0;
            best = ck.clone();
        } else {
            ck.stale_evals += 1;
            if ck.stale_evals >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(FinetuneRun { best, last: ck, epochs_run, log })
}

#[cfg(test)]
mod tests;
