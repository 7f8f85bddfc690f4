//! Command-line pipeline: `gen-data`, `pretrain`, `finetune`, `predict`,
//! `evaluate` and `ablate`.
//!
//! Every command reads an [`ExperimentConfig`] and writes below an output
//! root laid out as
//!
//! ```text
//! <out>/data/     <TASK>.jsonl, <TASK>.task.toml, vocab.txt
//! <out>/ckpts/    pretrain_n<N>[_<mask>]/step_<S>/, .../best/, finetune_<TASK>_s<seed>/,
//!                 ablate_<kind>_<value>/, ablate_scan_base/
//! <out>/reports/  *_log.csv, predictions_<TASK>.csv, samples_<TASK>.csv,
//!                 eval_report.csv, residual_hist_<TASK>.csv, finetune.csv, ablate_<kind>.csv
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{parse_split, ExperimentConfig, TaskRef};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate_predictions, mse, residual_histogram, spearman, uncertainty_correlation_rows, write_histogram,
    write_reports,
};
use crate::infer::{
    nll_of, predict_records, read_predictions, write_predictions, write_samples, PredictionRow, SamplingConfig,
};
use crate::model::{init_model, ArchConfig};
use crate::synthgen::{
    generate_dataset, load_task_spec, make_task, save_task_spec, FeatureMask, RegressionDataset, Split, TaskSpec,
};
use crate::textenc::{truncate, TokenSequence, Vocabulary};
use crate::train::{
    append_log, finetune_logged, validation_loss, load_checkpoint, pretrain_observed, resume, save_checkpoint, FinetuneConfig,
    ModelCheckpoint, TrainConfig, TrainRun,
};

#[derive(Debug, Parser)]
#[command(name = "rlm", version, about = "Text-to-text regression over cluster-state descriptions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment config (TOML); shipped defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed, overriding the config's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate task datasets, task metadata and the vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on the configured task lists.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Feature mask applied to inputs (overrides `data.mask`).
        #[arg(long)]
        mask: Option<String>,
        /// Continue from the latest saved step of each run.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune over the example-count grid against random-init baselines.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint directory (overrides `finetune_grid.from`).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Sample predictions for the evaluation tasks.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (overrides `predict.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mask: Option<String>,
    },
    /// Score saved predictions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Null-model checkpoint for R²_NLL (overrides `evaluate.null_checkpoint`).
        #[arg(long)]
        null_checkpoint: Option<PathBuf>,
    },
    /// Run ablation grids.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grids to run; all when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        kind: Vec<AblationKind>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    Arch,
    Size,
    Seqlen,
    Features,
    Lr,
    Ckpt,
}

impl AblationKind {
    const ALL: [AblationKind; 6] = [Self::Arch, Self::Size, Self::Seqlen, Self::Features, Self::Lr, Self::Ckpt];

    fn name(self) -> &'static str {
        match self {
            Self::Arch => "arch",
            Self::Size => "size",
            Self::Seqlen => "seqlen",
            Self::Features => "features",
            Self::Lr => "lr",
            Self::Ckpt => "ckpt",
        }
    }
}

/// Parses arguments (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            e.exit();
        }
        _ => Error::Config(e.to_string().lines().next().unwrap_or("invalid arguments").to_string()),
    })?;
    execute(cli.command)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common } => gen_data(&Ctx::new(&common, None)?),
        Command::Pretrain { common, mask, resume } => cmd_pretrain(&Ctx::new(&common, mask)?, resume),
        Command::Finetune { common, from } => cmd_finetune(&Ctx::new(&common, None)?, from),
        Command::Predict { common, checkpoint, mask } => cmd_predict(&Ctx::new(&common, mask)?, checkpoint),
        Command::Evaluate { common, null_checkpoint } => cmd_evaluate(&Ctx::new(&common, None)?, null_checkpoint),
        Command::Ablate { common, kind } => {
            let kinds = if kind.is_empty() { AblationKind::ALL.to_vec() } else { kind };
            cmd_ablate(&Ctx::new(&common, None)?, &kinds)
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    vocab: Vocabulary,
}

impl Ctx {
    fn new(common: &Common, mask: Option<String>) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(m) = mask {
            cfg.data.mask = m;
        }
        cfg.validate()?;
        let vocab = Vocabulary::new(cfg.p10)?;
        Ok(Self { cfg, out: common.out.clone(), vocab })
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn data_dir(&self) -> Result<PathBuf> {
        self.dir(&self.cfg.paths.datasets)
    }

    fn ckpt_dir(&self) -> Result<PathBuf> {
        self.dir(&self.cfg.paths.checkpoints)
    }

    fn report_dir(&self) -> Result<PathBuf> {
        self.dir(&self.cfg.paths.reports)
    }

    fn mask(&self) -> FeatureMask {
        self.cfg.data.feature_mask().expect("validated")
    }

    fn task_spec(&self, t: TaskRef) -> Result<TaskSpec> {
        make_task(t.k, t.month, self.cfg.data.profile_of(t), self.cfg.data.task_seed)
    }

    /// Loads a generated dataset, failing with a pointer to `gen-data`.
    fn dataset(&self, t: TaskRef) -> Result<(TaskSpec, RegressionDataset)> {
        let dir = self.data_dir()?;
        let path = dir.join(format!("{t}.jsonl"));
        if !path.exists() {
            return Err(Error::Dataset(format!("{} not found; run gen-data first", path.display())));
        }
        let spec = load_task_spec(&dir.join(format!("{t}.task.toml")))?;
        Ok((spec, RegressionDataset::read_jsonl(&path)?))
    }

    fn sampling_for(&self, spec: &TaskSpec) -> SamplingConfig {
        if self.cfg.predict.task_valid_range {
            SamplingConfig { valid_range: spec.valid_range, ..self.cfg.sampling.clone() }
        } else {
            self.cfg.sampling.clone()
        }
    }

    fn pretrain_counts(&self) -> Vec<usize> {
        let n = self.cfg.tasks.pretrain.len();
        if self.cfg.pretrain.task_counts.is_empty() {
            vec![n]
        } else {
            self.cfg.pretrain.task_counts.clone()
        }
    }

    fn run_name(&self, n: usize) -> String {
        let mask = self.mask();
        if mask == FeatureMask::FULL {
            format!("pretrain_n{n}")
        } else {
            format!("pretrain_n{n}_{}", sanitize(&self.cfg.data.mask))
        }
    }

    /// Explicit checkpoint path, the configured one, or the best checkpoint
    /// of the largest pretraining run.
    fn resolve_ckpt(&self, explicit: Option<PathBuf>, configured: &str) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p);
        }
        if !configured.is_empty() {
            return Ok(self.out.join(configured));
        }
        let n = self.pretrain_counts().into_iter().max().unwrap_or(0);
        Ok(self.ckpt_dir()?.join(self.run_name(n)).join("best"))
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect()
}

fn dataset_seed(task_seed: u64, t: TaskRef) -> u64 {
    task_seed.wrapping_mul(1_000_003).wrapping_add(u64::from(t.k) * 16 + u64::from(t.month.number()))
}

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let dir = ctx.data_dir()?;
    for t in ctx.cfg.all_tasks() {
        let spec = ctx.task_spec(t)?;
        let data = generate_dataset(&spec, ctx.cfg.data.n_per_task, dataset_seed(ctx.cfg.data.task_seed, t))?;
        data.write_jsonl(&dir.join(format!("{t}.jsonl")))?;
        save_task_spec(&spec, &dir.join(format!("{t}.task.toml")))?;
        let (tr, va, te) = data.counts();
        println!("{t}: {tr}/{va}/{te} records, valid range [{}, {}]", spec.valid_range[0], spec.valid_range[1]);
    }
    ctx.vocab.save(&dir.join("vocab.txt"))
}

/// Runs (or resumes) a pretraining run, saving a checkpoint per evaluation
/// and appending to the run's log.
fn train_run(
    ctx: &Ctx,
    name: &str,
    datasets: &[RegressionDataset],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    resume_latest: bool,
) -> Result<TrainRun> {
    let run_dir = ctx.ckpt_dir()?.join(name);
    let log = ctx.report_dir()?.join(format!("{name}_log.csv"));
    let start = if resume_latest { latest_step(&run_dir)? } else { None };
    if start.is_none() {
        remove_if_exists(&log)?;
        if run_dir.exists() {
            fs::remove_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        }
    }
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let mut observer = |ck: &ModelCheckpoint, rows: &[crate::train::LogRow]| -> Result<()> {
        save_checkpoint(ck, &run_dir.join(format!("step_{:06}", ck.step)))?;
        append_log(&log, rows)?;
        for r in rows {
            eprintln!("[{name}] step {} {} loss {:.4} lr {:.2e}", r.step, r.split, r.loss, r.lr);
        }
        Ok(())
    };
    let run = match start {
        Some(path) => {
            let ck = load_checkpoint(&path)?;
            eprintln!("[{name}] resuming from step {}", ck.step);
            resume(&ck, datasets, cfg, &ctx.vocab, &mut observer)?
        }
        None => pretrain_observed(datasets, arch, cfg, &ctx.vocab, &mut observer)?,
    };
    save_checkpoint(run.best_checkpoint(), &run_dir.join("best"))?;
    Ok(run)
}

fn latest_step(run_dir: &Path) -> Result<Option<PathBuf>> {
    if !run_dir.exists() {
        return Ok(None);
    }
    let mut steps: Vec<(u64, PathBuf)> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            Some((name.strip_prefix("step_")?.parse().ok()?, e.path()))
        })
        .collect();
    steps.sort();
    Ok(steps.pop().map(|(_, p)| p))
}

fn pretrain_sets(ctx: &Ctx, n: usize, mask: FeatureMask) -> Result<Vec<RegressionDataset>> {
    let tasks = &ctx.cfg.tasks.pretrain;
    if n == 0 || n > tasks.len() {
        return Err(Error::Config(format!("pretrain task count {n} outside 1..={}", tasks.len())));
    }
    tasks[..n].iter().map(|&t| Ok(ctx.dataset(t)?.1.project(mask))).collect()
}

fn cmd_pretrain(ctx: &Ctx, resume_latest: bool) -> Result<()> {
    for n in ctx.pretrain_counts() {
        let sets = pretrain_sets(ctx, n, ctx.mask())?;
        let name = ctx.run_name(n);
        let run = train_run(ctx, &name, &sets, &ctx.cfg.arch, &ctx.cfg.train, resume_latest)?;
        println!(
            "{name}: best step {} val_loss {:.6} ({} checkpoints)",
            run.best_checkpoint().step,
            run.min_val_loss(),
            run.checkpoints.len()
        );
    }
    Ok(())
}

/// Test-split MSE and Spearman of a model on one task; NaN when sampling
/// or the rank correlation is undefined.
fn test_scores(ctx: &Ctx, ck: &ModelCheckpoint, spec: &TaskSpec, data: &RegressionDataset, samples: usize) -> (f64, f64) {
    let sampling = SamplingConfig { num_samples: samples, ..ctx.sampling_for(spec) };
    let recs = data.split(Split::Test);
    match predict_records(&ck.params, &ctx.vocab, &recs, &sampling, ctx.cfg.seed) {
        Ok(out) => {
            let ys: Vec<f64> = out.iter().map(|(r, _)| r.y_true).collect();
            let means: Vec<f64> = out.iter().map(|(r, _)| r.point_mean).collect();
            let medians: Vec<f64> = out.iter().map(|(r, _)| r.point_median).collect();
            (mse(&means, &ys).unwrap_or(f64::NAN), spearman(&medians, &ys).unwrap_or(f64::NAN))
        }
        Err(e) => {
            eprintln!("scoring failed: {e}");
            (f64::NAN, f64::NAN)
        }
    }
}

#[derive(Debug, Serialize)]
struct FinetuneRow {
    task_id: String,
    examples: usize,
    seed: u64,
    pretrained_val_loss: f64,
    pretrained_mse: f64,
    pretrained_spearman: f64,
    random_val_loss: f64,
    random_mse: f64,
    random_spearman: f64,
}

const FINETUNE_HEADER: [&str; 9] = [
    "task_id",
    "examples",
    "seed",
    "pretrained_val_loss",
    "pretrained_mse",
    "pretrained_spearman",
    "random_val_loss",
    "random_mse",
    "random_spearman",
];

fn random_init(arch: &ArchConfig, seed: u64, vocab: &Vocabulary) -> Result<ModelCheckpoint> {
    let params = init_model(&ArchConfig { seed, ..arch.clone() })?;
    Ok(ModelCheckpoint::new(params, *vocab.p10(), ChaCha8Rng::seed_from_u64(seed)))
}

fn cmd_finetune(ctx: &Ctx, from: Option<PathBuf>) -> Result<()> {
    let base_path = ctx.resolve_ckpt(from, &ctx.cfg.finetune_grid.from)?;
    let base = load_checkpoint(&base_path)?;
    let grid = &ctx.cfg.finetune_grid;
    let largest = grid.examples_grid.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    for &t in &ctx.cfg.tasks.eval {
        let (spec, data) = ctx.dataset(t)?;
        let data = data.project(ctx.mask());
        for &examples in &grid.examples_grid {
            for s in 0..grid.seeds as u64 {
                let seed = ctx.cfg.seed.wrapping_add(s);
                let ft = FinetuneConfig { examples, seed, ..ctx.cfg.finetune.clone() };
                let pre = finetune_logged(&base, &data, &ft, &ctx.vocab)?;
                let rnd = finetune_logged(&random_init(base.arch(), seed, &ctx.vocab)?, &data, &ft, &ctx.vocab)?;
                let val = |ck: &ModelCheckpoint| {
                    validation_loss(&ck.params, &data, &ctx.vocab, ft.max_eval_examples)
                };
                let (pm, ps) = test_scores(ctx, &pre.best, &spec, &data, grid.eval_samples);
                let (rm, rs) = test_scores(ctx, &rnd.best, &spec, &data, grid.eval_samples);
                if examples == largest {
                    save_checkpoint(&pre.best, &ctx.ckpt_dir()?.join(format!("finetune_{t}_s{seed}")))?;
                }
                eprintln!("[finetune {t}] examples {examples} seed {seed}: mse {pm:.1} vs random {rm:.1}");
                rows.push(FinetuneRow {
                    task_id: t.to_string(),
                    examples,
                    seed,
                    pretrained_val_loss: val(&pre.best)?,
                    pretrained_mse: pm,
                    pretrained_spearman: ps,
                    random_val_loss: val(&rnd.best)?,
                    random_mse: rm,
                    random_spearman: rs,
                });
            }
        }
    }
    let path = ctx.report_dir()?.join("finetune.csv");
    write_rows(&path, &FINETUNE_HEADER, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn cmd_predict(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let path = ctx.resolve_ckpt(checkpoint, &ctx.cfg.predict.checkpoint)?;
    let ck = load_checkpoint(&path)?;
    let reports = ctx.report_dir()?;
    for &t in &ctx.cfg.tasks.eval {
        let (spec, data) = ctx.dataset(t)?;
        let data = data.project(ctx.mask());
        let recs = data.split(ctx.cfg.predict.split);
        let out = predict_records(&ck.params, &ctx.vocab, &recs, &ctx.sampling_for(&spec), ctx.cfg.seed)?;
        let rows: Vec<PredictionRow> = out.iter().map(|(r, _)| r.clone()).collect();
        write_predictions(&reports.join(format!("predictions_{t}.csv")), &rows)?;
        if ctx.cfg.predict.dump_samples {
            let dump: Vec<(usize, &[f64])> = out.iter().map(|(r, res)| (r.example_id, res.samples.as_slice())).collect();
            write_samples(&reports.join(format!("samples_{t}.csv")), &dump)?;
        }
        println!("{t}: {} predictions from {}", rows.len(), path.display());
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, null_checkpoint: Option<PathBuf>) -> Result<()> {
    let null_path = match null_checkpoint {
        Some(p) => Some(p),
        None if !ctx.cfg.evaluate.null_checkpoint.is_empty() => Some(ctx.out.join(&ctx.cfg.evaluate.null_checkpoint)),
        None => None,
    };
    let null = null_path.map(|p| load_checkpoint(&p)).transpose()?;
    let reports_dir = ctx.report_dir()?;
    let mut reports = Vec::new();
    for &t in &ctx.cfg.tasks.eval {
        let (_, data) = ctx.dataset(t)?;
        let recs = data.split(ctx.cfg.predict.split);
        let pred_path = reports_dir.join(format!("predictions_{t}.csv"));
        if !pred_path.exists() {
            return Err(Error::Dataset(format!("{} not found; run predict first", pred_path.display())));
        }
        let rows = read_predictions(&pred_path)?;
        if rows.len() != recs.len() {
            return Err(Error::Dataset(format!(
                "{} holds {} predictions but the split has {} records",
                pred_path.display(),
                rows.len(),
                recs.len()
            )));
        }
        let xs: Vec<&str> = recs.iter().map(|r| r.x.as_str()).collect();
        let nll_null = match &null {
            Some(ck) => {
                let empty = truncate(&TokenSequence::default(), ck.params.arch.max_encoder_len);
                let total: f64 = recs.iter().map(|r| nll_of(&ck.params, &ctx.vocab, &empty, r.y)).sum::<Result<f64>>()?;
                Some(total / recs.len() as f64)
            }
            None => None,
        };
        let rep = evaluate_predictions(&rows, &xs, nll_null)?;
        let ys: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
        let means: Vec<f64> = rows.iter().map(|r| r.point_mean).collect();
        let hist = residual_histogram(&means, &ys, ctx.cfg.evaluate.histogram_bins)?;
        write_histogram(&reports_dir.join(format!("residual_hist_{t}.csv")), &hist)?;
        let uc = uncertainty_correlation_rows(&rows).map_or("undefined".to_string(), |v| format!("{v:.4}"));
        println!(
            "{t}: mse {:.2} spearman {:.4} r2_ev {:.4} r2_nll {:.4} uncertainty_corr {uc}",
            rep.mse, rep.spearman_rho, rep.r2_ev, rep.r2_nll
        );
        reports.push(rep);
    }
    write_reports(&reports_dir.join("eval_report.csv"), &reports)
}

#[derive(Debug, Serialize)]
struct AblationRow {
    grid: String,
    value: String,
    params: usize,
    best_step: u64,
    min_val_loss: f64,
    test_mse: f64,
}

const ABLATION_HEADER: [&str; 6] = ["grid", "value", "params", "best_step", "min_val_loss", "test_mse"];

fn cmd_ablate(ctx: &Ctx, kinds: &[AblationKind]) -> Result<()> {
    let ab = &ctx.cfg.ablation;
    let n = ctx.cfg.tasks.pretrain.len();
    let reports = ctx.report_dir()?;
    let base_arch = &ctx.cfg.arch;
    let pretrain_row = |ctx: &Ctx, kind: AblationKind, value: String, arch: &ArchConfig, mask: FeatureMask| {
        let sets = pretrain_sets(ctx, n, mask)?;
        let name = format!("ablate_{}_{}", kind.name(), sanitize(&value));
        let run = train_run(ctx, &name, &sets, arch, &ab.train, false)?;
        Ok::<_, Error>(AblationRow {
            grid: kind.name().into(),
            value,
            params: arch.parameter_count(),
            best_step: run.best_checkpoint().step,
            min_val_loss: run.min_val_loss(),
            test_mse: f64::NAN,
        })
    };
    let mut scan_base: Option<TrainRun> = None;
    for &kind in kinds {
        let mut rows = Vec::new();
        match kind {
            AblationKind::Arch => {
                for s in &ab.arch_splits {
                    let (e, d) = parse_split(s)?;
                    let arch = ArchConfig { encoder_layers: e, decoder_layers: d, ..base_arch.clone() };
                    rows.push(pretrain_row(ctx, kind, s.clone(), &arch, ctx.mask())?);
                }
            }
            AblationKind::Size => {
                for &d in &ab.embed_dims {
                    let arch = ArchConfig {
                        embed_dim: d,
                        mlp_dim: 4 * d,
                        head_dim: (d / base_arch.heads).max(1),
                        ..base_arch.clone()
                    };
                    rows.push(pretrain_row(ctx, kind, d.to_string(), &arch, ctx.mask())?);
                }
            }
            AblationKind::Seqlen => {
                for &len in &ab.seq_lens {
                    let arch = ArchConfig { max_encoder_len: len, ..base_arch.clone() };
                    rows.push(pretrain_row(ctx, kind, len.to_string(), &arch, ctx.mask())?);
                }
            }
            AblationKind::Features => {
                for m in &ab.feature_masks {
                    rows.push(pretrain_row(ctx, kind, m.clone(), base_arch, FeatureMask::parse(m)?)?);
                }
            }
            AblationKind::Lr | AblationKind::Ckpt => {
                let target = *ctx
                    .cfg
                    .tasks
                    .eval
                    .first()
                    .ok_or_else(|| Error::Config("the lr and ckpt scans need an eval task".into()))?;
                let (spec, data) = ctx.dataset(target)?;
                let data = data.project(ctx.mask());
                let sets = if scan_base.is_none() { pretrain_sets(ctx, n, ctx.mask())? } else { Vec::new() };
                if scan_base.is_none() {
                    scan_base = Some(train_run(ctx, "ablate_scan_base", &sets, base_arch, &ab.train, false)?);
                }
                let run = scan_base.as_ref().expect("set above");
                let points: Vec<(String, &ModelCheckpoint, f64)> = if kind == AblationKind::Lr {
                    ab.learning_rates.iter().map(|&lr| (lr.to_string(), run.best_checkpoint(), lr)).collect()
                } else {
                    ab.checkpoint_steps
                        .iter()
                        .map(|&step| {
                            let ck = run.checkpoints.iter().find(|c| c.step == step).ok_or_else(|| {
                                Error::Config(format!("no checkpoint at step {step}; use multiples of eval_every"))
                            })?;
                            Ok((step.to_string(), ck, ab.finetune.learning_rate))
                        })
                        .collect::<Result<_>>()?
                };
                for (value, ck, lr) in points {
                    let ft = FinetuneConfig { learning_rate: lr, seed: ctx.cfg.seed, ..ab.finetune.clone() };
                    let tuned = finetune_logged(ck, &data, &ft, &ctx.vocab)?;
                    let val = validation_loss(&tuned.best.params, &data, &ctx.vocab, ft.max_eval_examples)?;
                    let (m, _) = test_scores(ctx, &tuned.best, &spec, &data, ab.eval_samples);
                    rows.push(AblationRow {
                        grid: kind.name().into(),
                        value,
                        params: base_arch.parameter_count(),
                        best_step: ck.step,
                        min_val_loss: val,
                        test_mse: m,
                    });
                }
            }
        }
        let path = reports.join(format!("ablate_{}.csv", kind.name()));
        write_rows(&path, &ABLATION_HEADER, &rows)?;
        for r in &rows {
            println!("{} {}: min_val_loss {:.6} test_mse {}", r.grid, r.value, r.min_val_loss, r.test_mse);
        }
    }
    Ok(())
}
