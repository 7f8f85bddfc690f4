//! Experiment configuration (TOML). Every section is optional; missing
//! fields take the shipped defaults.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::SamplingConfig;
use crate::model::ArchConfig;
use crate::numcodec::P10Config;
use crate::synthgen::{FeatureMask, Month, Profile};
use crate::train::{FinetuneConfig, TrainConfig};

/// A task named `C{k}_{MONTH}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskRef {
    pub k: u32,
    pub month: Month,
}

impl fmt::Display for TaskRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}_{}", self.k, self.month)
    }
}

impl FromStr for TaskRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("task id {s:?} must look like C3_JUN"));
        let (cell, month) = s.split_once('_').ok_or_else(bad)?;
        let k: u32 = cell.strip_prefix('C').and_then(|n| n.parse().ok()).filter(|&k| k >= 1).ok_or_else(bad)?;
        Ok(Self { k, month: month.parse()? })
    }
}

impl Serialize for TaskRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub datasets: String,
    pub checkpoints: String,
    pub reports: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self { datasets: "data".into(), checkpoints: "ckpts".into(), reports: "reports".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Records generated per task.
    pub n_per_task: usize,
    /// Seed of the task specs (shared by all tasks so spreads are ordered).
    pub task_seed: u64,
    /// Default generative profile.
    pub profile: Profile,
    /// Per-task profile overrides, e.g. `{ C2_JUN = "bimodal" }`.
    pub profiles: std::collections::BTreeMap<String, Profile>,
    /// Feature mask applied to x before training and prediction.
    pub mask: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_task: 5000,
            task_seed: 0,
            profile: Profile::LowNoise,
            profiles: Default::default(),
            mask: "full".into(),
        }
    }
}

impl DataConfig {
    pub fn profile_of(&self, task: TaskRef) -> Profile {
        self.profiles.get(&task.to_string()).copied().unwrap_or(self.profile)
    }

    pub fn feature_mask(&self) -> Result<FeatureMask> {
        FeatureMask::parse(&self.mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskLists {
    pub pretrain: Vec<TaskRef>,
    pub eval: Vec<TaskRef>,
}

impl Default for TaskLists {
    fn default() -> Self {
        let jun = |k| TaskRef { k, month: Month::Jun };
        Self { pretrain: (1..=4).map(jun).collect(), eval: vec![jun(5)] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Pretrain on the first N listed tasks for each N; empty means all.
    pub task_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Checkpoint directory (relative to the output root) to start from;
    /// empty selects the best checkpoint of the largest pretraining run.
    pub from: String,
    pub examples_grid: Vec<usize>,
    pub seeds: usize,
    /// Samples per test input when scoring grid entries.
    pub eval_samples: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { from: String::new(), examples_grid: vec![0, 4, 8, 16, 32, 64, 128, 256, 512], seeds: 3, eval_samples: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Checkpoint directory relative to the output root; empty selects the
    /// best checkpoint of the largest pretraining run.
    pub checkpoint: String,
    pub split: crate::synthgen::Split,
    pub dump_samples: bool,
    /// Filter samples to each task's valid range instead of
    /// `sampling.valid_range`.
    pub task_valid_range: bool,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { checkpoint: String::new(), split: crate::synthgen::Split::Test, dump_samples: true, task_valid_range: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Checkpoint of a model trained on empty inputs; enables R²_NLL.
    pub null_checkpoint: String,
    pub histogram_bins: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { null_checkpoint: String::new(), histogram_bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrids {
    /// Encoder/decoder splits such as `2E2D`.
    pub arch_splits: Vec<String>,
    pub embed_dims: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub feature_masks: Vec<String>,
    pub learning_rates: Vec<f64>,
    /// Pretraining steps whose checkpoints are fine-tuned in the
    /// checkpoint scan.
    pub checkpoint_steps: Vec<u64>,
    /// Training budget of each grid point.
    pub train: TrainConfig,
    /// Fine-tuning budget for the LR and checkpoint scans.
    pub finetune: FinetuneConfig,
    pub eval_samples: usize,
}

impl Default for AblationGrids {
    fn default() -> Self {
        Self {
            arch_splits: ["0E4D", "1E3D", "2E2D", "3E1D"].map(String::from).to_vec(),
            embed_dims: vec![32, 64, 96],
            seq_lens: vec![256, 512, 1024],
            feature_masks: ["CR", "R", "WR"].map(String::from).to_vec(),
            learning_rates: vec![1e-5, 5e-5, 2e-4, 1e-3],
            checkpoint_steps: vec![200, 400, 800],
            train: TrainConfig { max_steps: 800, ..TrainConfig::default() },
            finetune: FinetuneConfig { max_epochs: 10, ..FinetuneConfig::default() },
            eval_samples: 16,
        }
    }
}

/// Parses `aEbD` into (encoder, decoder) layer counts.
pub fn parse_split(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("architecture split {s:?} must look like 2E2D"));
    let (e, rest) = s.split_once('E').ok_or_else(bad)?;
    let d = rest.strip_suffix('D').ok_or_else(bad)?;
    let e = e.parse().map_err(|_| bad())?;
    let d: usize = d.parse().map_err(|_| bad())?;
    if d == 0 {
        return Err(bad());
    }
    Ok((e, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run seed; copied into `arch.seed`, `train.seed` and `finetune.seed`
    /// and used for sampling.
    pub seed: u64,
    pub paths: Paths,
    pub p10: P10Config,
    pub data: DataConfig,
    pub tasks: TaskLists,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    pub finetune_grid: FinetuneSection,
    pub sampling: SamplingConfig,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
    pub ablation: AblationGrids,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p10 = P10Config::default();
        Self {
            seed: 0,
            paths: Paths::default(),
            p10,
            data: DataConfig::default(),
            tasks: TaskLists::default(),
            arch: ArchConfig { vocab_size: crate::textenc::Vocabulary::size_for(&p10), ..ArchConfig::default() },
            train: TrainConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneConfig::default(),
            finetune_grid: FinetuneSection::default(),
            sampling: SamplingConfig::default(),
            predict: PredictSection::default(),
            evaluate: EvaluateSection::default(),
            ablation: AblationGrids::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Config(format!("line {line}: {}", e.message().trim()))
        })?;
        cfg.validate()?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    /// Sets the run seed and propagates it to the component seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.arch.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.p10.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.sampling.validate()?;
        self.data.feature_mask()?;
        let vocab = crate::textenc::Vocabulary::size_for(&self.p10);
        if self.arch.vocab_size != vocab {
            return Err(Error::Config(format!(
                "arch.vocab_size {} does not match the P10 vocabulary size {vocab}",
                self.arch.vocab_size
            )));
        }
        if self.arch.max_decoder_len < self.p10.sequence_len() {
            return Err(Error::Config(format!(
                "max_decoder_len {} is shorter than the {}-token target",
                self.arch.max_decoder_len,
                self.p10.sequence_len()
            )));
        }
        if self.data.n_per_task < 10 {
            return Err(Error::Config("data.n_per_task must be >= 10".into()));
        }
        for key in self.data.profiles.keys() {
            key.parse::<TaskRef>()?;
        }
        for s in &self.ablation.arch_splits {
            parse_split(s)?;
        }
        for m in &self.ablation.feature_masks {
            FeatureMask::parse(m)?;
        }
        Ok(())
    }

    /// Pretraining and evaluation tasks, deduplicated in order.
    pub fn all_tasks(&self) -> Vec<TaskRef> {
        let mut out: Vec<TaskRef> = Vec::new();
        for t in self.tasks.pretrain.iter().chain(&self.tasks.eval) {
            if !out.contains(t) {
                out.push(*t);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn shipped_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.sampling.num_samples, 128);
        assert_eq!(c.finetune.learning_rate, 5e-5);
        assert_eq!(c.finetune.max_epochs, 200);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.eval_every, 200);
        assert_eq!(c.train.warmup_steps, 100);
        assert_eq!(c.train.early_stop_patience, 5);
        assert_eq!(c.p10.mantissa_digits, 4);
        assert_eq!(c.arch.vocab_size, 312);
    }

    #[test]
    fn partial_files_and_errors() {
        let c = ExperimentConfig::from_toml(
            "[tasks]\npretrain = [\"C2_NOV\"]\neval = [\"C1_JUN\", \"C2_NOV\"]\n[train]\nmax_steps = 7\n[data]\nprofiles = { C1_JUN = \"bimodal\" }\n",
        )
        .unwrap();
        assert_eq!(c.train.max_steps, 7);
        assert_eq!(c.all_tasks().iter().map(|t| t.to_string()).collect::<Vec<_>>(), ["C2_NOV", "C1_JUN"]);
        assert_eq!(c.data.profile_of("C1_JUN".parse().unwrap()), Profile::Bimodal);
        assert_eq!(c.data.profile_of("C2_NOV".parse().unwrap()), Profile::LowNoise);
        assert!(ExperimentConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[tasks]\neval = [\"X1\"]\n").is_err());
        assert!(ExperimentConfig::from_toml("[arch]\nvocab_size = 300\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nmask = \"Q\"\n").is_err());
    }

    #[test]
    fn split_parsing() {
        assert_eq!(parse_split("0E4D").unwrap(), (0, 4));
        assert_eq!(parse_split("12E3D").unwrap(), (12, 3));
        assert!(parse_split("2E0D").is_err());
        assert!(parse_split("2D2E").is_err());
    }
}
