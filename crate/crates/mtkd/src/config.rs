//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use mtkd_core::adam::AdamConfig;
use mtkd_core::distill::DistillSpec;
use mtkd_core::encoder::{EncoderConfig, Pooling};
use mtkd_core::tasks::TaskSpec;
use serde::{Deserialize, Serialize};

use crate::variant::Variant;
use crate::{Error, Result};

/// Environment variable that replaces `out_dir`; nothing else can be set
/// from the environment.
pub const OUT_DIR_ENV: &str = "MTKD_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; repeat `r` runs with `seed + r`.
    pub seed: u64,
    pub repeats: usize,
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Fill the `wall_clock_s` report column. Off keeps reports byte-stable.
    pub record_wall_clock: bool,
    /// Variants run by `ablate`.
    pub variants: Vec<String>,
    pub task: TaskSpec,
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub head: HeadConfig,
    pub distill: DistillSpec,
    pub diversity: Diversity,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub pooling: Pooling,
    pub query_dim: usize,
    pub init_std: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Attentive,
            query_dim: 32,
            init_std: 0.1,
        }
    }
}

/// How teachers are made to differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Diversity {
    /// Fraction of the training set each teacher trains on.
    pub shard_fraction: f64,
    /// Token dropout rate of teacher `i` is `token_dropout[i % len]`.
    pub token_dropout: Vec<f64>,
    /// Size of each teacher's private warm-up corpus, drawn from the task
    /// distribution and never shown to the student. 0 warms up on the
    /// teacher's view of the training set instead.
    pub pretrain_examples: usize,
    /// Teacher given noisy labels in the `noisy` setups.
    pub noisy_teacher: usize,
    pub noise_rate: f64,
}

impl Default for Diversity {
    fn default() -> Self {
        Self {
            shard_fraction: 0.7,
            token_dropout: vec![0.0, 0.1, 0.2],
            pretrain_examples: 2000,
            noisy_teacher: 2,
            noise_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub teacher_lr: f64,
    /// Learning rate of the pooling/prediction layers while finetuning
    /// teachers.
    pub head_lr: f64,
    pub student_lr: f64,
    pub adam: AdamConfig,
    /// Independent warm-up of each teacher with a private head, before
    /// co-finetuning or separate finetuning. 0 starts from random weights.
    pub pretrain_epochs: usize,
    pub cofinetune_epochs: usize,
    /// Leading finetuning epochs that train only the freshly initialized
    /// head, with the warmed-up encoders held fixed.
    pub head_warmup_epochs: usize,
    pub distill_epochs: usize,
    /// Epochs without a dev-accuracy improvement before stopping.
    pub patience: usize,
    /// Teacher whose embeddings and layers seed the student.
    pub student_from: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            teacher_lr: 1e-3,
            head_lr: 1e-2,
            student_lr: 1e-3,
            adam: AdamConfig::default(),
            pretrain_epochs: 2,
            cofinetune_epochs: 20,
            head_warmup_epochs: 3,
            distill_epochs: 30,
            patience: 5,
            student_from: 0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let teacher = EncoderConfig::default();
        let student = EncoderConfig {
            num_layers: 2,
            ..teacher.clone()
        };
        Self {
            seed: 0,
            repeats: 5,
            out_dir: PathBuf::from("runs"),
            batch_size: 32,
            eval_batch_size: 200,
            record_wall_clock: false,
            variants: ["full", "no-cofinetune", "uniform", "ensemble", "no-hidden", "no-distill", "no-task"]
                .map(String::from)
                .to_vec(),
            task: TaskSpec::default(),
            teacher,
            student,
            head: HeadConfig::default(),
            distill: DistillSpec::default(),
            diversity: Diversity::default(),
            train: TrainConfig::default(),
        }
    }
}

fn config_err(e: mtkd_core::Error) -> Error {
    match e {
        mtkd_core::Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    /// Parses `text`, applies the output-directory override and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            config.out_dir = PathBuf::from(dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// CRC-64 of the serialized config, leaving out where and how results
    /// are written.
    pub fn hash(&self) -> u64 {
        let canonical = Self {
            out_dir: PathBuf::new(),
            record_wall_clock: false,
            ..self.clone()
        };
        crate::checkpoint::CRC.checksum(canonical.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("repeats and batch sizes must be at least 1".into()));
        }
        self.task.validate().map_err(config_err)?;
        self.teacher.validate().map_err(config_err)?;
        self.student.validate().map_err(config_err)?;
        self.distill.validate().map_err(config_err)?;
        let d = &self.distill;
        if self.teacher.num_layers != d.teacher_layers() {
            return Err(Error::Config(format!(
                "teacher.num_layers is {} but T·K = {}·{} = {}",
                self.teacher.num_layers,
                d.layer_ratio,
                d.student_layers,
                d.teacher_layers()
            )));
        }
        if self.student.num_layers != d.student_layers {
            return Err(Error::Config(format!(
                "student.num_layers is {} but K = {}",
                self.student.num_layers, d.student_layers
            )));
        }
        let same_shape = |a: &EncoderConfig, b: &EncoderConfig| {
            (a.vocab_size, a.max_seq_len, a.hidden_dim, a.num_heads, a.ffn_dim, a.activation)
                == (b.vocab_size, b.max_seq_len, b.hidden_dim, b.num_heads, b.ffn_dim, b.activation)
        };
        if !same_shape(&self.teacher, &self.student) {
            return Err(Error::Config("student layers are copied from a teacher, so all dimensions but depth must match".into()));
        }
        if self.teacher.vocab_size < self.task.vocab_size || self.teacher.max_seq_len < self.task.max_seq_len {
            return Err(Error::Config("encoder vocabulary or length is smaller than the task's".into()));
        }
        if self.head.query_dim == 0 {
            return Err(Error::Config("head.query_dim must be positive".into()));
        }
        let div = &self.diversity;
        if !(div.shard_fraction > 0.0 && div.shard_fraction <= 1.0) {
            return Err(Error::Config("diversity.shard_fraction must lie in (0, 1]".into()));
        }
        if div.token_dropout.is_empty() || div.token_dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("diversity.token_dropout needs rates in [0, 1)".into()));
        }
        if div.noisy_teacher >= d.teachers || !(0.0..1.0).contains(&div.noise_rate) {
            return Err(Error::Config("diversity.noisy_teacher or noise_rate out of range".into()));
        }
        let t = &self.train;
        if ![t.teacher_lr, t.head_lr, t.student_lr].iter().all(|lr| *lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if t.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if t.student_from >= d.teachers {
            return Err(Error::Config("train.student_from must name a teacher".into()));
        }
        for v in &self.variants {
            Variant::parse(v, d.teachers)?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r))
    }
}
