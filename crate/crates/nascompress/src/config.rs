//! Run configuration: one JSON document carrying every stage's settings,
//! validated as a whole before any compute starts. Unknown keys are rejected
//! so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latency::{host_descriptor, LatencyProfile};
use crate::retrain::RetrainConfig;
use crate::selection::Constraint;
use crate::shrinktrain::{ShrinkConfig, ShrinkVariant, TrainSchedule};
use crate::teacher::TeacherConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSettings {
    pub hidden_sizes: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Supernet layers (L).
    pub layers: usize,
    /// Blocks (N).
    pub blocks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSettings {
    pub hidden: usize,
    pub sublayers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub mask_prob: f64,
    pub eval_every: usize,
    /// Plain-text corpus, one document per line; the bundled public-domain
    /// text is used when unset.
    pub corpus_path: Option<PathBuf>,
    /// Minimum relative dev-loss improvement the stage must reach.
    pub min_dev_improvement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkSettings {
    pub samples_per_bin: usize,
    pub removals_per_round: usize,
    pub terminal_survivors: usize,
    pub warmup_epochs: usize,
    pub val_batches: usize,
    pub num_bins: usize,
    pub variant: ShrinkVariant,
    pub op_prune_fraction: f64,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub train_trace_batches: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSettings {
    pub batch: usize,
    pub seq_len: usize,
    pub warmup_iters: usize,
    pub measure_iters: usize,
}

impl ProfileSettings {
    pub fn to_profile(&self) -> LatencyProfile {
        LatencyProfile {
            batch: self.batch,
            seq_len: self.seq_len,
            warmup_iters: self.warmup_iters,
            measure_iters: self.measure_iters,
            host: host_descriptor(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySettings {
    pub profiles: BTreeMap<String, ProfileSettings>,
    pub active_profile: String,
    /// Reuse a previously measured table instead of benchmarking; required
    /// for byte-reproducible pipeline reruns.
    pub table_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSettings {
    pub max_params: Option<u64>,
    pub max_latency_ms: Option<f64>,
    pub top: usize,
    pub unbounded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainSettings {
    pub lambda: f64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub teacher_finetune_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub mask_prob: f64,
    pub eval_every: usize,
    pub task_train_examples: usize,
    pub task_dev_examples: usize,
    pub min_dev_improvement: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub search: SearchSettings,
    pub teacher: TeacherSettings,
    pub shrink: ShrinkSettings,
    pub latency: LatencySettings,
    pub selection: SelectionSettings,
    pub retrain: RetrainSettings,
}

impl RunConfig {
    /// Laptop-scale defaults: a space of 1020 sub-architectures per block and
    /// a schedule that finishes in minutes.
    pub fn desk_default() -> Self {
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "desk".to_string(),
            ProfileSettings { batch: 1, seq_len: 32, warmup_iters: 20, measure_iters: 100 },
        );
        profiles.insert(
            "paper-flops".to_string(),
            ProfileSettings { batch: 1, seq_len: 128, warmup_iters: 20, measure_iters: 100 },
        );
        profiles.insert(
            "paper-latency".to_string(),
            ProfileSettings { batch: 128, seq_len: 128, warmup_iters: 10, measure_iters: 100 },
        );
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 17,
            search: SearchSettings {
                hidden_sizes: vec![16, 32, 64],
                kernels: vec![3, 5],
                layers: 8,
                blocks: 2,
            },
            teacher: TeacherSettings {
                hidden: 64,
                sublayers: 8,
                heads: 2,
                max_seq_len: 32,
                batch_size: 8,
                steps: 800,
                peak_lr: 1e-3,
                warmup_steps: 50,
                weight_decay: 0.01,
                dropout: 0.1,
                mask_prob: 0.15,
                eval_every: 100,
                corpus_path: None,
                min_dev_improvement: 0.30,
            },
            shrink: ShrinkSettings {
                samples_per_bin: 64,
                removals_per_round: 32,
                terminal_survivors: 3,
                warmup_epochs: 3,
                val_batches: 5,
                num_bins: 4,
                variant: ShrinkVariant::Arch,
                op_prune_fraction: 0.30,
                steps_per_epoch: 50,
                max_epochs: 60,
                peak_lr: 1e-3,
                warmup_steps: 60,
                weight_decay: 0.01,
                train_trace_batches: 48,
            },
            latency: LatencySettings {
                profiles,
                active_profile: "desk".to_string(),
                table_path: None,
            },
            selection: SelectionSettings {
                max_params: Some(120_000),
                max_latency_ms: None,
                top: 20,
                unbounded: false,
            },
            retrain: RetrainSettings {
                lambda: 0.5,
                pretrain_steps: 400,
                finetune_steps: 200,
                teacher_finetune_steps: 150,
                batch_size: 8,
                peak_lr: 1e-3,
                warmup_steps: 40,
                weight_decay: 0.01,
                dropout: 0.1,
                mask_prob: 0.15,
                eval_every: 100,
                task_train_examples: 256,
                task_dev_examples: 64,
                min_dev_improvement: 0.30,
            },
        }
    }

    /// The reference search-space dimensions (26 operations, 97650 canonical
    /// sub-architectures per block). Training at this scale is out of reach
    /// here; the preset exists for enumeration and counting.
    pub fn paper_dimensions() -> Self {
        let mut cfg = Self::desk_default();
        cfg.search = SearchSettings {
            hidden_sizes: vec![128, 192, 256, 384, 512],
            kernels: vec![3, 5, 7],
            layers: 24,
            blocks: 4,
        };
        cfg.shrink.samples_per_bin = 2000;
        cfg.shrink.removals_per_round = 1000;
        cfg.shrink.terminal_survivors = 10;
        cfg.shrink.num_bins = 10;
        cfg.selection.top = 100;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Cross-field checks, run before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        crate::searchspace::build_operation_set(&self.search.hidden_sizes, &self.search.kernels)?;
        if self.search.blocks == 0 || self.search.layers % self.search.blocks != 0 {
            return Err(Error::Config(format!(
                "layers {} must divide into blocks {}",
                self.search.layers, self.search.blocks
            )));
        }
        if self.teacher.sublayers % self.search.blocks != 0 {
            return Err(Error::Config(format!(
                "teacher sublayers {} must divide into blocks {}",
                self.teacher.sublayers, self.search.blocks
            )));
        }
        if self.teacher.sublayers % 2 != 0 {
            return Err(Error::Config("teacher sublayers must be even".into()));
        }
        if self.teacher.hidden % self.teacher.heads != 0 {
            return Err(Error::Config("teacher hidden must divide by heads".into()));
        }
        if self.teacher.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        self.shrink_config().validate()?;
        if self.shrink.steps_per_epoch == 0 || self.shrink.max_epochs == 0 {
            return Err(Error::Config("steps_per_epoch and max_epochs must be positive".into()));
        }
        if !self.latency.profiles.contains_key(&self.latency.active_profile) {
            return Err(Error::Config(format!(
                "active profile {:?} not among configured profiles",
                self.latency.active_profile
            )));
        }
        self.constraint().validate()?;
        if !(0.0..=1.0).contains(&self.retrain.lambda) {
            return Err(Error::Config("retrain lambda must lie in [0,1]".into()));
        }
        if self.retrain.task_train_examples < 2 || self.retrain.task_dev_examples < 2 {
            return Err(Error::Config("task needs at least two examples per split".into()));
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            hidden: self.teacher.hidden,
            sublayers: self.teacher.sublayers,
            heads: self.teacher.heads,
            max_seq_len: self.teacher.max_seq_len,
            batch_size: self.teacher.batch_size,
            steps: self.teacher.steps,
            peak_lr: self.teacher.peak_lr,
            warmup_steps: self.teacher.warmup_steps,
            weight_decay: self.teacher.weight_decay,
            dropout: self.teacher.dropout,
            mask_prob: self.teacher.mask_prob,
            eval_every: self.teacher.eval_every,
            seed: crate::subseed(self.seed, &[0x7e4c]),
        }
    }

    pub fn shrink_config(&self) -> ShrinkConfig {
        ShrinkConfig {
            samples_per_bin: self.shrink.samples_per_bin,
            removals_per_round: self.shrink.removals_per_round,
            terminal_survivors: self.shrink.terminal_survivors,
            warmup_epochs: self.shrink.warmup_epochs,
            val_batches: self.shrink.val_batches,
            num_bins: self.shrink.num_bins,
            variant: self.shrink.variant,
            op_prune_fraction: self.shrink.op_prune_fraction,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            steps_per_epoch: self.shrink.steps_per_epoch,
            max_epochs: self.shrink.max_epochs,
            peak_lr: self.shrink.peak_lr,
            warmup_steps: self.shrink.warmup_steps,
            weight_decay: self.shrink.weight_decay,
            train_trace_batches: self.shrink.train_trace_batches,
            mask_prob: self.teacher.mask_prob,
            seed: crate::subseed(self.seed, &[0x5e9d]),
        }
    }

    pub fn constraint(&self) -> Constraint {
        Constraint {
            max_params: self.selection.max_params,
            max_latency_ms: self.selection.max_latency_ms,
            top: self.selection.top,
            unbounded: self.selection.unbounded,
        }
    }

    pub fn retrain_config(&self) -> RetrainConfig {
        RetrainConfig {
            lambda: self.retrain.lambda,
            steps: self.retrain.pretrain_steps,
            batch_size: self.retrain.batch_size,
            peak_lr: self.retrain.peak_lr,
            warmup_steps: self.retrain.warmup_steps,
            weight_decay: self.retrain.weight_decay,
            dropout: self.retrain.dropout,
            mask_prob: self.retrain.mask_prob,
            eval_every: self.retrain.eval_every,
            seed: crate::subseed(self.seed, &[0x4e7a]),
        }
    }

    pub fn active_profile(&self) -> LatencyProfile {
        self.latency.profiles[&self.latency.active_profile].to_profile()
    }

    pub fn profile_named(&self, name: &str) -> Result<LatencyProfile> {
        self.latency
            .profiles
            .get(name)
            .map(|p| p.to_profile())
            .ok_or_else(|| Error::Config(format!("no latency profile named {name:?}")))
    }

    /// SHA-256 of the canonical JSON encoding; embedded in reports.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        RunConfig::desk_default().validate().unwrap();
        RunConfig::paper_dimensions().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::desk_default()).unwrap();
        v["surprise"] = serde_json::json!(1);
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }

    #[test]
    fn cross_field_checks_fire() {
        let mut cfg = RunConfig::desk_default();
        cfg.search.layers = 9; // 9 % 2 != 0
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk_default();
        cfg.shrink.removals_per_round = cfg.shrink.samples_per_bin;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk_default();
        cfg.retrain.lambda = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::desk_default();
        cfg.latency.active_profile = "nope".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::desk_default();
        let b = RunConfig::desk_default();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::desk_default();
        c.seed = 18;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = RunConfig::desk_default();
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }
}
