//! Config-file schema and flag merging.
//!
//! The config file is JSON; every field is optional and any value given on
//! the command line overrides the file. The fully-resolved configuration is
//! echoed into every artifact the run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use yopo_core::data::{Dataset, SyntheticSpec};
use yopo_core::dynamics::Activation;
use yopo_core::hamiltonian::LossFunction;
use yopo_core::{Direction, InitKind, Method, TrainConfig};

use crate::CliError;

/// Where a dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated on the fly from a synthetic spec.
    Synthetic(SyntheticSpec),
    /// A pair of IDX container files.
    Idx { images: PathBuf, labels: PathBuf },
    /// A dataset serialized as JSON (the `data gen` output format).
    Json { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset, CliError> {
        match self {
            DatasetSource::Synthetic(spec) => {
                yopo_core::data::gen_synthetic(spec).map_err(CliError::from)
            }
            DatasetSource::Idx { images, labels } => {
                let img = std::fs::read(images)
                    .map_err(|e| CliError::runtime(format!("reading {}: {e}", images.display())))?;
                let lbl = std::fs::read(labels)
                    .map_err(|e| CliError::runtime(format!("reading {}: {e}", labels.display())))?;
                Dataset::from_idx(&img, &lbl).map_err(CliError::from)
            }
            DatasetSource::Json { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::runtime(format!("parsing {}: {e}", path.display())))
            }
        }
    }
}

/// Train-command configuration: the trainer fields plus network architecture
/// and dataset sources. Serialized (fully resolved) into every artifact.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CliConfig {
    pub method: Option<String>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub r: Option<usize>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: Option<u64>,
    pub delayed_update: Option<bool>,
    pub direction: Option<Direction>,
    pub init: Option<InitKind>,
    pub project_each_step: Option<bool>,
    pub loss: Option<LossFunction>,
    pub eval_attack_steps: Option<usize>,
    pub eval_attack_step_size: Option<f64>,
    /// Hidden layer widths of the MLP built when no checkpoint is given.
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub net_seed: Option<u64>,
    pub init_checkpoint: Option<PathBuf>,
    pub dataset: Option<DatasetSource>,
    pub eval_dataset: Option<DatasetSource>,
    pub out_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config("config", format!("parsing {}: {e}", path.display())))
    }

    /// Overlays `other` (command-line values) on top of `self`.
    pub fn merge(mut self, other: CliConfig) -> Self {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if other.$field.is_some() { self.$field = other.$field; })*
            };
        }
        take!(
            method, m, n, r, alpha1, alpha2, lr_schedule, momentum, weight_decay, batch_size,
            epochs, epsilon, lambda, seed, delayed_update, direction, init, project_each_step,
            loss, eval_attack_steps, eval_attack_step_size, hidden, activation, net_seed,
            init_checkpoint, dataset, eval_dataset, out_dir
        );
        self
    }

    /// Builds the trainer configuration, applying defaults for absent fields.
    pub fn to_train_config(&self) -> Result<TrainConfig, CliError> {
        let method: Method = self
            .method
            .as_deref()
            .unwrap_or("natural")
            .parse()
            .map_err(CliError::from)?;
        let mut cfg = TrainConfig::new(method);
        cfg.m = self.m;
        cfg.n = self.n;
        cfg.r = self.r;
        if let Some(v) = self.alpha1 {
            cfg.alpha1 = v;
        }
        if let Some(v) = self.alpha2 {
            cfg.alpha2 = v;
        }
        if let Some(v) = &self.lr_schedule {
            cfg.lr_schedule = v.clone();
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.delayed_update {
            cfg.delayed_update = v;
        }
        if let Some(v) = self.direction {
            cfg.direction = v;
        }
        if let Some(v) = self.init {
            cfg.init = v;
        }
        if let Some(v) = self.project_each_step {
            cfg.project_each_step = v;
        }
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
        if let Some(v) = self.eval_attack_steps {
            cfg.eval_attack_steps = v;
        }
        if self.eval_attack_step_size.is_some() {
            cfg.eval_attack_step_size = self.eval_attack_step_size;
        }
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}
