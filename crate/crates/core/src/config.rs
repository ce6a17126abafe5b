//! Run configuration: one TOML file with sections.
//!
//! ```toml
//! seed = 7
//!
//! [dataset]               # required
//! kind = "gaussian_mixture"
//! labeled = true
//! modes = [{ mean = [2.0, 0.0], sigma = 0.1 }, { mean = [-2.0, 0.0], sigma = 0.1 }]
//! train_size = 20000
//! real_size = 2000
//!
//! [model]
//! hidden = [64, 64, 64]
//!
//! [train]
//! steps = 500
//! ```
//!
//! Every other section and key is optional; see the README for the schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::eval::SweepConfig;
use crate::guidance::GuidanceConfig;
use crate::model::{Activation, Cond, ModelSpec};
use crate::sample::{Method, SamplerConfig};
use crate::train::TrainConfig;
use crate::uq::UqConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub source: ToyDataset,
    /// Points drawn for training.
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    /// Reference points drawn for evaluation.
    #[serde(default = "default_real_size")]
    pub real_size: usize,
}

fn default_train_size() -> usize {
    20_000
}

fn default_real_size() -> usize {
    2_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_frequencies: usize,
    pub cond_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = ModelSpec::new(1);
        ModelSection { hidden: s.hidden, activation: s.activation, time_frequencies: s.time_frequencies, cond_dim: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub method: Method,
    pub eps: f64,
    pub count: usize,
    /// Fixed class for conditional models; by default classes cycle with the sample index.
    pub class: Option<usize>,
    /// Sample from the null condition even when the model is conditional.
    pub unconditional: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SampleSection { steps: s.steps, method: s.method, eps: s.eps, count: 1000, class: None, unconditional: false }
    }
}

impl SampleSection {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps, method: self.method, eps: self.eps }
    }

    /// Condition for sample `index` given the model's class count.
    pub fn cond_for(&self, index: usize, classes: usize) -> Cond {
        if classes == 0 || self.unconditional {
            Cond::Null
        } else {
            Cond::Class(self.class.unwrap_or(index % classes))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub uq: UqConfig,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub eval: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        let classes = self.dataset.source.num_classes();
        ModelSpec {
            dim: self.dataset.source.dim(),
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
            time_frequencies: self.model.time_frequencies,
            num_classes: classes,
            cond_dim: if classes == 0 { 0 } else { self.model.cond_dim },
        }
    }

    /// Check every section and report all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut absorb = |r: Result<()>, section: &str| match r {
            Ok(()) => {}
            Err(Error::Config(m)) => errs.extend(m),
            Err(e) => errs.push(format!("{section}: {e}")),
        };
        absorb(self.dataset.source.validate(), "dataset");
        if self.dataset.source.validate().is_ok() {
            absorb(self.model_spec().validate(), "model");
        }
        absorb(self.train.validate(), "train");
        absorb(self.sample.sampler().validate(), "sample");
        absorb(self.uq.validate(), "uq");
        absorb(self.guidance.validate(), "guidance");
        absorb(self.eval.validate(), "eval");
        let classes = self.dataset.source.num_classes();
        if self.dataset.train_size == 0 {
            errs.push("dataset.train_size must be >= 1".into());
        }
        if self.dataset.real_size == 0 {
            errs.push("dataset.real_size must be >= 1".into());
        }
        if self.sample.count == 0 {
            errs.push("sample.count must be >= 1".into());
        }
        if let Some(c) = self.sample.class {
            if c >= classes {
                errs.push(format!("sample.class {c} out of range for a dataset with {classes} classes"));
            }
        }
        if self.guidance.cfg_enabled && classes == 0 {
            errs.push("guidance.cfg_enabled needs a labeled dataset".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
