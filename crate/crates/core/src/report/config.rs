//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ReportError;
use crate::attack::AttackSpec;
use crate::defense::DefensePolicy;
use crate::federated::FederatedConfig;
use crate::model::Objective;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// `train_files = [images, labels]`, `test_files = [images, labels]`.
    Mnist,
    /// `train_files` and `test_files` list binary batch files.
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    /// Image shape `[c, h, w]` of synthetic data.
    pub shape: [usize; 3],
    pub classes: usize,
    /// Synthetic sample counts, or caps on the samples read from files.
    pub train_size: usize,
    pub test_size: usize,
    /// Number of attacked training images.
    pub victims: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_files: Vec::new(),
            test_files: Vec::new(),
            shape: [1, 8, 8],
            classes: 10,
            train_size: 400,
            test_size: 100,
            victims: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    pub bias: bool,
    pub objective: Objective,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            batchnorm: false,
            bias: false,
            objective: Objective::CrossEntropy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VbSection {
    pub k: usize,
    pub beta: f64,
}

impl Default for VbSection {
    fn default() -> Self {
        Self { k: 16, beta: 0.001 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write original/reconstruction image pairs.
    pub images: bool,
    /// Write per-victim attack traces.
    pub traces: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            images: true,
            traces: true,
        }
    }
}

/// Everything one experiment needs. All randomness derives from `seed`; the
/// `seed` inside `federated` and the attack `label` are ignored, the latter
/// being taken from each victim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Variational bottleneck inserted before the head when present.
    pub vb: Option<VbSection>,
    pub defense: DefensePolicy,
    pub attack: AttackSpec,
    /// Federated training before the attack; the attack targets the initial
    /// model when absent.
    pub federated: Option<FederatedConfig>,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            vb: None,
            defense: DefensePolicy::None,
            attack: AttackSpec::default(),
            federated: None,
            output: OutputConfig::default(),
        }
    }
}

fn invalid(path: &str, reason: impl Into<String>) -> ReportError {
    ReportError::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(&path, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(".", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks value ranges and cross-section requirements.
    pub fn validate(&self) -> Result<(), ReportError> {
        let d = &self.data;
        if d.shape.contains(&0) {
            return Err(invalid("data.shape", "dimensions must be positive"));
        }
        if d.classes == 0 {
            return Err(invalid("data.classes", "must be positive"));
        }
        if d.train_size == 0 {
            return Err(invalid("data.train_size", "must be positive"));
        }
        if d.test_size == 0 {
            return Err(invalid("data.test_size", "must be positive"));
        }
        if d.victims == 0 {
            return Err(invalid("data.victims", "must be positive"));
        }
        if d.victims > d.train_size {
            return Err(invalid("data.victims", "cannot exceed train_size"));
        }
        match d.source {
            DataSource::Synthetic => {}
            DataSource::Mnist if d.train_files.len() != 2 || d.test_files.len() != 2 => {
                return Err(invalid("data.train_files", "mnist needs [images, labels] for train and test"));
            }
            DataSource::Cifar10 if d.train_files.is_empty() || d.test_files.is_empty() => {
                return Err(invalid("data.train_files", "cifar10 needs train and test batch files"));
            }
            _ => {}
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden", "needs at least one positive width"));
        }
        if let Some(vb) = &self.vb {
            if vb.k == 0 {
                return Err(invalid("vb.k", "must be positive"));
            }
            if !(vb.beta >= 0.0 && vb.beta.is_finite()) {
                return Err(invalid("vb.beta", "must be non-negative"));
            }
        }
        self.defense
            .validate()
            .map_err(|e| invalid("defense", e.to_string()))?;
        if self.defense.needs_vb() && self.vb.is_none() {
            return Err(invalid("vb", format!("required by defense {}", self.defense)));
        }
        self.attack
            .validate()
            .map_err(|e| invalid("attack", e.to_string()))?;
        if let Some(f) = &self.federated {
            f.validate().map_err(|e| invalid("federated", e.to_string()))?;
            if f.defense != DefensePolicy::None {
                return Err(invalid("federated.defense", "set the top-level defense instead"));
            }
            if f.clients > d.train_size {
                return Err(invalid("federated.clients", "more clients than training samples"));
            }
        }
        Ok(())
    }
}
