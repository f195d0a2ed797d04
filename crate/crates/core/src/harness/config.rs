use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackKind, AttackLoss, AttackSpec};
use crate::data::{cifar10_paths, mnist_paths, DatasetName, NoiseSpec, Split};
use crate::losses::{DistanceMetric, LossSpec};
use crate::models::{Architecture, ModelConfig};
use crate::tensor::AdamConfig;
use crate::{Error, Result};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_TRAIN_SUBSET: usize = 10_000;
pub const DEFAULT_TEST_SUBSET: usize = 2_000;
pub const MNIST_EPSILONS: [f64; 4] = [0.05, 0.1, 0.2, 0.3];
pub const CIFAR_EPSILONS: [f64; 3] = [2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0];

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

/// One experiment: a dataset, an architecture, a training loss and the
/// evaluations to run on every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub name: DatasetName,
    pub dir: PathBuf,
    /// Leading train examples used; ignored when `full` is set.
    #[serde(default = "default_train_subset")]
    pub subset_size: usize,
    /// Leading test examples used; ignored when `full` is set.
    #[serde(default = "default_test_subset")]
    pub test_subset_size: usize,
    #[serde(default)]
    pub full: bool,
}

fn default_train_subset() -> usize {
    DEFAULT_TRAIN_SUBSET
}

fn default_test_subset() -> usize {
    DEFAULT_TEST_SUBSET
}

/// Architecture choice; unset layer lists fall back to the shipped presets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub widths: Option<Vec<usize>>,
    pub dense: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 5,
            batch_size: 128,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Budgets to sweep; defaults depend on the dataset.
    pub epsilon: Option<Vec<f64>>,
    /// Per-step size of PGD (and of I-FGSM unless `alpha` is set); `ε / 10` when unset.
    pub step_size: Option<f64>,
    /// Per-step size of I-FGSM.
    pub alpha: Option<f64>,
    pub steps: usize,
    pub random_start: bool,
    pub loss: AttackLoss,
    pub seed: u64,
    /// Attack only the first this-many test examples.
    pub max_examples: Option<usize>,
    /// Save every adversarial batch as a container file under `adversarial/`.
    pub dump_adversarial: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon: None,
            step_size: None,
            alpha: None,
            steps: 40,
            random_start: false,
            loss: AttackLoss::Ce,
            seed: 0,
            max_examples: None,
            dump_adversarial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub metric: DistanceMetric,
    /// Test examples fed to the PCA projection.
    pub pca_examples: usize,
    /// Budget of the adversarial points in the projection; largest grid ε when unset.
    pub pca_epsilon: Option<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            metric: DistanceMetric::Euclidean,
            pca_examples: 500,
            pca_epsilon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `dataset` read from `data_dir`, writing to `output`.
    pub fn new(dataset: DatasetName, data_dir: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            data: DataConfig {
                name: dataset,
                dir: data_dir.into(),
                subset_size: DEFAULT_TRAIN_SUBSET,
                test_subset_size: DEFAULT_TEST_SUBSET,
                full: false,
            },
            model: ModelSection::default(),
            loss: LossSpec::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            noise: NoiseSpec::default(),
            analysis: AnalysisConfig::default(),
            seeds: default_seeds(),
            output: OutputConfig { dir: output.into() },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let preset = match (self.model.architecture, self.data.name) {
            (Architecture::Mlp, DatasetName::Mnist) => ModelConfig::mlp_mnist(),
            (Architecture::Mlp, DatasetName::Cifar10) => ModelConfig {
                input_shape: DatasetName::Cifar10.input_shape(),
                ..ModelConfig::mlp_mnist()
            },
            (Architecture::VggSmall, DatasetName::Mnist) => ModelConfig::vgg_small_mnist(),
            (Architecture::VggSmall, DatasetName::Cifar10) => ModelConfig::vgg_small_cifar(),
        };
        ModelConfig {
            widths: self.model.widths.clone().unwrap_or(preset.widths),
            dense: self.model.dense.clone().unwrap_or(preset.dense),
            ..preset
        }
    }

    pub fn epsilons(&self) -> Vec<f64> {
        match (&self.attack.epsilon, self.data.name) {
            (Some(grid), _) => grid.clone(),
            (None, DatasetName::Mnist) => MNIST_EPSILONS.to_vec(),
            (None, DatasetName::Cifar10) => CIFAR_EPSILONS.to_vec(),
        }
    }

    /// Attack at budget `epsilon` with the configured kind and step rule.
    pub fn attack_spec(&self, epsilon: f64) -> AttackSpec {
        let step = self.attack.step_size.unwrap_or(epsilon / 10.0);
        let mut spec = match self.attack.kind {
            AttackKind::Fgsm => AttackSpec::fgsm(epsilon),
            AttackKind::Ifgsm => AttackSpec::ifgsm(epsilon, self.attack.alpha.unwrap_or(step), self.attack.steps),
            AttackKind::Pgd => AttackSpec::pgd(epsilon, step, self.attack.steps, self.attack.random_start),
        };
        spec.loss = self.attack.loss;
        spec.seed = self.attack.seed;
        spec
    }

    pub fn pca_epsilon(&self) -> Option<f64> {
        self.analysis.pca_epsilon.or_else(|| self.epsilons().last().copied())
    }

    pub fn train_size(&self) -> Option<usize> {
        (!self.data.full).then_some(self.data.subset_size)
    }

    pub fn test_size(&self) -> Option<usize> {
        (!self.data.full).then_some(self.data.test_subset_size)
    }

    pub fn data_files(&self) -> Vec<PathBuf> {
        let dir = &self.data.dir;
        let mut files = Vec::new();
        for split in [Split::Train, Split::Test] {
            match self.data.name {
                DatasetName::Mnist => {
                    let (images, labels) = mnist_paths(dir, split);
                    files.push(images);
                    files.push(labels);
                }
                DatasetName::Cifar10 => files.extend(cifar10_paths(dir, split)),
            }
        }
        files
    }

    /// Every problem with the configuration, in one pass.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for f in self.data_files() {
            if !f.is_file() {
                out.push(format!("data file {} does not exist", f.display()));
            }
        }
        if !self.data.full && (self.data.subset_size == 0 || self.data.test_subset_size == 0) {
            out.push("data.subset_size and data.test_subset_size must be positive".into());
        }
        if let Err(e) = self.model_config().validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.loss.validate() {
            out.push(e.to_string());
        }
        if self.train.batch_size == 0 {
            out.push("train.batch_size must be positive".into());
        }
        if let Err(e) = self.train.adam().validate() {
            out.push(e.to_string());
        }
        let grid = self.epsilons();
        if grid.is_empty() {
            out.push("attack.epsilon grid is empty".into());
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            out.push(format!("attack.epsilon grid {grid:?} is not strictly ascending"));
        }
        for &eps in &grid {
            if let Err(e) = self.attack_spec(eps).validate() {
                out.push(e.to_string());
            }
        }
        if self.attack.max_examples == Some(0) {
            out.push("attack.max_examples must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            out.push(format!("noise.rate {} outside [0, 1]", self.noise.rate));
        }
        if self.analysis.pca_examples < 2 {
            out.push("analysis.pca_examples must be at least 2".into());
        }
        if let Some(e) = self.analysis.pca_epsilon {
            if !(e >= 0.0 && e.is_finite()) {
                out.push(format!("analysis.pca_epsilon {e} must be a finite non-negative number"));
            }
        }
        if self.seeds.is_empty() {
            out.push("seeds must be non-empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            out.push("seeds contain duplicates".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Hash of everything that affects results (the output location does not).
    pub fn run_id(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;

    const MINIMAL: &str = r#"
        seeds = [3, 1]
        [data]
        dir = "/nonexistent"
        [output]
        dir = "out"
    "#;

    #[test]
    fn minimal_config_takes_protocol_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.data.subset_size, 10_000);
        assert_eq!(c.data.test_subset_size, 2_000);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.epsilons(), vec![0.05, 0.1, 0.2, 0.3]);
        let spec = c.attack_spec(0.2);
        assert_eq!(spec.kind, AttackKind::Pgd);
        assert_eq!(spec.steps, 40);
        assert!((spec.step_size - 0.02).abs() < 1e-15);
        assert_eq!(c.model_config(), ModelConfig::mlp_mnist());
        assert_eq!(c.seeds, vec![3, 1]);
    }

    #[test]
    fn full_config_round_trips() {
        let mut c = ExperimentConfig::new(DatasetName::Cifar10, "d", "o");
        c.model.architecture = Architecture::VggSmall;
        c.loss = LossSpec::drsl(0.5, DistanceMetric::Cosine);
        c.noise.rate = 0.8;
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.loss.kind, LossKind::Drsl);
        assert_eq!(back.epsilons().len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seeds", "sedes");
        assert!(ExperimentConfig::from_toml_str(&text).unwrap_err().is_config());
    }

    #[test]
    fn validation_collects_every_problem() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.seeds.clear();
        c.attack.epsilon = Some(vec![0.2, 0.1]);
        c.train.batch_size = 0;
        let p = c.problems();
        assert!(p.iter().any(|m| m.contains("does not exist")));
        assert!(p.iter().any(|m| m.contains("ascending")));
        assert!(p.iter().any(|m| m.contains("batch_size")));
        assert!(p.iter().any(|m| m.contains("seeds")));
        assert!(c.validate().unwrap_err().is_config());
    }

    #[test]
    fn run_id_ignores_output_dir_only() {
        let a = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.run_id(), b.run_id());
        b.loss.tau = 0.5;
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 16);
    }
}
