//! Classifiers under test: a fully connected MLP and a small VGG-style CNN.
//!
//! Both map a `(B, C_in, H, W)` batch to `(B, num_classes)` logits. Softmax is
//! left to the losses. Hidden layers use ReLU.

pub mod checkpoint;

pub use checkpoint::{Container, FORMAT_VERSION, MAGIC};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    Mlp,
    VggSmall,
}

/// Layer plan of a classifier.
///
/// For [`Architecture::Mlp`], `widths` lists the hidden layer sizes. For
/// [`Architecture::VggSmall`], `widths` is the channel count of each
/// conv(3×3) → ReLU → max-pool(2×2) block and `dense` the hidden sizes of the
/// fully connected head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub dense: Vec<usize>,
    #[serde(default)]
    pub init_seed: u64,
}

const KERNEL: usize = 3;

impl ModelConfig {
    /// 784 → 256 → 128 → 10, about 235 k parameters.
    pub fn mlp_mnist() -> Self {
        Self {
            architecture: Architecture::Mlp,
            input_shape: [1, 28, 28],
            num_classes: 10,
            widths: vec![256, 128],
            dense: vec![],
            init_seed: 0,
        }
    }

    /// Conv blocks [32, 64, 128] and a 720-wide dense layer; about 1.58 M
    /// parameters on 3×32×32 input.
    pub fn vgg_small_cifar() -> Self {
        Self {
            architecture: Architecture::VggSmall,
            input_shape: [3, 32, 32],
            num_classes: 10,
            widths: vec![32, 64, 128],
            dense: vec![720],
            init_seed: 0,
        }
    }

    pub fn vgg_small_mnist() -> Self {
        Self {
            input_shape: [1, 28, 28],
            ..Self::vgg_small_cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has a zero axis", self.input_shape)));
        }
        if self.widths.contains(&0) || self.dense.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.architecture == Architecture::VggSmall {
            let [_, mut h, mut w] = self.input_shape;
            for _ in &self.widths {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!(
                        "{} pooling blocks do not fit input {:?}",
                        self.widths.len(),
                        self.input_shape
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in declaration order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let [c, h, w] = self.input_shape;
        let mut shapes = Vec::new();
        let mut features = c * h * w;
        let hidden: &[usize] = match self.architecture {
            Architecture::Mlp => &self.widths,
            Architecture::VggSmall => {
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for (i, &out) in self.widths.iter().enumerate() {
                    shapes.push((format!("conv{i}.weight"), vec![out, ch, KERNEL, KERNEL]));
                    shapes.push((format!("conv{i}.bias"), vec![out]));
                    ch = out;
                    hh /= 2;
                    ww /= 2;
                }
                features = ch * hh * ww;
                &self.dense
            }
        };
        for (i, &out) in hidden.iter().chain(std::iter::once(&self.num_classes)).enumerate() {
            shapes.push((format!("fc{i}.weight"), vec![features, out]));
            shapes.push((format!("fc{i}.bias"), vec![out]));
            features = out;
        }
        Ok(shapes)
    }

    /// Total scalar parameter count, computed without allocating.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
}

/// A classifier: its layer plan and parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedParam>,
}

/// He-initialized model: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let shapes = config.param_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        params.push(NamedParam {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    let mut config = config.clone();
    config.init_seed = seed;
    Ok(Model { config, params })
}

impl Model {
    /// Builds a model from explicit parameters, checked against the config.
    pub fn from_params(config: ModelConfig, params: Vec<NamedParam>) -> Result<Self> {
        let shapes = config.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Pushes every parameter onto `tape`, tracked when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(trainable)))
            .collect()
    }

    /// Records the forward pass of `input` using parameters previously bound
    /// with [`Model::bind`].
    pub fn forward(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::Dimension(format!(
                "batch shape {shape:?} does not match (B, {:?})",
                self.config.input_shape
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound parameters for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        let batch = shape[0];
        let mut p = params.iter().copied();
        let mut next = move || p.next().expect("parameter count checked");

        let mut x = input;
        if self.config.architecture == Architecture::VggSmall {
            for _ in &self.config.widths {
                let (w, b) = (next(), next());
                x = tape.conv2d(x, w, KERNEL / 2)?;
                x = tape.add_bias(x, b)?;
                x = tape.relu(x);
                x = tape.max_pool2(x)?;
            }
        }
        let features: usize = tape.shape(x)[1..].iter().product();
        x = tape.reshape(x, &[batch, features])?;

        let layers = self.params.len() / 2 - self.config.widths.len() * usize::from(self.is_vgg());
        for layer in 0..layers {
            let (w, b) = (next(), next());
            x = tape.matmul(x, w)?;
            x = tape.add_bias(x, b)?;
            if layer + 1 < layers {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    fn is_vgg(&self) -> bool {
        self.config.architecture == Architecture::VggSmall
    }

    /// Logits for a batch without gradient tracking.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, x, &params)?;
        Ok(tape.value(y).clone())
    }

    /// Logits for a large batch, evaluated in chunks of `chunk` examples.
    pub fn logits_chunked(&self, batch: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = batch.shape()[0];
        let mut data = Vec::with_capacity(n * self.num_classes());
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            data.extend_from_slice(self.logits(&batch.slice_rows(start, end))?.data());
            start = end;
        }
        Tensor::new(vec![n, self.num_classes()], data)
    }

    /// SHA-256 over the configuration and parameter bits, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn to_container(&self) -> Container {
        Container {
            header: serde_json::to_string(&self.config).expect("config serializes"),
            blobs: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
        }
    }

    pub fn from_container(container: Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&container.header)?;
        let params = container
            .blobs
            .into_iter()
            .map(|(name, tensor)| NamedParam { name, tensor })
            .collect();
        Self::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}
