//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::path::{Path, PathBuf};

use drsl_core::data::{encode_mnist, mnist_paths, Dataset, DatasetName, Split};
use drsl_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Real datasets: `$DRSL_DATA_DIR`, else `data/` at the workspace root.
pub fn data_dir() -> PathBuf {
    std::env::var_os("DRSL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A learnable toy MNIST-format dataset: each class lights up its own
/// horizontal band of the 28×28 image, plus noise.
pub fn synthetic_mnist(n: usize, split: Split, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = r.gen_range(0..10);
        for row in 0..28 {
            for _ in 0..28 {
                let band = row / 3 == y;
                let base: f64 = if band { 0.8 } else { 0.05 };
                let v = (base + r.gen_range(-0.05..0.15)).clamp(0.0, 1.0);
                // stored as bytes, so quantize like the real files
                pixels.push((v * 255.0).round() / 255.0);
            }
        }
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, 1, 28, 28], pixels).unwrap(), labels, DatasetName::Mnist, split, 10).unwrap()
}

/// Writes synthetic train/test IDX files into `dir` under the standard names.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (split, n, seed) in [(Split::Train, train, 1), (Split::Test, test, 2)] {
        let (img, lab) = encode_mnist(&synthetic_mnist(n, split, seed));
        let (ip, lp) = mnist_paths(dir, split);
        std::fs::write(ip, img).unwrap();
        std::fs::write(lp, lab).unwrap();
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct OracleCase {
    pub logits: Vec<f64>,
    pub label: usize,
    pub ce: f64,
    pub gce: f64,
    #[serde(rename = "drsl_euclidean_0.5")]
    pub drsl_euclidean_half: f64,
    #[serde(rename = "drsl_cosine_0.5")]
    pub drsl_cosine_half: f64,
    #[serde(rename = "drsl_euclidean_1")]
    pub drsl_euclidean_one: f64,
    #[serde(rename = "drsl_cosine_1")]
    pub drsl_cosine_one: f64,
}

/// Reference values produced by `scripts/loss_oracle.py`.
pub fn oracle_cases() -> Vec<OracleCase> {
    serde_json::from_str(include_str!("../fixtures/loss_oracle.json")).unwrap()
}
