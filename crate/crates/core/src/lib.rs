//! Distribution-restrained softmax loss (DRSL) laboratory.
//!
//! The crate bundles everything needed to train small classifiers with
//! cross entropy, generalized cross entropy or DRSL, attack them with
//! FGSM / I-FGSM / PGD, and measure how the softmax distribution relates
//! to adversarial robustness:
//!
//! - [`tensor`]: tape-based reverse-mode autodiff and the Adam optimizer.
//! - [`models`]: MLP and VGG-style CNN classifiers plus checkpoint I/O.
//! - [`losses`]: CE, GCE, DRSL and the distances to the uniform distribution.
//! - [`attacks`]: l∞ gradient-sign attacks with ε-ball projection.
//! - [`data`]: MNIST / CIFAR-10 loaders, batching, symmetric label noise.
//! - [`analysis`]: accuracy, attack success, stochasticity, second-argmax
//!   statistics, correlation and PCA.
//! - [`harness`]: seeded experiment runner, CSV/JSON reports and SVG plots.

pub mod analysis;
pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
