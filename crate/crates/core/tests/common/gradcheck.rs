//! Finite-difference harness shared by the gradient tests and the acceptance run.

use drsl_core::losses::{DistanceMetric, LossSpec};
use drsl_core::models::{init_model, Architecture, ModelConfig};
use drsl_core::tensor::{grad_check, Tape, Tensor, Var};
use drsl_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_tensor, rng};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// Reduces `y` to a scalar through fixed random weights so that every output
/// coordinate contributes a distinct amount.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = random_tensor(&mut rng(seed ^ 0x5eed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Values in `[lo, hi]` kept at least `gap` away from zero.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(gap..hi);
            if r.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub const OPS: &[&str] = &[
    "add", "sub", "mul_lhs", "mul_rhs", "div_num", "div_den", "scale", "add_scalar", "relu", "exp", "log", "sqrt",
    "powf", "clamp_min", "sum", "mean", "sum_rows", "softmax", "log_softmax", "gather", "drop_column", "reshape",
    "matmul_lhs", "matmul_rhs", "add_bias_x", "add_bias_b", "conv2d_input", "conv2d_weight", "max_pool2",
];

/// Worst relative error of primitive `op` at a random point drawn from `seed`.
pub fn check_op(op: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let rows = r.gen_range(1..4);
    let cols = r.gen_range(2..6);
    let shape = [rows, cols];
    let other = random_tensor(&mut r, &shape, -2.0, 2.0);
    let positive = random_tensor(&mut r, &shape, 0.5, 3.0);
    let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..cols)).collect();
    let ws = seed;
    let err = match op {
        "add" | "sub" | "mul_lhs" | "mul_rhs" => {
            let x = random_tensor(&mut r, &shape, -2.0, 2.0);
            grad_check(
                |t, v| {
                    let o = t.constant(other.clone());
                    let y = match op {
                        "add" => t.add(v, o)?,
                        "sub" => t.sub(o, v)?,
                        "mul_lhs" => t.mul(v, o)?,
                        _ => t.mul(o, v)?,
                    };
                    weighted_sum(t, y, ws)
                },
                &x,
                H,
            )
        }
        "div_num" => grad_check(
            |t, v| {
                let d = t.constant(positive.clone());
                let y = t.div(v, d)?;
                weighted_sum(t, y, ws)
            },
            &other,
            H,
        ),
        "div_den" => grad_check(
            |t, v| {
                let n = t.constant(other.clone());
                let y = t.div(n, v)?;
                weighted_sum(t, y, ws)
            },
            &positive,
            H,
        ),
        "scale" | "add_scalar" | "exp" | "sum" | "mean" | "sum_rows" | "softmax" | "log_softmax" | "reshape" => {
            let x = random_tensor(&mut r, &shape, -3.0, 3.0);
            let labels = labels.clone();
            grad_check(
                |t, v| {
                    let y = match op {
                        "scale" => t.scale(v, -1.7),
                        "add_scalar" => t.add_scalar(v, 0.3),
                        "exp" => t.exp(v)?,
                        "sum" => t.sum(v),
                        "mean" => t.mean(v)?,
                        "sum_rows" => t.sum_rows(v)?,
                        "softmax" => t.softmax(v)?,
                        "log_softmax" => {
                            let l = t.log_softmax(v)?;
                            t.gather(l, &labels)?
                        }
                        _ => t.reshape(v, &[rows * cols])?,
                    };
                    weighted_sum(t, y, ws)
                },
                &x,
                H,
            )
        }
        "relu" | "clamp_min" => {
            let x = away_from_zero(&mut r, &shape, 2.0, 1e-3);
            grad_check(
                |t, v| {
                    let y = if op == "relu" { t.relu(v) } else { t.clamp_min(v, 0.0) };
                    weighted_sum(t, y, ws)
                },
                &x,
                H,
            )
        }
        "log" | "sqrt" | "powf" => grad_check(
            |t, v| {
                let y = match op {
                    "log" => t.log(v)?,
                    "sqrt" => t.sqrt(v)?,
                    _ => t.powf(v, 0.7)?,
                };
                weighted_sum(t, y, ws)
            },
            &positive,
            H,
        ),
        "gather" | "drop_column" => {
            let x = random_tensor(&mut r, &shape, -2.0, 2.0);
            grad_check(
                |t, v| {
                    let y = if op == "gather" { t.gather(v, &labels)? } else { t.drop_column(v, &labels)? };
                    weighted_sum(t, y, ws)
                },
                &x,
                H,
            )
        }
        "matmul_lhs" | "matmul_rhs" => {
            let k = r.gen_range(1..5);
            let a = random_tensor(&mut r, &[rows, k], -1.0, 1.0);
            let b = random_tensor(&mut r, &[k, cols], -1.0, 1.0);
            let lhs = op == "matmul_lhs";
            let (point, fixed) = if lhs { (a, b) } else { (b, a) };
            grad_check(
                |t, v| {
                    let f = t.constant(fixed.clone());
                    let y = if lhs { t.matmul(v, f)? } else { t.matmul(f, v)? };
                    weighted_sum(t, y, ws)
                },
                &point,
                H,
            )
        }
        "add_bias_x" | "add_bias_b" => {
            let c = r.gen_range(1..4);
            let x = random_tensor(&mut r, &[2, c, 2, 3], -1.0, 1.0);
            let b = random_tensor(&mut r, &[c], -1.0, 1.0);
            let on_x = op == "add_bias_x";
            let (point, fixed) = if on_x { (x, b) } else { (b, x) };
            grad_check(
                |t, v| {
                    let f = t.constant(fixed.clone());
                    let y = if on_x { t.add_bias(v, f)? } else { t.add_bias(f, v)? };
                    weighted_sum(t, y, ws)
                },
                &point,
                H,
            )
        }
        "conv2d_input" | "conv2d_weight" => {
            let (cin, cout) = (r.gen_range(1..3), r.gen_range(1..3));
            let pad = r.gen_range(0..2);
            let x = random_tensor(&mut r, &[2, cin, 5, 4], -1.0, 1.0);
            let w = random_tensor(&mut r, &[cout, cin, 3, 3], -1.0, 1.0);
            let on_input = op == "conv2d_input";
            let (point, fixed) = if on_input { (x, w) } else { (w, x) };
            grad_check(
                |t, v| {
                    let f = t.constant(fixed.clone());
                    let y = if on_input { t.conv2d(v, f, pad)? } else { t.conv2d(f, v, pad)? };
                    weighted_sum(t, y, ws)
                },
                &point,
                H,
            )
        }
        "max_pool2" => {
            // a shuffled grid of well-separated values: no ties, and no
            // perturbation can reorder a window
            let n = 2 * 2 * 5 * 4;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            for i in (1..n).rev() {
                vals.swap(i, r.gen_range(0..=i));
            }
            let x = Tensor::new(vec![2, 2, 5, 4], vals).unwrap();
            grad_check(
                |t, v| {
                    let y = t.max_pool2(v)?;
                    weighted_sum(t, y, ws)
                },
                &x,
                H,
            )
        }
        other => panic!("unknown op {other}"),
    };
    err.unwrap()
}

pub fn tiny_mlp() -> ModelConfig {
    ModelConfig {
        architecture: Architecture::Mlp,
        input_shape: [1, 4, 4],
        num_classes: 4,
        widths: vec![7, 5],
        dense: vec![],
        init_seed: 0,
    }
}

pub fn tiny_vgg() -> ModelConfig {
    ModelConfig {
        architecture: Architecture::VggSmall,
        input_shape: [2, 8, 8],
        num_classes: 3,
        widths: vec![3, 4],
        dense: vec![5],
        init_seed: 0,
    }
}

pub fn losses() -> Vec<LossSpec> {
    let mut restricted = LossSpec::drsl(0.7, DistanceMetric::Euclidean);
    restricted.restrict_to_non_true = true;
    vec![
        LossSpec::ce(),
        LossSpec::gce(0.7),
        LossSpec::drsl(0.5, DistanceMetric::Euclidean),
        LossSpec::drsl(1.0, DistanceMetric::Cosine),
        restricted,
    ]
}

/// Worst error over the input and every parameter tensor of a model+loss.
///
/// Parameters are jittered off their initial values first. Zero-initialized
/// biases behind an all-dead ReLU layer put the next pre-activations exactly
/// on the kink, where no derivative exists to check against.
pub fn check_composition(config: &ModelConfig, loss: &LossSpec, seed: u64) -> f64 {
    let mut model = init_model(config, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for p in model.param_tensors_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.05..0.05));
    }
    let batch = 3;
    let mut shape = vec![batch];
    shape.extend_from_slice(&config.input_shape);
    let input = random_tensor(&mut r, &shape, 0.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| r.gen_range(0..config.num_classes)).collect();

    let mut worst = grad_check(
        |t, x| {
            let params = model.bind(t, false);
            let logits = model.forward(t, x, &params)?;
            loss.apply(t, logits, &labels)
        },
        &input,
        H,
    )
    .unwrap();
    for k in 0..model.params().len() {
        let err = grad_check(
            |t, p| {
                let x = t.constant(input.clone());
                let mut params = model.bind(t, false);
                params[k] = p;
                let logits = model.forward(t, x, &params)?;
                loss.apply(t, logits, &labels)
            },
            &model.params()[k].tensor,
            H,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}
