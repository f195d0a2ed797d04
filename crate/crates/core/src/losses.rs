//! Cross entropy, generalized cross entropy and the distribution-restrained
//! softmax loss (DRSL).
//!
//! DRSL adds `τ · d(softmax(logits), uniform)` to cross entropy, pulling the
//! softmax output toward the uniform distribution. `d` is either the
//! Euclidean distance or the cosine distance `1 - cos(a, b)`.
//!
//! Every loss reduces over the batch with a mean.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Floor applied to probabilities before `log`/`pow`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default GCE exponent.
pub const DEFAULT_GCE_Q: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Ce,
    Gce,
    Drsl,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Gce => "gce",
            LossKind::Drsl => "drsl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
        }
    }

    /// Largest possible distance between a probability vector over `classes`
    /// classes and the uniform distribution (attained by a one-hot vector).
    pub fn max_distance_to_uniform(self, classes: usize) -> f64 {
        let c = classes as f64;
        match self {
            DistanceMetric::Euclidean => ((c - 1.0) / c).sqrt(),
            DistanceMetric::Cosine => 1.0 - 1.0 / c.sqrt(),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            DistanceMetric::Euclidean => euclidean_distance(a, b),
            DistanceMetric::Cosine => cosine_distance(a, b),
        }
    }
}

/// Which loss to train (or attack) with, plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// GCE exponent, `0 < q <= 1`.
    pub q: f64,
    /// DRSL distance weight, `τ >= 0`.
    pub tau: f64,
    pub metric: DistanceMetric,
    /// Compare only the non-true-class softmax (renormalized) against the
    /// uniform distribution over the remaining classes.
    pub restrict_to_non_true: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            q: DEFAULT_GCE_Q,
            tau: 0.0,
            metric: DistanceMetric::Euclidean,
            restrict_to_non_true: false,
        }
    }
}

impl LossSpec {
    pub fn ce() -> Self {
        Self::default()
    }

    pub fn gce(q: f64) -> Self {
        Self {
            kind: LossKind::Gce,
            q,
            ..Self::default()
        }
    }

    pub fn drsl(tau: f64, metric: DistanceMetric) -> Self {
        Self {
            kind: LossKind::Drsl,
            tau,
            metric,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Ce => Ok(()),
            LossKind::Gce if self.q > 0.0 && self.q <= 1.0 => Ok(()),
            LossKind::Gce => Err(Error::Config(format!("GCE needs 0 < q <= 1, got {}", self.q))),
            LossKind::Drsl if self.tau >= 0.0 && self.tau.is_finite() => Ok(()),
            LossKind::Drsl => Err(Error::Config(format!("DRSL needs tau >= 0, got {}", self.tau))),
        }
    }

    /// Records the batch-mean loss for `(B, C)` logits on the tape.
    pub fn apply(&self, tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        self.validate()?;
        match self.kind {
            LossKind::Ce => ce_loss(tape, logits, labels),
            LossKind::Gce => gce_loss(tape, logits, labels, self.q),
            LossKind::Drsl if self.restrict_to_non_true => {
                let ce = ce_loss(tape, logits, labels)?;
                let others = tape.drop_column(logits, labels)?;
                let probs = tape.softmax(others)?;
                let d = distance_to_uniform_rows(tape, probs, self.metric)?;
                add_weighted_mean(tape, ce, d, self.tau)
            }
            LossKind::Drsl => drsl_loss(tape, logits, labels, self.tau, self.metric),
        }
    }

    /// Plain-number evaluation of the loss, without gradients.
    pub fn value(&self, logits: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        let l = self.apply(&mut tape, x, labels)?;
        Ok(tape.scalar_value(l))
    }
}

/// Probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("not a probability vector (sum {total})")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// The uniform ("totally average") distribution over `classes` classes.
pub fn uniform_distribution(classes: usize) -> Result<ProbVector> {
    if classes < 2 {
        return Err(Error::Domain(format!("uniform distribution needs C >= 2, got {classes}")));
    }
    Ok(ProbVector(vec![1.0 / classes as f64; classes]))
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "distance between vectors of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `1 - a·b / (‖a‖ ‖b‖)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine distance of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

fn check_labels(tape: &Tape, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = match *tape.shape(logits) {
        [b, c] => (b, c),
        ref s => return Err(Error::Dimension(format!("logits must be (B, C), got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Label(format!("label {bad} outside [0, {c})")));
    }
    Ok((b, c))
}

/// Per-example cross entropy `-log softmax(logits)[y]`, shape (B,).
fn ce_rows(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, logits, labels)?;
    let log_probs = tape.log_softmax(logits)?;
    let picked = tape.gather(log_probs, labels)?;
    Ok(tape.scale(picked, -1.0))
}

pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = ce_rows(tape, logits, labels)?;
    tape.mean(rows)
}

/// Batch mean of `(1 - p_y^q) / q`.
pub fn gce_loss(tape: &mut Tape, logits: Var, labels: &[usize], q: f64) -> Result<Var> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("GCE needs 0 < q <= 1, got {q}")));
    }
    check_labels(tape, logits, labels)?;
    let probs = tape.softmax(logits)?;
    let p_true = tape.gather(probs, labels)?;
    let p_true = tape.clamp_min(p_true, PROB_FLOOR);
    let powered = tape.powf(p_true, q)?;
    let neg = tape.scale(powered, -1.0 / q);
    let rows = tape.add_scalar(neg, 1.0 / q);
    tape.mean(rows)
}

/// Batch mean of `CE + τ · d(softmax(logits), uniform)`.
pub fn drsl_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    tau: f64,
    metric: DistanceMetric,
) -> Result<Var> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("DRSL needs tau >= 0, got {tau}")));
    }
    let ce = ce_loss(tape, logits, labels)?;
    let probs = tape.softmax(logits)?;
    let d = distance_to_uniform_rows(tape, probs, metric)?;
    add_weighted_mean(tape, ce, d, tau)
}

fn add_weighted_mean(tape: &mut Tape, base: Var, rows: Var, weight: f64) -> Result<Var> {
    // τ = 0 must be CE bit for bit, down to the sign of a zero loss
    if weight == 0.0 {
        return Ok(base);
    }
    let m = tape.mean(rows)?;
    let weighted = tape.scale(m, weight);
    tape.add(base, weighted)
}

/// Distance of every row of a (B, C) probability tensor to uniform(C).
pub fn distance_to_uniform_rows(tape: &mut Tape, probs: Var, metric: DistanceMetric) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let [b, c] = shape[..] else {
        return Err(Error::Dimension(format!("probabilities must be (B, C), got {shape:?}")));
    };
    let u = 1.0 / c as f64;
    let uniform = tape.constant(Tensor::full(&[b, c], u));
    match metric {
        DistanceMetric::Euclidean => {
            let diff = tape.sub(probs, uniform)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum_rows(sq)?;
            tape.sqrt(total)
        }
        DistanceMetric::Cosine => {
            let prod = tape.mul(probs, uniform)?;
            let dot = tape.sum_rows(prod)?;
            let sq = tape.mul(probs, probs)?;
            let sq_norm = tape.sum_rows(sq)?;
            let norm = tape.sqrt(sq_norm)?;
            let norm = tape.scale(norm, (c as f64).sqrt() * u);
            let sim = tape.div(dot, norm)?;
            let neg = tape.scale(sim, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_distribution(4).unwrap().as_slice(), &[0.25; 4]);
        assert_eq!(uniform_distribution(2).unwrap().as_slice(), &[0.5, 0.5]);
        let ten = uniform_distribution(10).unwrap();
        assert!(ten.as_slice().iter().all(|&p| p == 0.1));
        assert!((ten.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(uniform_distribution(1), Err(Error::Domain(_))));
    }

    #[test]
    fn euclidean_examples() {
        let u = uniform_distribution(4).unwrap();
        let d = euclidean_distance(&[1.0, 0.0, 0.0, 0.0], u.as_slice()).unwrap();
        assert!((d - 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(matches!(euclidean_distance(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn cosine_examples() {
        let u = uniform_distribution(4).unwrap();
        let d = cosine_distance(&[1.0, 0.0, 0.0, 0.0], u.as_slice()).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_distance(&[0.2, 0.5], &[0.2, 0.5]).unwrap().abs() < 1e-15);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn worked_loss_values() {
        // mpmath, 40 digits: CE 0.4076059644443803, GCE 0.3546135578212890,
        // Euclidean distance to uniform 0.4209628541297573.
        let x = logits(&[&[1.0, 2.0, 3.0]]);
        let ce = LossSpec::ce().value(&x, &[2]).unwrap();
        assert!((ce - 0.4076059644443803).abs() < 1e-12);
        let gce = LossSpec::gce(0.7).value(&x, &[2]).unwrap();
        assert!((gce - 0.354_613_557_821_289).abs() < 1e-12);
        let drsl = LossSpec::drsl(0.5, DistanceMetric::Euclidean).value(&x, &[2]).unwrap();
        assert!((drsl - 0.618_087_391_509_259).abs() < 1e-12);
        assert!((ce - 0.40761).abs() < 1e-5);
        assert!((gce - 0.35457).abs() < 1e-4);
        assert!((drsl - 0.61809).abs() < 1e-4);
    }

    #[test]
    fn zero_logits_give_log_c() {
        let x = Tensor::zeros(&[1, 10]);
        let ce = LossSpec::ce().value(&x, &[3]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
            let d = LossSpec::drsl(1.0, metric).value(&x, &[3]).unwrap();
            assert!((d - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logits_give_near_zero() {
        let x = logits(&[&[0.0, 60.0, 0.0]]);
        assert!(LossSpec::ce().value(&x, &[1]).unwrap() < 1e-20);
        assert!(LossSpec::gce(0.7).value(&x, &[1]).unwrap() < 1e-20);
    }

    #[test]
    fn gce_q_one_is_one_minus_p() {
        // two equal logits: p_y = 0.5
        let x = Tensor::zeros(&[1, 2]);
        let v = LossSpec::gce(1.0).value(&x, &[0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tau_zero_is_bitwise_ce() {
        let x = logits(&[&[0.3, -1.2, 2.2, 0.1], &[1.0, 1.5, -0.5, 0.0]]);
        let ce = LossSpec::ce().value(&x, &[1, 3]).unwrap();
        for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
            let d = LossSpec::drsl(0.0, metric).value(&x, &[1, 3]).unwrap();
            assert_eq!(ce.to_bits(), d.to_bits());
        }
    }

    #[test]
    fn invalid_specs() {
        let x = logits(&[&[0.0, 1.0]]);
        assert!(matches!(LossSpec::gce(0.0).value(&x, &[0]), Err(Error::Config(_))));
        assert!(matches!(LossSpec::gce(1.5).value(&x, &[0]), Err(Error::Config(_))));
        assert!(matches!(
            LossSpec::drsl(-0.1, DistanceMetric::Cosine).value(&x, &[0]),
            Err(Error::Config(_))
        ));
        assert!(matches!(LossSpec::ce().value(&x, &[2]), Err(Error::Label(_))));
    }

    #[test]
    fn restricted_variant_ignores_true_class() {
        // Non-true logits equal ⇒ the restricted distance vanishes, so the
        // loss equals CE whatever the true-class logit.
        let x = logits(&[&[4.0, 1.0, 1.0, 1.0]]);
        let spec = LossSpec {
            restrict_to_non_true: true,
            ..LossSpec::drsl(1.0, DistanceMetric::Euclidean)
        };
        let ce = LossSpec::ce().value(&x, &[0]).unwrap();
        assert!((spec.value(&x, &[0]).unwrap() - ce).abs() < 1e-15);
        // unequal non-true logits add a positive term
        let y = logits(&[&[4.0, 2.0, 1.0, 1.0]]);
        let ce = LossSpec::ce().value(&y, &[0]).unwrap();
        assert!(spec.value(&y, &[0]).unwrap() > ce + 1e-3);
    }
}
