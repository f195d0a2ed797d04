//! Measurements over frozen models: accuracy, attack success, softmax
//! stochasticity, the second-argmax statistic, correlation and PCA.
//!
//! Reductions run sequentially in example order so results are
//! bit-reproducible.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::attacks::{run_attack, AttackSpec};
use crate::data::Dataset;
use crate::losses::{DistanceMetric, LossSpec};
use crate::models::Model;
use crate::tensor::{argmax, top_two, Tensor};
use crate::{Error, Result};

/// Examples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 500;
/// Examples per attack batch.
pub const ATTACK_CHUNK: usize = 250;
pub const HISTOGRAM_BINS: usize = 20;

fn check_eval(model: &Model, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    if dataset.image_shape() != model.config().input_shape {
        return Err(Error::Dimension(format!(
            "dataset images {:?} do not match model input {:?}",
            dataset.image_shape(),
            model.config().input_shape
        )));
    }
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Softmax rows for every example, flattened (N × C).
pub fn softmax_outputs(model: &Model, images: &Tensor) -> Result<Vec<f64>> {
    let logits = model.logits_chunked(images, EVAL_CHUNK)?;
    let c = model.num_classes();
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.data().chunks(c).zip(out.chunks_mut(c)) {
        dst.copy_from_slice(&crate::tensor::softmax(src)?);
    }
    Ok(out)
}

pub fn predictions(model: &Model, images: &Tensor) -> Result<Vec<usize>> {
    let logits = model.logits_chunked(images, EVAL_CHUNK)?;
    Ok(logits.data().chunks(model.num_classes()).map(argmax).collect())
}

/// Fraction of examples whose argmax logit equals the label.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    check_eval(model, dataset)?;
    let pred = predictions(model, dataset.images())?;
    let correct = pred.iter().zip(dataset.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Distances of each example's softmax to the uniform distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticityReport {
    pub metric: DistanceMetric,
    pub distances: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Counts over [`HISTOGRAM_BINS`] equal bins spanning `[0, max_distance]`.
    pub histogram: Vec<usize>,
    pub max_distance: f64,
}

impl StochasticityReport {
    pub fn from_distances(distances: Vec<f64>, metric: DistanceMetric, classes: usize) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::Contract("stochasticity of zero examples".into()));
        }
        let n = distances.len() as f64;
        let mean = distances.iter().sum::<f64>() / n;
        let std = (distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        let max_distance = metric.max_distance_to_uniform(classes);
        let mut histogram = vec![0; HISTOGRAM_BINS];
        for &d in &distances {
            let bin = ((d / max_distance) * HISTOGRAM_BINS as f64).floor() as usize;
            histogram[bin.min(HISTOGRAM_BINS - 1)] += 1;
        }
        Ok(Self {
            metric,
            distances,
            mean,
            std,
            histogram,
            max_distance,
        })
    }
}

pub fn stochasticity(model: &Model, dataset: &Dataset, metric: DistanceMetric) -> Result<StochasticityReport> {
    check_eval(model, dataset)?;
    let c = model.num_classes();
    let uniform = crate::losses::uniform_distribution(c)?;
    let probs = softmax_outputs(model, dataset.images())?;
    let distances = probs
        .chunks(c)
        .map(|p| metric.distance(p, uniform.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    StochasticityReport::from_distances(distances, metric, c)
}

/// How often a successful attack lands on the clean second-ranked class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondArgmaxReport {
    /// `None` when no attack succeeded.
    pub overall: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Successful attacks, by true class.
    pub successes: Vec<usize>,
    /// Successes landing on the clean second argmax, by true class.
    pub matches: Vec<usize>,
    /// `1 / (C - 1)`.
    pub chance_level: f64,
}

impl SecondArgmaxReport {
    pub fn is_empty(&self) -> bool {
        self.overall.is_none()
    }

    pub fn total_successes(&self) -> usize {
        self.successes.iter().sum()
    }
}

/// Everything learned from attacking one dataset once.
#[derive(Debug, Clone)]
pub struct AttackEvaluation {
    pub total: usize,
    pub clean_correct: usize,
    /// Clean-correct examples misclassified after the attack.
    pub flipped: usize,
    pub clean_accuracy: f64,
    pub attack_success_rate: f64,
    /// Fraction correct both before and after the attack.
    pub robust_accuracy: f64,
    pub second_argmax: SecondArgmaxReport,
    /// Indices (into the dataset) of the clean-correct examples that were attacked.
    pub attacked: Vec<usize>,
    /// Adversarial images for `attacked`, in the same order.
    pub adversarial: Option<Tensor>,
    /// Success flag for each entry of `attacked`.
    pub success: Vec<bool>,
}

impl AttackEvaluation {
    /// `robust = clean · (1 - ASR)`: exact on counts, and to 1e-12 on the
    /// floating-point rates.
    pub fn identity_holds(&self) -> bool {
        let counts = self.clean_correct - self.flipped
            == self.success.iter().filter(|s| !**s).count();
        let rates = (self.robust_accuracy - self.clean_accuracy * (1.0 - self.attack_success_rate)).abs() <= 1e-12;
        counts && rates
    }
}

/// Attacks every clean-correct example of `dataset` and gathers the
/// success, robust-accuracy and second-argmax statistics in one pass.
pub fn evaluate_attack(
    model: &Model,
    dataset: &Dataset,
    spec: &AttackSpec,
    objective: &LossSpec,
    keep_adversarial: bool,
) -> Result<AttackEvaluation> {
    check_eval(model, dataset)?;
    spec.validate()?;
    let c = model.num_classes();
    let clean_probs = softmax_outputs(model, dataset.images())?;
    let mut attacked = Vec::new();
    let mut second = Vec::new();
    for (i, (p, &y)) in clean_probs.chunks(c).zip(dataset.labels()).enumerate() {
        let (first, runner_up) = top_two(p);
        if first == y {
            attacked.push(i);
            second.push(runner_up);
        }
    }

    let mut success = Vec::with_capacity(attacked.len());
    let mut predicted = Vec::with_capacity(attacked.len());
    let mut adv_data = Vec::new();
    for (k, idx) in attacked.chunks(ATTACK_CHUNK).enumerate() {
        let images = dataset.images().select_rows(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
        let mut chunk_spec = *spec;
        chunk_spec.seed = spec.seed.wrapping_add(k as u64);
        let adv = run_attack(model, &images, &labels, &chunk_spec, objective)?;
        success.extend_from_slice(&adv.success);
        predicted.extend_from_slice(&adv.predicted);
        if keep_adversarial {
            adv_data.extend_from_slice(adv.adversarial.data());
        }
    }

    let mut successes = vec![0; c];
    let mut matches = vec![0; c];
    for ((&i, &ok), (&p, &s)) in attacked.iter().zip(&success).zip(predicted.iter().zip(&second)) {
        if ok {
            let y = dataset.labels()[i];
            successes[y] += 1;
            if p == s {
                matches[y] += 1;
            }
        }
    }
    let total_successes: usize = successes.iter().sum();
    let second_argmax = SecondArgmaxReport {
        overall: (total_successes > 0).then(|| matches.iter().sum::<usize>() as f64 / total_successes as f64),
        per_class: successes
            .iter()
            .zip(&matches)
            .map(|(&s, &m)| (s > 0).then(|| m as f64 / s as f64))
            .collect(),
        successes,
        matches,
        chance_level: 1.0 / (c - 1) as f64,
    };

    let total = dataset.len();
    let clean_correct = attacked.len();
    let flipped = total_successes;
    let attack_success_rate = if clean_correct == 0 {
        log::warn!("no clean-correct examples; attack success rate reported as 0");
        0.0
    } else {
        flipped as f64 / clean_correct as f64
    };
    let adversarial = if keep_adversarial && !attacked.is_empty() {
        let [ch, h, w] = dataset.image_shape();
        Some(Tensor::new(vec![attacked.len(), ch, h, w], adv_data)?)
    } else {
        None
    };
    Ok(AttackEvaluation {
        total,
        clean_correct,
        flipped,
        clean_accuracy: clean_correct as f64 / total as f64,
        attack_success_rate,
        robust_accuracy: (clean_correct - flipped) as f64 / total as f64,
        second_argmax,
        attacked,
        adversarial,
        success,
    })
}

/// Fraction of clean-correct examples the attack flips; 0 when none are
/// correct to begin with.
pub fn attack_success_rate(model: &Model, dataset: &Dataset, spec: &AttackSpec, objective: &LossSpec) -> Result<f64> {
    Ok(evaluate_attack(model, dataset, spec, objective, false)?.attack_success_rate)
}

pub fn second_argmax_match_rate(
    model: &Model,
    dataset: &Dataset,
    spec: &AttackSpec,
    objective: &LossSpec,
) -> Result<SecondArgmaxReport> {
    Ok(evaluate_attack(model, dataset, spec, objective, false)?.second_argmax)
}

pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Dimension(format!(
            "correlation needs two equal-length series of >= 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Points projected onto the leading principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Row-major (N, dims).
    pub points: Vec<f64>,
    pub dims: usize,
    /// Share of total variance per retained component, descending.
    pub explained_variance_ratio: Vec<f64>,
}

impl Projection {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mean-centred projection of `n` row-major points of dimension `d` onto the
/// top `out_dims` eigenvectors of their covariance. Each component's sign is
/// fixed so that its largest-magnitude loading is positive.
pub fn pca_project(points: &[f64], n: usize, d: usize, out_dims: usize) -> Result<Projection> {
    if points.len() != n * d || n < 2 || d < out_dims || out_dims == 0 {
        return Err(Error::Dimension(format!(
            "PCA of {} values as ({n}, {d}) onto {out_dims} dims",
            points.len()
        )));
    }
    let mut mean = vec![0.0; d];
    for row in points.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = points
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let x = DMatrix::from_row_slice(n, d, &centred);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("PCA of points with zero variance".into()));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(out_dims);
    let mut ratios = Vec::with_capacity(out_dims);
    for &k in order.iter().take(out_dims) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        ratios.push(eig.eigenvalues[k].max(0.0) / total);
    }
    let mut projected = Vec::with_capacity(n * out_dims);
    for row in centred.chunks(d) {
        for comp in &components {
            projected.push(row.iter().zip(comp).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Projection {
        points: projected,
        dims: out_dims,
        explained_variance_ratio: ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetName, Split};
    use crate::models::{Architecture, ModelConfig, NamedParam};

    /// Linear model on 2-pixel images with the given weights and biases.
    fn linear(classes: usize, w: Vec<f64>, b: Vec<f64>) -> Model {
        let cfg = ModelConfig {
            architecture: Architecture::Mlp,
            input_shape: [1, 1, 2],
            num_classes: classes,
            widths: vec![],
            dense: vec![],
            init_seed: 0,
        };
        Model::from_params(
            cfg,
            vec![
                NamedParam { name: "fc0.weight".into(), tensor: Tensor::new(vec![2, classes], w).unwrap() },
                NamedParam { name: "fc0.bias".into(), tensor: Tensor::from_vec(b) },
            ],
        )
        .unwrap()
    }

    fn dataset(pixels: Vec<f64>, labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(
            Tensor::new(vec![n, 1, 1, 2], pixels).unwrap(),
            labels,
            DatasetName::Mnist,
            Split::Test,
            classes,
        )
        .unwrap()
    }

    #[test]
    fn constant_predictor_accuracy_is_label_frequency() {
        // zero weights, bias favours class 2
        let model = linear(3, vec![0.0; 6], vec![0.0, 0.0, 1.0]);
        let ds = dataset(vec![0.5; 10], vec![2, 0, 2, 1, 0], 3);
        assert_eq!(accuracy(&model, &ds).unwrap(), 0.4);
    }

    #[test]
    fn empty_dataset_rejected() {
        let model = linear(2, vec![0.0; 4], vec![0.0; 2]);
        let ds = dataset(vec![], vec![], 2);
        assert!(matches!(accuracy(&model, &ds), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_model_has_zero_stochasticity() {
        let model = linear(4, vec![0.0; 8], vec![0.0; 4]);
        let ds = dataset(vec![0.1, 0.9, 0.3, 0.4], vec![0, 3], 4);
        for metric in [DistanceMetric::Euclidean, DistanceMetric::Cosine] {
            let r = stochasticity(&model, &ds, metric).unwrap();
            assert!(r.distances.iter().all(|&d| d.abs() < 1e-15));
            assert!(r.mean.abs() < 1e-15);
            assert_eq!(r.histogram[0], 2);
        }
    }

    #[test]
    fn one_hot_distance_is_the_maximum() {
        let r = StochasticityReport::from_distances(vec![0.9486832980505138], DistanceMetric::Euclidean, 10).unwrap();
        assert!((r.max_distance - (0.9f64).sqrt()).abs() < 1e-15);
        assert_eq!(r.histogram[HISTOGRAM_BINS - 1], 1);
        // saturated softmax over ten classes
        let p: Vec<f64> = crate::tensor::softmax(&[800.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let u = crate::losses::uniform_distribution(10).unwrap();
        let d = DistanceMetric::Euclidean.distance(&p, u.as_slice()).unwrap();
        assert!((d - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_attack_never_succeeds() {
        let model = linear(2, vec![1.0, -1.0, -1.0, 1.0], vec![0.0, 0.0]);
        let ds = dataset(vec![0.9, 0.1, 0.1, 0.9, 0.8, 0.3], vec![0, 1, 1], 2);
        let ev = evaluate_attack(&model, &ds, &AttackSpec::fgsm(0.0), &LossSpec::ce(), false).unwrap();
        assert_eq!(ev.attack_success_rate, 0.0);
        assert!(ev.second_argmax.is_empty());
        assert!((ev.clean_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(ev.identity_holds());
    }

    #[test]
    fn two_classes_always_land_on_second_argmax() {
        let model = linear(2, vec![1.0, -1.0, -1.0, 1.0], vec![0.0, 0.0]);
        let ds = dataset(vec![0.55, 0.45, 0.45, 0.55, 0.6, 0.5], vec![0, 1, 0], 2);
        let ev = evaluate_attack(&model, &ds, &AttackSpec::fgsm(0.2), &LossSpec::ce(), true).unwrap();
        assert!(ev.flipped > 0);
        assert_eq!(ev.second_argmax.overall, Some(1.0));
        assert_eq!(ev.second_argmax.total_successes(), ev.flipped);
        assert!(ev.identity_holds());
        assert_eq!(ev.adversarial.unwrap().shape()[0], ev.attacked.len());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let twice: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        assert!((pearson_correlation(&xs, &twice).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| 5.0 - x).collect();
        assert!((pearson_correlation(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        // hand evaluation: sxy = 4, sxx = syy = 5
        assert!((pearson_correlation(&xs, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(pearson_correlation(&xs, &[1.0; 4]), Err(Error::Degenerate(_))));
        assert!(pearson_correlation(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pca_on_a_line_captures_everything() {
        let pts: Vec<f64> = (0..6).flat_map(|i| {
            let t = i as f64;
            [1.0 + 2.0 * t, -t, 0.5 * t]
        }).collect();
        let p = pca_project(&pts, 6, 3, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_variance_ratio[1].abs() < 1e-12);
    }

    #[test]
    fn pca_in_the_plane_preserves_distances() {
        let pts = vec![0.0, 0.0, 1.0, 2.0, -1.5, 0.5, 3.0, -2.0];
        let p = pca_project(&pts, 4, 2, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = ((pts[2 * i] - pts[2 * j]).powi(2) + (pts[2 * i + 1] - pts[2 * j + 1]).powi(2)).sqrt();
                let a = p.point(i);
                let b = p.point(j);
                let d1 = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
        assert_eq!(pca_project(&pts, 4, 2, 2).unwrap(), p);
    }

    #[test]
    fn pca_rejects_degenerate_input() {
        assert!(matches!(pca_project(&[1.0, 2.0, 1.0, 2.0], 2, 2, 2), Err(Error::Degenerate(_))));
        assert!(pca_project(&[1.0, 2.0], 1, 2, 2).is_err());
        assert!(pca_project(&[1.0, 2.0, 3.0, 4.0], 2, 2, 3).is_err());
    }
}
