//! l∞ gradient-sign attacks: FGSM, iterative FGSM and PGD.
//!
//! All attacks work in `[0, 1]` pixel space against a frozen model and keep
//! every adversarial example inside `[x - ε, x + ε] ∩ [0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::LossSpec;
use crate::models::Model;
use crate::tensor::{argmax, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
    #[default]
    Pgd,
}

/// Objective the attacker ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    /// Plain cross entropy, whatever the model was trained with.
    #[default]
    Ce,
    /// The loss the model was trained with.
    TrainingLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// l∞ budget in pixel units.
    pub epsilon: f64,
    /// I-FGSM per-step size.
    pub alpha: f64,
    /// Iterations (I-FGSM and PGD).
    pub steps: usize,
    /// PGD per-step size.
    pub step_size: f64,
    pub random_start: bool,
    pub loss: AttackLoss,
    /// Seed of the PGD random start.
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            loss: AttackLoss::Ce,
            seed: 0,
        }
    }

    pub fn ifgsm(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Ifgsm,
            alpha,
            steps,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize, random_start: bool) -> Self {
        Self {
            kind: AttackKind::Pgd,
            step_size,
            steps,
            random_start,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        let step = match self.kind {
            AttackKind::Fgsm => return Ok(()),
            AttackKind::Ifgsm => self.alpha,
            AttackKind::Pgd => self.step_size,
        };
        if self.steps == 0 || !(step > 0.0) {
            return Err(Error::Config(format!(
                "iterative attack needs steps >= 1 and a positive step size, got {} and {step}",
                self.steps
            )));
        }
        Ok(())
    }

    /// The objective to attack a model trained with `training`.
    pub fn objective(&self, training: &LossSpec) -> LossSpec {
        match self.loss {
            AttackLoss::Ce => LossSpec::ce(),
            AttackLoss::TrainingLoss => *training,
        }
    }
}

/// Result of attacking one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub adversarial: Tensor,
    /// Post-attack prediction differs from the label.
    pub success: Vec<bool>,
    /// Post-attack predicted class.
    pub predicted: Vec<usize>,
}

impl AdvBatch {
    /// Largest per-pixel deviation from `original`.
    pub fn max_perturbation(&self, original: &Tensor) -> f64 {
        self.adversarial
            .data()
            .iter()
            .zip(original.data())
            .map(|(a, o)| (a - o).abs())
            .fold(0.0, f64::max)
    }
}

/// Clamps `adv` into `[orig - ε, orig + ε]`, then into `[0, 1]`.
pub fn project_linf(adv: &Tensor, orig: &Tensor, epsilon: f64) -> Result<Tensor> {
    if adv.shape() != orig.shape() {
        return Err(Error::Dimension(format!(
            "projection of {:?} onto a ball around {:?}",
            adv.shape(),
            orig.shape()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut out = adv.clone();
    for (a, &o) in out.data_mut().iter_mut().zip(orig.data()) {
        let mut v = a.clamp(o - epsilon, o + epsilon);
        // o ± ε is rounded, which can leave |v - o| an ulp above ε
        while v - o > epsilon {
            v = v.next_down();
        }
        while o - v > epsilon {
            v = v.next_up();
        }
        *a = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the batch objective with respect to the input pixels.
pub fn input_gradient(model: &Model, batch: &Tensor, labels: &[usize], objective: &LossSpec) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let x = tape.leaf(batch.clone().with_requires_grad(true));
    let logits = model.forward(&mut tape, x, &params)?;
    let loss = objective.apply(&mut tape, logits, labels)?;
    tape.backward(loss)?;
    let grad = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; batch.len()]);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("input gradient contains NaN or Inf".into()));
    }
    Ok(grad)
}

fn signed_step(x: &Tensor, grad: &[f64], size: f64) -> Tensor {
    let mut out = x.clone();
    for (v, &g) in out.data_mut().iter_mut().zip(grad) {
        *v += size * sign(g);
    }
    out
}

fn finish(model: &Model, adversarial: Tensor, labels: &[usize]) -> Result<AdvBatch> {
    let logits = model.logits(&adversarial)?;
    let c = model.num_classes();
    let predicted: Vec<usize> = logits.data().chunks(c).map(argmax).collect();
    let success = predicted.iter().zip(labels).map(|(p, y)| p != y).collect();
    Ok(AdvBatch {
        adversarial,
        success,
        predicted,
    })
}

fn check_kind(spec: &AttackSpec, kind: AttackKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::Contract(format!("{:?} spec passed to the {kind:?} attack", spec.kind)));
    }
    Ok(())
}

/// `Π_ε(x + ε · sign(∇ₓ L))`, one gradient evaluation.
pub fn fgsm(model: &Model, batch: &Tensor, labels: &[usize], spec: &AttackSpec, objective: &LossSpec) -> Result<AdvBatch> {
    check_kind(spec, AttackKind::Fgsm)?;
    let grad = input_gradient(model, batch, labels, objective)?;
    let adv = project_linf(&signed_step(batch, &grad, spec.epsilon), batch, spec.epsilon)?;
    finish(model, adv, labels)
}

/// `steps` rounds of `x ← Clip_{x,ε}(x + α · sign(∇ₓ L))`.
pub fn ifgsm(model: &Model, batch: &Tensor, labels: &[usize], spec: &AttackSpec, objective: &LossSpec) -> Result<AdvBatch> {
    check_kind(spec, AttackKind::Ifgsm)?;
    let adv = iterate(model, batch, batch.clone(), labels, spec.alpha, spec, objective)?;
    finish(model, adv, labels)
}

/// `steps` rounds of `x ← Π_ε(x + η · sign(∇ₓ L))`, optionally from a uniform
/// random point of the ε-ball.
pub fn pgd(model: &Model, batch: &Tensor, labels: &[usize], spec: &AttackSpec, objective: &LossSpec) -> Result<AdvBatch> {
    check_kind(spec, AttackKind::Pgd)?;
    let start = if spec.random_start && spec.epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut x = batch.clone();
        for v in x.data_mut() {
            *v += rng.gen_range(-spec.epsilon..=spec.epsilon);
        }
        project_linf(&x, batch, spec.epsilon)?
    } else {
        batch.clone()
    };
    let adv = iterate(model, batch, start, labels, spec.step_size, spec, objective)?;
    finish(model, adv, labels)
}

fn iterate(
    model: &Model,
    orig: &Tensor,
    mut x: Tensor,
    labels: &[usize],
    step: f64,
    spec: &AttackSpec,
    objective: &LossSpec,
) -> Result<Tensor> {
    for _ in 0..spec.steps {
        let grad = input_gradient(model, &x, labels, objective)?;
        x = project_linf(&signed_step(&x, &grad, step), orig, spec.epsilon)?;
    }
    Ok(x)
}

/// Dispatches on `spec.kind`.
pub fn run_attack(model: &Model, batch: &Tensor, labels: &[usize], spec: &AttackSpec, objective: &LossSpec) -> Result<AdvBatch> {
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, batch, labels, spec, objective),
        AttackKind::Ifgsm => ifgsm(model, batch, labels, spec, objective),
        AttackKind::Pgd => pgd(model, batch, labels, spec, objective),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, ModelConfig, NamedParam};

    /// Linear two-class model on a 2-pixel image: logits = x · W + b.
    fn linear(w: [f64; 4]) -> Model {
        let cfg = ModelConfig {
            architecture: Architecture::Mlp,
            input_shape: [1, 1, 2],
            num_classes: 2,
            widths: vec![],
            dense: vec![],
            init_seed: 0,
        };
        let params = vec![
            NamedParam { name: "fc0.weight".into(), tensor: Tensor::new(vec![2, 2], w.to_vec()).unwrap() },
            NamedParam { name: "fc0.bias".into(), tensor: Tensor::from_vec(vec![0.0, 0.0]) },
        ];
        Model::from_params(cfg, params).unwrap()
    }

    fn pixels(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len() / 2, 1, 1, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let orig = pixels(&[0.5, 0.05]);
        let adv = pixels(&[0.9, -0.2]);
        let p = project_linf(&adv, &orig, 0.1).unwrap();
        assert_eq!(p.data()[0], 0.6);
        assert_eq!(p.data()[1], 0.0);
        let inside = pixels(&[0.55, 0.1]);
        assert_eq!(project_linf(&inside, &orig, 0.1).unwrap(), inside);
        assert!(project_linf(&pixels(&[0.1, 0.2, 0.3, 0.4]), &orig, 0.1).is_err());
    }

    #[test]
    fn fgsm_moves_up_along_positive_gradient() {
        // Label 0; class 1's weights exceed class 0's, so dCE/dx > 0 on both pixels.
        let model = linear([0.0, 1.0, 0.0, 2.0]);
        let x = pixels(&[0.4, 0.3]);
        let g = input_gradient(&model, &x, &[0], &LossSpec::ce()).unwrap();
        assert!(g.iter().all(|&v| v > 0.0));
        let adv = fgsm(&model, &x, &[0], &AttackSpec::fgsm(0.1), &LossSpec::ce()).unwrap();
        for (a, o) in adv.adversarial.data().iter().zip(x.data()) {
            // within an ulp of o + ε, never outside the ball
            assert!((a - (o + 0.1)).abs() < 1e-15);
            assert!(a - o <= 0.1);
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let model = linear([1.0, -1.0, 0.5, 2.0]);
        let x = pixels(&[0.2, 0.9, 0.0, 1.0]);
        let ce = LossSpec::ce();
        for spec in [
            AttackSpec::fgsm(0.0),
            AttackSpec::ifgsm(0.0, 0.01, 5),
            AttackSpec::pgd(0.0, 0.01, 5, false),
            AttackSpec::pgd(0.0, 0.01, 5, true),
        ] {
            let adv = run_attack(&model, &x, &[0, 1], &spec, &ce).unwrap();
            assert_eq!(adv.adversarial, x);
        }
    }

    #[test]
    fn one_step_degeneracies_match_fgsm() {
        let model = linear([0.3, -0.2, -0.7, 0.9]);
        let x = pixels(&[0.2, 0.8, 0.5, 0.5, 0.99, 0.01]);
        let y = [0, 1, 1];
        let ce = LossSpec::ce();
        let f = fgsm(&model, &x, &y, &AttackSpec::fgsm(0.05), &ce).unwrap();
        let i = ifgsm(&model, &x, &y, &AttackSpec::ifgsm(0.05, 0.05, 1), &ce).unwrap();
        let p = pgd(&model, &x, &y, &AttackSpec::pgd(0.05, 0.05, 1, false), &ce).unwrap();
        assert_eq!(f, i);
        assert_eq!(f, p);
    }

    #[test]
    fn two_half_steps_reach_the_budget() {
        let model = linear([0.0, 1.0, 0.0, 2.0]);
        let x = pixels(&[0.4, 0.3]);
        let eps = 0.1;
        let adv = ifgsm(&model, &x, &[0], &AttackSpec::ifgsm(eps, eps / 2.0, 2), &LossSpec::ce()).unwrap();
        for (a, o) in adv.adversarial.data().iter().zip(x.data()) {
            assert!((a - o - eps).abs() < 1e-12);
        }
        let many = ifgsm(&model, &x, &[0], &AttackSpec::ifgsm(eps, eps, 3), &LossSpec::ce()).unwrap();
        assert!(many.max_perturbation(&x) <= eps + 1e-7);
    }

    #[test]
    fn random_start_is_seeded() {
        let model = linear([0.3, -0.2, -0.7, 0.9]);
        let x = pixels(&[0.2, 0.8, 0.5, 0.5]);
        let spec = AttackSpec::pgd(0.1, 0.01, 3, true);
        let a = pgd(&model, &x, &[0, 1], &spec, &LossSpec::ce()).unwrap();
        let b = pgd(&model, &x, &[0, 1], &spec, &LossSpec::ce()).unwrap();
        assert_eq!(a, b);
        assert!(a.max_perturbation(&x) <= 0.1 + 1e-7);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::pgd(0.1, 0.0, 3, false).validate().is_err());
        assert!(AttackSpec::ifgsm(0.1, 0.01, 0).validate().is_err());
        assert!(AttackSpec::fgsm(-0.1).validate().is_err());
        let model = linear([0.0; 4]);
        let x = pixels(&[0.5, 0.5]);
        assert!(matches!(
            fgsm(&model, &x, &[0], &AttackSpec::pgd(0.1, 0.01, 1, false), &LossSpec::ce()),
            Err(Error::Contract(_))
        ));
    }
}
