mod common;

use common::{random_tensor, rng};
use drsl_core::analysis::evaluate_attack;
use drsl_core::attacks::{fgsm, ifgsm, pgd, project_linf, run_attack, AttackSpec};
use drsl_core::data::{Dataset, DatasetName, Split};
use drsl_core::losses::{DistanceMetric, LossSpec};
use drsl_core::models::{init_model, Architecture, Model, ModelConfig};
use drsl_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn model(seed: u64, vgg: bool) -> Model {
    let config = if vgg {
        ModelConfig {
            architecture: Architecture::VggSmall,
            input_shape: [1, 8, 8],
            num_classes: 4,
            widths: vec![3, 4],
            dense: vec![6],
            init_seed: 0,
        }
    } else {
        ModelConfig {
            architecture: Architecture::Mlp,
            input_shape: [1, 8, 8],
            num_classes: 4,
            widths: vec![12],
            dense: vec![],
            init_seed: 0,
        }
    };
    init_model(&config, seed).unwrap()
}

fn batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let mut x = random_tensor(&mut r, &[n, 1, 8, 8], 0.0, 1.0);
    // saturated pixels exercise the [0, 1] clamp
    for v in x.data_mut().iter_mut().step_by(7) {
        *v = if r.gen_bool(0.5) { 0.0 } else { 1.0 };
    }
    let y = (0..n).map(|_| r.gen_range(0..4)).collect();
    (x, y)
}

fn objectives() -> [LossSpec; 3] {
    [LossSpec::ce(), LossSpec::gce(0.7), LossSpec::drsl(0.5, DistanceMetric::Cosine)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 60, ..ProptestConfig::default() })]

    #[test]
    fn every_adversarial_example_respects_the_ball(
        seed in any::<u64>(),
        eps in 0.0f64..0.5,
        steps in 1usize..6,
        vgg in any::<bool>(),
        random_start in any::<bool>(),
        obj in 0usize..3,
    ) {
        let m = model(seed, vgg);
        let (x, y) = batch(seed ^ 1, 5);
        let objective = objectives()[obj];
        for spec in [
            AttackSpec::fgsm(eps),
            AttackSpec::ifgsm(eps, eps / 3.0 + 1e-3, steps),
            AttackSpec::pgd(eps, eps / 4.0 + 1e-3, steps, random_start),
        ] {
            let adv = run_attack(&m, &x, &y, &spec, &objective).unwrap();
            for (a, o) in adv.adversarial.data().iter().zip(x.data()) {
                prop_assert!((a - o).abs() <= eps, "{:?}: |{} - {}| > {}", spec.kind, a, o, eps);
                prop_assert!((0.0..=1.0).contains(a));
            }
            prop_assert!(adv.max_perturbation(&x) <= eps);
        }
    }

    #[test]
    fn zero_budget_is_the_identity(seed in any::<u64>(), vgg in any::<bool>(), random_start in any::<bool>()) {
        let m = model(seed, vgg);
        let (x, y) = batch(seed, 4);
        for spec in [AttackSpec::fgsm(0.0), AttackSpec::ifgsm(0.0, 0.05, 3), AttackSpec::pgd(0.0, 0.05, 3, random_start)] {
            let adv = run_attack(&m, &x, &y, &spec, &LossSpec::ce()).unwrap();
            prop_assert_eq!(&adv.adversarial, &x);
        }
    }

    #[test]
    fn one_step_pgd_is_fgsm(seed in any::<u64>(), eps in 1e-3f64..0.4, vgg in any::<bool>(), obj in 0usize..3) {
        let m = model(seed, vgg);
        let (x, y) = batch(seed ^ 7, 6);
        let objective = objectives()[obj];
        let a = fgsm(&m, &x, &y, &AttackSpec::fgsm(eps), &objective).unwrap();
        let b = pgd(&m, &x, &y, &AttackSpec::pgd(eps, eps, 1, false), &objective).unwrap();
        let c = ifgsm(&m, &x, &y, &AttackSpec::ifgsm(eps, eps, 1), &objective).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
        prop_assert_eq!(bits(&a.adversarial), bits(&c.adversarial));
    }

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), eps in 0.0f64..0.5) {
        let mut r = rng(seed);
        let orig = random_tensor(&mut r, &[2, 1, 3, 3], 0.0, 1.0);
        let cand = random_tensor(&mut r, &[2, 1, 3, 3], -1.0, 2.0);
        let once = project_linf(&cand, &orig, eps).unwrap();
        let twice = project_linf(&once, &orig, eps).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn second_argmax_counts_add_up(seed in any::<u64>(), eps in 0.05f64..0.5) {
        let m = model(seed, false);
        let (x, y) = batch(seed ^ 3, 40);
        let ds = Dataset::new(x, y, DatasetName::Mnist, Split::Test, 4).unwrap();
        let ev = evaluate_attack(&m, &ds, &AttackSpec::pgd(eps, eps / 4.0, 5, false), &LossSpec::ce(), false).unwrap();
        prop_assert!(ev.identity_holds());
        let r = &ev.second_argmax;
        prop_assert_eq!(r.total_successes(), ev.flipped);
        if let Some(overall) = r.overall {
            let weighted: f64 = r.per_class.iter().zip(&r.successes)
                .filter_map(|(rate, &n)| rate.map(|v| v * n as f64))
                .sum::<f64>() / ev.flipped as f64;
            prop_assert!((overall - weighted).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&overall));
        }
        prop_assert!((r.chance_level - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn stronger_budgets_never_help_on_average() {
    // soft monotonicity: summed over seeds, PGD success does not drop as ε grows
    let grid = [0.02, 0.05, 0.1, 0.2];
    let mut totals = vec![0usize; grid.len()];
    for seed in 0..5 {
        let m = model(seed, false);
        let (x, y) = batch(seed + 100, 60);
        let ds = Dataset::new(x, y, DatasetName::Mnist, Split::Test, 4).unwrap();
        for (k, &eps) in grid.iter().enumerate() {
            let ev = evaluate_attack(&m, &ds, &AttackSpec::pgd(eps, eps / 10.0, 20, false), &LossSpec::ce(), false).unwrap();
            totals[k] += ev.flipped;
        }
    }
    assert!(totals.windows(2).all(|w| w[0] <= w[1]), "{totals:?}");
}
