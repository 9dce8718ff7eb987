use proptest::prelude::*;
use rgd_core::datagen::{flip_labels, gaussian_mixture_classification, seeded_rng};
use rgd_core::dro::{kl_dro_dual, kl_dro_primal, solve};
use rgd_core::models::{per_sample_loss, weighted_grad};
use rgd_core::verify::random_triple;
use rgd_core::{DiscreteDistribution, DroDivergence, DroInstance, ModelKind, WeightVector};

const DIVERGENCES: [DroDivergence; 3] = [DroDivergence::Kl, DroDivergence::Chi2, DroDivergence::ReverseKl];
const KINDS: [ModelKind; 3] = [ModelKind::LinearRegression, ModelKind::SoftmaxClassifier, ModelKind::Mlp];

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=10).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..5.0, n),
            prop::collection::vec(0.01f64..1.0, n),
        )
    })
}

fn build(losses: Vec<f64>, masses: &[f64], rho: f64, div: DroDivergence) -> DroInstance {
    let base = DiscreteDistribution::from_weights(masses).unwrap();
    DroInstance::new(losses, base, rho, div).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kl_dual_never_below_primal((losses, masses) in instance(), rho in 0.0f64..0.5) {
        let inst = build(losses, &masses, rho, DroDivergence::Kl);
        let primal = kl_dro_primal(&inst).unwrap().value;
        let dual = kl_dro_dual(&inst).unwrap();
        prop_assert!(dual >= primal - 1e-8, "dual {dual} primal {primal}");
    }

    #[test]
    fn value_is_sandwiched((losses, masses) in instance(), rho in 0.0f64..3.0, d in 0usize..3) {
        let inst = build(losses, &masses, rho, DIVERGENCES[d]);
        let v = solve(&inst).unwrap().value;
        let slack = 1e-12 * inst.max_loss().abs().max(1.0);
        prop_assert!(v >= inst.base_expectation() - slack);
        prop_assert!(v <= inst.max_loss() + slack);
    }

    #[test]
    fn value_nondecreasing_in_radius((losses, masses) in instance(), d in 0usize..3) {
        let inst = build(losses, &masses, 0.0, DIVERGENCES[d]);
        let mut last = f64::NEG_INFINITY;
        for k in 0..=20 {
            let v = solve(&inst.with_rho(0.1 * k as f64).unwrap()).unwrap().value;
            prop_assert!(v >= last - 1e-10, "rho {}: {v} after {last}", 0.1 * k as f64);
            last = v;
        }
    }

    #[test]
    fn weighted_grad_is_linear_in_weights(seed in any::<u64>(), k in 0usize..3, a in 0.1f64..3.0, b in 0.1f64..3.0) {
        let mut rng = seeded_rng(seed, 0);
        let (model, batch, w1) = random_triple(&mut rng, KINDS[k]).unwrap();
        let w2 = WeightVector::new(w1.as_slice().iter().rev().map(|w| w + 0.25).collect()).unwrap();
        let mix = WeightVector::new(
            w1.as_slice().iter().zip(w2.as_slice()).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let g1 = weighted_grad(&model, &batch, &w1).unwrap();
        let g2 = weighted_grad(&model, &batch, &w2).unwrap();
        let g = weighted_grad(&model, &batch, &mix).unwrap();
        for ((g, g1), g2) in g.iter().zip(&g1).zip(&g2) {
            prop_assert!((g - (a * g1 + b * g2)).abs() <= 1e-12 * (1.0 + g.abs()));
        }
    }

    #[test]
    fn per_sample_losses_are_nonnegative(seed in any::<u64>(), k in 0usize..3) {
        let mut rng = seeded_rng(seed, 1);
        let (model, batch, _) = random_triple(&mut rng, KINDS[k]).unwrap();
        let losses = per_sample_loss(&model, &batch).unwrap();
        prop_assert!(losses.as_slice().iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn flips_change_exactly_the_flipped_labels(seed in any::<u64>(), fraction in 0.0f64..=1.0) {
        let data = gaussian_mixture_classification(3, 20, 3, 2.0, seed).unwrap();
        let noisy = flip_labels(&data, fraction, seed ^ 1).unwrap();
        let before = data.labels().unwrap();
        let after = noisy.labels().unwrap();
        let changed = before.iter().zip(after).filter(|(x, y)| x != y).count();
        prop_assert_eq!(changed, (fraction * before.len() as f64).floor() as usize);
        prop_assert_eq!(noisy.inputs(), data.inputs());
    }
}
