//! Randomized verification suites behind the `oracle` and `gradcheck` commands.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::seeded_rng;
use crate::dro::{
    kl_dro_dual, kl_dro_primal, optimal_weight_form_check, simplex_bruteforce, simplex_bruteforce_argmax, solve,
    DiscreteDistribution, DroDivergence, DroInstance,
};
use crate::error::Result;
use crate::models::{finite_diff_grad, per_sample_loss, weighted_grad, Batch, ModelKind, ModelSpec, ModelState, Targets};
use crate::reweight::WeightVector;

pub const DUALITY_TOL: f64 = 1e-8;
pub const FORM_TOL: f64 = 1e-6;
pub const GRID_TOL: f64 = 2e-3;
pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSuiteConfig {
    pub max_atoms: usize,
    pub trials: usize,
    pub rho_max: f64,
    pub seed: u64,
    pub grid_points: usize,
    /// Instances with at most this many atoms are also checked by brute force.
    pub brute_max_atoms: usize,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        Self {
            max_atoms: 10,
            trials: 200,
            rho_max: 0.5,
            seed: 0,
            grid_points: 2001,
            brute_max_atoms: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: usize,
    pub max_duality_gap: f64,
    pub max_form_deviation: f64,
    pub brute_checks: usize,
    pub max_brute_error: f64,
    pub max_brute_form_deviation: f64,
    pub failures: Vec<String>,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `n` uniform on `[2, max_atoms]`, losses `U[0, 5]`, base uniform or a flat
/// Dirichlet draw (even odds), `rho ~ U[0, rho_max]`.
pub fn random_instance<R: Rng>(rng: &mut R, max_atoms: usize, rho_max: f64) -> Result<DroInstance> {
    let n = rng.random_range(2..=max_atoms.max(2));
    let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
    let base = if rng.random_bool(0.5) {
        DiscreteDistribution::uniform(n)?
    } else {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        DiscreteDistribution::from_weights(&draws)?
    };
    let rho = rng.random_range(0.0..=rho_max);
    DroInstance::new(losses, base, rho, DroDivergence::Kl)
}

/// KL primal against dual on every instance, the tilted form of the worst
/// case, and for small instances all three divergences against brute force.
pub fn oracle_suite(config: &OracleSuiteConfig) -> Result<OracleReport> {
    let start = Instant::now();
    let mut rng = seeded_rng(config.seed, 20);
    let mut report = OracleReport {
        trials: config.trials,
        ..Default::default()
    };
    for trial in 0..config.trials {
        let inst = random_instance(&mut rng, config.max_atoms, config.rho_max)?;
        let primal = kl_dro_primal(&inst)?;
        let dual = kl_dro_dual(&inst)?;
        let gap = (primal.value - dual).abs();
        report.max_duality_gap = report.max_duality_gap.max(gap);
        if gap > DUALITY_TOL {
            report.failures.push(format!("trial {trial}: duality gap {gap:e}"));
        }
        let form = optimal_weight_form_check(&inst, primal.worst_dist.probs())?;
        report.max_form_deviation = report.max_form_deviation.max(form.max_rel_deviation);
        if !form.passes(FORM_TOL) {
            report.failures.push(format!("trial {trial}: KL form deviation {:e}", form.max_rel_deviation));
        }
        if inst.losses().len() > config.brute_max_atoms {
            continue;
        }
        report.brute_checks += 1;
        let brute = simplex_bruteforce(&inst, config.grid_points)?;
        for (what, value) in [("primal", primal.value), ("dual", dual)] {
            let err = (brute - value).abs();
            report.max_brute_error = report.max_brute_error.max(err);
            if err > GRID_TOL {
                report.failures.push(format!("trial {trial}: KL {what} off brute force by {err:e}"));
            }
        }
        for div in [DroDivergence::Chi2, DroDivergence::ReverseKl] {
            let other = inst.with_divergence(div);
            let solved = solve(&other)?;
            let (brute, argmax) = simplex_bruteforce_argmax(&other, config.grid_points)?;
            let err = (brute - solved.value).abs();
            report.max_brute_error = report.max_brute_error.max(err);
            if err > GRID_TOL {
                report.failures.push(format!("trial {trial}: {div:?} value off brute force by {err:e}"));
            }
            let solver_form = optimal_weight_form_check(&other, solved.worst_dist.probs())?;
            if !solver_form.passes(FORM_TOL) {
                report.failures.push(format!(
                    "trial {trial}: {div:?} solver form deviation {:e}",
                    solver_form.max_rel_deviation
                ));
            }
            let grid_form = optimal_weight_form_check(&other, &argmax)?;
            report.max_brute_form_deviation = report.max_brute_form_deviation.max(grid_form.max_abs_deviation);
            if grid_form.max_abs_deviation > GRID_TOL {
                report.failures.push(format!(
                    "trial {trial}: {div:?} brute-force maximizer off its form by {:e}",
                    grid_form.max_abs_deviation
                ));
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            seed: 0,
            step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindResult {
    pub kind: ModelKind,
    pub trials: usize,
    pub max_rel_error: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub kinds: Vec<KindResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(|k| k.failures == 0)
    }
}

/// A random model, batch and positive weight vector of the given kind.
pub fn random_triple<R: Rng>(rng: &mut R, kind: ModelKind) -> Result<(ModelState, Batch, WeightVector)> {
    let dim = rng.random_range(1..=5);
    let classes = rng.random_range(2..=4);
    let spec = match kind {
        ModelKind::LinearRegression => ModelSpec::linear(dim),
        ModelKind::SoftmaxClassifier => ModelSpec::softmax(dim, classes),
        ModelKind::Mlp => {
            let layers = rng.random_range(1..=2);
            ModelSpec::mlp(dim, (0..layers).map(|_| rng.random_range(2..=5)).collect(), classes)
        }
    };
    let theta: Vec<f64> = (0..spec.param_count())
        .map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let model = ModelState::new(spec, theta)?;
    let b = rng.random_range(1..=6);
    let inputs: Vec<f64> = (0..b * dim).map(|_| rng.sample(StandardNormal)).collect();
    let targets = match kind {
        ModelKind::LinearRegression => Targets::Regression((0..b).map(|_| rng.sample(StandardNormal)).collect()),
        _ => Targets::Classes((0..b).map(|_| rng.random_range(0..classes)).collect()),
    };
    let batch = Batch::new(inputs, dim, targets)?;
    let weights = WeightVector::new((0..b).map(|_| rng.random_range(0.5..3.0)).collect())?;
    Ok((model, batch, weights))
}

/// Relative L2 error of the analytic weighted gradient against central
/// differences of `(1/B) sum_i w_i l_i(theta)` with the weights held fixed.
pub fn gradcheck_triple(model: &ModelState, batch: &Batch, weights: &WeightVector, step: f64) -> Result<f64> {
    let analytic = weighted_grad(model, batch, weights)?;
    let w = weights.as_slice();
    let b = batch.len() as f64;
    let objective = |theta: &[f64]| {
        let m = model.with_theta(theta.to_vec()).expect("same shape");
        let losses = per_sample_loss(&m, batch).expect("finite losses");
        losses.as_slice().iter().zip(w).map(|(l, w)| w * l).sum::<f64>() / b
    };
    let numeric = finite_diff_grad(objective, model.theta(), step)?;
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    Ok(if norm > 0.0 { diff / norm } else { diff })
}

pub fn gradcheck_suite(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = seeded_rng(config.seed, 21);
    let mut kinds = Vec::new();
    for kind in [ModelKind::LinearRegression, ModelKind::SoftmaxClassifier, ModelKind::Mlp] {
        let mut result = KindResult {
            kind,
            trials: config.trials,
            max_rel_error: 0.0,
            failures: 0,
        };
        for _ in 0..config.trials {
            let (model, batch, weights) = random_triple(&mut rng, kind)?;
            let err = gradcheck_triple(&model, &batch, &weights, config.step)?;
            result.max_rel_error = result.max_rel_error.max(err);
            if !(err < GRADCHECK_TOL) {
                result.failures += 1;
            }
        }
        kinds.push(result);
    }
    Ok(GradcheckReport {
        kinds,
        seconds: start.elapsed().as_secs_f64(),
    })
}
