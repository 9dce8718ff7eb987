//! Base optimizers, the reweighted step, step-size schedules, and the
//! exponential-weighting baselines (batch tilted ERM and a moving-average
//! normalized variant).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{backward, forward, Batch, ModelState};
use crate::reweight::{LossVector, WeightStats, WeightingRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid("adam eps must be positive"));
        }
        Ok(())
    }
}

/// Step-size schedule over steps `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `C`
    Constant,
    /// `C / sqrt(t)`
    InvSqrtStep,
    /// `C / sqrt(T)`
    InvSqrtHorizon,
}

pub fn lr_at(schedule: Schedule, lr_base: f64, t: usize, horizon: usize) -> Result<f64> {
    if t == 0 || t > horizon {
        return Err(invalid(format!("step {t} outside 1..={horizon}")));
    }
    Ok(match schedule {
        Schedule::Constant => lr_base,
        Schedule::InvSqrtStep => lr_base / (t as f64).sqrt(),
        Schedule::InvSqrtHorizon => lr_base / (horizon as f64).sqrt(),
    })
}

/// Axis-aligned box `[lo, hi]^d` used as the feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxProjection {
    pub lo: f64,
    pub hi: f64,
}

impl BoxProjection {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(invalid(format!("bad box [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn apply(&self, theta: &mut [f64]) {
        theta.iter_mut().for_each(|v| *v = v.clamp(self.lo, self.hi));
    }
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

fn default_rule() -> WeightingRule {
    WeightingRule::erm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    #[serde(default = "default_rule")]
    pub rule: WeightingRule,
    pub lr_base: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<BoxProjection>,
}

impl TrainConfig {
    pub fn sgd(lr_base: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            rule: WeightingRule::erm(),
            lr_base,
            schedule: Schedule::Constant,
            steps,
            batch_size,
            seed,
            adam: AdamParams::default(),
            projection: None,
        }
    }

    pub fn adam(lr_base: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            ..Self::sgd(lr_base, steps, batch_size, seed)
        }
    }

    pub fn with_rule(mut self, rule: WeightingRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_projection(mut self, projection: BoxProjection) -> Self {
        self.projection = Some(projection);
        self
    }

    /// `steps == 0` is accepted: a run then consists of the initial evaluation only.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(invalid("lr_base must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        self.rule.validate()?;
        self.adam.validate()?;
        if let Some(p) = &self.projection {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Parameters, step counter, optional Adam moments and feasible box.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    model: ModelState,
    t: usize,
    moments: Option<Moments>,
    projection: Option<BoxProjection>,
}

impl OptimizerState {
    pub fn new(model: ModelState, kind: OptimizerKind) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => {
                let n = model.theta().len();
                Some(Moments {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                })
            }
        };
        Self {
            model,
            t: 0,
            moments,
            projection: None,
        }
    }

    pub fn for_config(model: ModelState, config: &TrainConfig) -> Self {
        Self::new(model, config.optimizer).with_projection(config.projection)
    }

    pub fn with_projection(mut self, projection: Option<BoxProjection>) -> Self {
        self.projection = projection;
        if let Some(p) = &self.projection {
            p.apply(self.model.theta_mut());
        }
        self
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn theta(&self) -> &[f64] {
        self.model.theta()
    }

    pub fn step(&self) -> usize {
        self.t
    }

    pub fn first_moment(&self) -> Option<&[f64]> {
        self.moments.as_ref().map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self) -> Option<&[f64]> {
        self.moments.as_ref().map(|m| m.second.as_slice())
    }

    fn finish(mut self) -> Result<Self> {
        if let Some(p) = &self.projection {
            p.apply(self.model.theta_mut());
        }
        self.t += 1;
        if self.model.theta().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: self.t,
                sample: None,
            });
        }
        Ok(self)
    }
}

fn check_gradient(state: &OptimizerState, gradient: &[f64]) -> Result<()> {
    if gradient.len() != state.theta().len() {
        return Err(invalid(format!(
            "gradient has {} entries, model has {}",
            gradient.len(),
            state.theta().len()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.t + 1,
            sample: None,
        });
    }
    Ok(())
}

/// `theta <- Proj(theta - lr * gradient)`
pub fn sgd_step(mut state: OptimizerState, gradient: &[f64], lr: f64) -> Result<OptimizerState> {
    check_gradient(&state, gradient)?;
    for (p, g) in state.model.theta_mut().iter_mut().zip(gradient) {
        *p -= lr * g;
    }
    state.finish()
}

/// Bias-corrected Adam; moments are created lazily if the state was built for SGD.
pub fn adam_step(
    mut state: OptimizerState,
    gradient: &[f64],
    lr: f64,
    params: &AdamParams,
) -> Result<OptimizerState> {
    check_gradient(&state, gradient)?;
    params.validate()?;
    let n = gradient.len();
    let t = (state.t + 1) as i32;
    let bc1 = 1.0 - params.beta1.powi(t);
    let bc2 = 1.0 - params.beta2.powi(t);
    let moments = state.moments.get_or_insert_with(|| Moments {
        first: vec![0.0; n],
        second: vec![0.0; n],
    });
    let theta = state.model.theta_mut();
    for i in 0..n {
        let g = gradient[i];
        let m = &mut moments.first[i];
        let v = &mut moments.second[i];
        *m = params.beta1 * *m + (1.0 - params.beta1) * g;
        *v = params.beta2 * *v + (1.0 - params.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + params.eps);
    }
    state.finish()
}

/// Applies the configured base optimizer with `direction` in place of the gradient.
pub fn apply_direction(
    state: OptimizerState,
    direction: &[f64],
    config: &TrainConfig,
) -> Result<OptimizerState> {
    let lr = lr_at(config.schedule, config.lr_base, state.t + 1, config.steps)?;
    match config.optimizer {
        OptimizerKind::Sgd => sgd_step(state, direction, lr),
        OptimizerKind::Adam => adam_step(state, direction, lr, &config.adam),
    }
}

/// What one training step saw and did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub stats: WeightStats,
    /// Mean of weight times loss over the batch.
    pub objective: f64,
    /// The direction handed to the base optimizer.
    pub direction: Vec<f64>,
}

fn check_losses(losses: &[f64], step: usize) -> Result<()> {
    match losses.iter().position(|l| !l.is_finite()) {
        Some(i) => Err(Error::Divergence {
            step,
            sample: Some(i),
        }),
        None => Ok(()),
    }
}

/// Shared path: forward, weigh, accumulate `sum_i coeff_i grad l_i`, update.
fn weighted_update<F>(
    state: OptimizerState,
    batch: &Batch,
    config: &TrainConfig,
    weigh: F,
) -> Result<(OptimizerState, StepReport)>
where
    F: FnOnce(&[f64]) -> Result<(Vec<f64>, Vec<f64>, WeightStats)>,
{
    let step = state.t + 1;
    let fwd = forward(state.model(), batch)?;
    check_losses(&fwd.losses, step)?;
    let (weights, coeffs, stats) = weigh(&fwd.losses)?;
    let direction = backward(state.model(), batch, &fwd, &coeffs);
    if direction.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, sample: None });
    }
    let objective = fwd
        .losses
        .iter()
        .zip(&weights)
        .map(|(l, w)| w * l)
        .sum::<f64>()
        / batch.len() as f64;
    let next = apply_direction(state, &direction, config)?;
    Ok((
        next,
        StepReport {
            losses: fwd.losses,
            weights,
            stats,
            objective,
            direction,
        },
    ))
}

/// One reweighted step: `v = (1/B) sum_i g(l_i) grad l_i`, then the base update.
pub fn rgd_step_report(
    state: OptimizerState,
    batch: &Batch,
    rule: &WeightingRule,
    config: &TrainConfig,
) -> Result<(OptimizerState, StepReport)> {
    rule.validate()?;
    let scale = 1.0 / batch.len() as f64;
    weighted_update(state, batch, config, |losses| {
        let weights: Vec<f64> = losses.iter().map(|&u| rule.weight_unchecked(u)).collect();
        let coeffs = weights.iter().map(|w| w * scale).collect();
        let stats = WeightStats::compute(losses, &weights, rule);
        Ok((weights, coeffs, stats))
    })
}

pub fn rgd_step(
    state: OptimizerState,
    batch: &Batch,
    rule: &WeightingRule,
    config: &TrainConfig,
) -> Result<OptimizerState> {
    rgd_step_report(state, batch, rule, config).map(|(s, _)| s)
}

/// Unweighted mini-batch step with the configured base optimizer.
pub fn plain_step(state: OptimizerState, batch: &Batch, config: &TrainConfig) -> Result<OptimizerState> {
    let step = state.t + 1;
    let fwd = forward(state.model(), batch)?;
    check_losses(&fwd.losses, step)?;
    let coeffs = vec![1.0 / batch.len() as f64; batch.len()];
    let grad = backward(state.model(), batch, &fwd, &coeffs);
    apply_direction(state, &grad, config)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_tilt(t_tilt: f64) -> Result<()> {
    if !(t_tilt > 0.0 && t_tilt.is_finite()) {
        return Err(invalid(format!("tilt must be positive, got {t_tilt}")));
    }
    Ok(())
}

/// `(1/t) log((1/n) sum_i exp(t l_i))`
pub fn term_objective(losses: &LossVector, t_tilt: f64) -> Result<f64> {
    check_tilt(t_tilt)?;
    let l = losses.as_slice();
    let lse = log_sum_exp(l.iter().map(|&v| t_tilt * v));
    Ok((lse - (l.len() as f64).ln()) / t_tilt)
}

/// `softmax(t * l)`
pub fn tilted_probabilities(losses: &[f64], t_tilt: f64) -> Vec<f64> {
    let lse = log_sum_exp(losses.iter().map(|&v| t_tilt * v));
    losses.iter().map(|&v| (t_tilt * v - lse).exp()).collect()
}

/// `sum_i p_i grad l_i` with `p = softmax(t * l)` held constant.
pub fn term_grad(model: &ModelState, batch: &Batch, t_tilt: f64) -> Result<Vec<f64>> {
    check_tilt(t_tilt)?;
    let fwd = forward(model, batch)?;
    check_losses(&fwd.losses, 0)?;
    let p = tilted_probabilities(&fwd.losses, t_tilt);
    Ok(backward(model, batch, &fwd, &p))
}

/// Batch tilted-ERM step. Reported weights are `B * p_i` so they share the
/// mean-one scale of the other rules.
pub fn term_step_report(
    state: OptimizerState,
    batch: &Batch,
    t_tilt: f64,
    config: &TrainConfig,
) -> Result<(OptimizerState, StepReport)> {
    check_tilt(t_tilt)?;
    let b = batch.len() as f64;
    weighted_update(state, batch, config, |losses| {
        let p = tilted_probabilities(losses, t_tilt);
        let weights: Vec<f64> = p.iter().map(|q| q * b).collect();
        let stats = WeightStats::from_weights(&weights, 0);
        Ok((weights, p, stats))
    })
}

/// Running normalizer for exponentially weighted batches, kept in the log domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingAverageState {
    pub lambda: f64,
    pub beta: f64,
    log_z: Option<f64>,
}

impl MovingAverageState {
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::State(format!("lambda must be positive, got {lambda}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::State(format!("moving-average beta must lie in (0, 1), got {beta}")));
        }
        Ok(Self {
            lambda,
            beta,
            log_z: None,
        })
    }

    /// The normalizer `z`; `None` before the first batch.
    pub fn z(&self) -> Option<f64> {
        self.log_z.map(f64::exp)
    }

    pub fn log_z(&self) -> Option<f64> {
        self.log_z
    }

    /// Folds one batch into `z` and returns `w_i = exp(lambda l_i) / z`.
    pub fn update(&mut self, losses: &[f64]) -> Result<Vec<f64>> {
        let scaled = losses.iter().map(|&l| self.lambda * l);
        let log_mean = log_sum_exp(scaled.clone()) - (losses.len() as f64).ln();
        let log_z = match self.log_z {
            None => log_mean,
            Some(prev) => log_sum_exp(
                [self.beta.ln() + prev, (1.0 - self.beta).ln() + log_mean].into_iter(),
            ),
        };
        if !log_z.is_finite() {
            return Err(Error::State("moving-average normalizer is not positive and finite".into()));
        }
        self.log_z = Some(log_z);
        Ok(scaled.map(|a| (a - log_z).exp()).collect())
    }
}

/// Moving-average exponential weighting (unclipped) followed by the base update.
pub fn ma_exp_step_report(
    state: OptimizerState,
    mut baseline: MovingAverageState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(OptimizerState, MovingAverageState, StepReport)> {
    let scale = 1.0 / batch.len() as f64;
    let (next, report) = weighted_update(state, batch, config, |losses| {
        let weights = baseline.update(losses)?;
        let coeffs = weights.iter().map(|w| w * scale).collect();
        let stats = WeightStats::from_weights(&weights, 0);
        Ok((weights, coeffs, stats))
    })?;
    Ok((next, baseline, report))
}

pub fn ma_exp_step(
    state: OptimizerState,
    baseline: MovingAverageState,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(OptimizerState, MovingAverageState)> {
    ma_exp_step_report(state, baseline, batch, config).map(|(s, b, _)| (s, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{finite_diff_grad, per_sample_grads, per_sample_loss, ModelSpec, Targets};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_state(theta: f64) -> OptimizerState {
        let m = ModelState::new(ModelSpec::linear(1), vec![theta]).unwrap();
        OptimizerState::new(m, OptimizerKind::Sgd)
    }

    #[test]
    fn schedules() {
        assert_eq!(lr_at(Schedule::InvSqrtStep, 1.0, 4, 10).unwrap(), 0.5);
        for t in [1, 50, 100] {
            assert_eq!(lr_at(Schedule::InvSqrtHorizon, 2.0, t, 100).unwrap(), 0.2);
        }
        assert_eq!(lr_at(Schedule::Constant, 4.0, 3, 5).unwrap(), 4.0);
        assert!(lr_at(Schedule::Constant, 1.0, 0, 5).is_err());
        assert!(lr_at(Schedule::Constant, 1.0, 6, 5).is_err());
    }

    #[test]
    fn sgd_examples() {
        let s = sgd_step(scalar_state(1.0), &[1.0], 0.5).unwrap();
        assert_eq!(s.theta(), &[0.5]);
        assert_eq!(s.step(), 1);
        let s = sgd_step(scalar_state(0.7), &[0.0], 0.5).unwrap();
        assert_eq!(s.theta(), &[0.7]);
        let s = sgd_step(scalar_state(0.0), &[-2.0], 4.0).unwrap();
        assert_eq!(s.theta(), &[8.0]);
        assert!(matches!(
            sgd_step(scalar_state(0.0), &[f64::NAN], 1.0),
            Err(Error::Divergence { step: 1, .. })
        ));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps)
        let p = AdamParams::default();
        let s = adam_step(scalar_state(0.0), &[1.0], 0.1, &p).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.theta()[0] - expected).abs() < 1e-15);

        let mut s = scalar_state(2.0);
        for _ in 0..5 {
            s = adam_step(s, &[0.0], 0.1, &p).unwrap();
        }
        assert_eq!(s.theta(), &[2.0]);

        let s1 = adam_step(scalar_state(1.0), &[3.0], 0.1, &p).unwrap();
        let s2 = adam_step(s1.clone(), &[3.0], 0.1, &p).unwrap();
        assert!(s1.theta()[0] < 1.0 && s2.theta()[0] < s1.theta()[0]);
        assert!(adam_step(scalar_state(0.0), &[f64::INFINITY], 0.1, &p).is_err());
    }

    #[test]
    fn rgd_single_sample_example() {
        let d = 3;
        let m = ModelState::zeros(ModelSpec::linear(d)).unwrap();
        let b = Batch::new(vec![1.0, 0.0, 0.0], d, Targets::Regression(vec![1.0])).unwrap();
        let cfg = TrainConfig::sgd(1.0, 10, 1, 0);
        let rule = WeightingRule::kl(1.0).unwrap();
        let s = rgd_step(OptimizerState::new(m, OptimizerKind::Sgd), &b, &rule, &cfg).unwrap();
        assert!((s.theta()[0] - 2.0 * 0.5f64.exp()).abs() < 1e-15);
        assert!((s.theta()[0] - 3.297443).abs() < 1e-6);
        assert_eq!(&s.theta()[1..], &[0.0, 0.0]);
    }

    #[test]
    fn projection_clamps() {
        let m = ModelState::zeros(ModelSpec::linear(2)).unwrap();
        let b = Batch::new(vec![1.0, -1.0], 2, Targets::Regression(vec![10.0])).unwrap();
        let cfg = TrainConfig::sgd(1.0, 10, 1, 0).with_projection(BoxProjection::new(-1.0, 1.0).unwrap());
        let s = OptimizerState::for_config(m, &cfg);
        let s = rgd_step(s, &b, &WeightingRule::kl(1.0).unwrap(), &cfg).unwrap();
        assert_eq!(s.theta(), &[1.0, -1.0]);
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, c: usize) -> Batch {
        let x = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y = (0..n).map(|_| rng.random_range(0..c)).collect();
        Batch::new(x, d, Targets::Classes(y)).unwrap()
    }

    #[test]
    fn erm_rule_matches_plain_step_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [TrainConfig::sgd(0.3, 20, 8, 0), TrainConfig::adam(0.01, 20, 8, 0)] {
            let spec = ModelSpec::mlp(4, vec![6], 3);
            let mut a = OptimizerState::for_config(ModelState::init(spec.clone(), 9).unwrap(), &cfg);
            let mut b = a.clone();
            for _ in 0..20 {
                let batch = random_batch(&mut rng, 8, 4, 3);
                a = rgd_step(a, &batch, &WeightingRule::erm(), &cfg).unwrap();
                b = plain_step(b, &batch, &cfg).unwrap();
                let bits = |s: &OptimizerState| s.theta().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a), bits(&b));
            }
        }
    }

    #[test]
    fn applied_direction_is_weighted_mean_of_sample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ModelSpec::softmax(5, 4);
        let mut state = OptimizerState::new(ModelState::zeros(spec).unwrap(), OptimizerKind::Sgd);
        let rule = WeightingRule::kl(1.0).unwrap();
        let cfg = TrainConfig::sgd(0.5, 30, 16, 0);
        for _ in 0..30 {
            let batch = random_batch(&mut rng, 16, 5, 4);
            let grads = per_sample_grads(state.model(), &batch).unwrap();
            let losses = per_sample_loss(state.model(), &batch).unwrap();
            let (next, report) = rgd_step_report(state, &batch, &rule, &cfg).unwrap();
            for j in 0..report.direction.len() {
                let expect: f64 = grads
                    .iter()
                    .zip(losses.as_slice())
                    .map(|(g, &l)| rule.weight(l).unwrap() * g[j])
                    .sum::<f64>()
                    / 16.0;
                assert!((report.direction[j] - expect).abs() <= 1e-12);
            }
            state = next;
        }
    }

    #[test]
    fn term_objective_examples() {
        let l = LossVector::new(vec![1.7; 4]).unwrap();
        assert!((term_objective(&l, 3.0).unwrap() - 1.7).abs() < 1e-14);
        let l = LossVector::new(vec![0.0, 1.0]).unwrap();
        // log((1 + e) / 2)
        assert!((term_objective(&l, 1.0).unwrap() - 0.620114506958).abs() < 1e-9);
        assert!((term_objective(&l, 1e-3).unwrap() - 0.5).abs() < 1e-3);
        assert!(term_objective(&l, 0.0).is_err());
    }

    #[test]
    fn term_grad_properties() {
        let m = ModelState::zeros(ModelSpec::linear(2)).unwrap();
        // equal losses: both residuals are -1
        let b = Batch::new(vec![1.0, 0.0, 0.0, 1.0], 2, Targets::Regression(vec![1.0, 1.0])).unwrap();
        let g = term_grad(&m, &b, 2.0).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-15 && (g[1] + 1.0).abs() < 1e-15);

        // losses [0, 10]
        let y = vec![0.0, 10f64.sqrt()];
        let b = Batch::new(vec![1.0, 0.0, 0.0, 1.0], 2, Targets::Regression(y)).unwrap();
        let p = tilted_probabilities(per_sample_loss(&m, &b).unwrap().as_slice(), 5.0);
        assert!(p[1] > 0.99);
        let g = term_grad(&m, &b, 5.0).unwrap();
        let g1 = &per_sample_grads(&m, &b).unwrap()[1];
        assert!((g[1] - g1[1]).abs() < 1e-10 * g1[1].abs());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ModelSpec::mlp(3, vec![5], 3);
        let m = ModelState::init(spec.clone(), 3).unwrap();
        let b = random_batch(&mut rng, 7, 3, 3);
        let analytic = term_grad(&m, &b, 1.5).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let l = per_sample_loss(&ModelState::new(spec.clone(), t.to_vec()).unwrap(), &b).unwrap();
                term_objective(&l, 1.5).unwrap()
            },
            m.theta(),
            1e-5,
        )
        .unwrap();
        let num: f64 = analytic.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum();
        let den: f64 = fd.iter().map(|f| f * f).sum();
        assert!((num / den).sqrt() < 1e-5);
    }

    #[test]
    fn moving_average_weights() {
        let mut ma = MovingAverageState::new(1.0, 0.5).unwrap();
        assert!(ma.z().is_none());
        let w = ma.update(&[0.2, 1.3, 0.7]).unwrap();
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-14);
        assert!(ma.z().unwrap() > 0.0);

        let mut ma = MovingAverageState::new(2.0, 0.75).unwrap();
        for _ in 0..10 {
            let w = ma.update(&[0.4; 5]).unwrap();
            for v in w {
                assert!((v - 1.0).abs() < 1e-14);
            }
        }

        let mut ma = MovingAverageState::new(1.0, 0.25).unwrap();
        let w = ma.update(&[0.0, 10.0]).unwrap();
        assert!((w[1] / w[0] / 10f64.exp() - 1.0).abs() < 1e-12);

        assert!(MovingAverageState::new(1.0, 1.0).is_err());
        assert!(MovingAverageState::new(0.0, 0.5).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let m = ModelState::zeros(ModelSpec::linear(1)).unwrap();
        let b = Batch::new(vec![1.0], 1, Targets::Regression(vec![1.0])).unwrap();
        let cfg = TrainConfig::sgd(10.0, 1000, 1, 0);
        let mut s = OptimizerState::new(m, OptimizerKind::Sgd);
        let err = loop {
            match plain_step(s, &b, &cfg) {
                Ok(next) => s = next,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, Error::Divergence { step, .. } if step > 1));
    }
}
