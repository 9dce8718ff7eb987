//! Exact worst-case expectations over a finite support.
//!
//! For a loss vector `l`, base distribution `p` and radius `rho`, the robust
//! value is `sup { E_q[l] : D(q || p) <= rho }` with `D` an f-divergence:
//!
//! - KL, `f(x) = x ln x`: the maximizer is the exponential tilt
//!   `q_i ∝ p_i exp(l_i / beta)`; the dual is
//!   `inf_{beta > 0} beta ln E_p[exp(l / beta)] + beta rho`.
//! - chi-squared, `f(x) = (x - 1)^2`: `q_i = p_i max(0, 1 + t (l_i - mu))`.
//! - reverse KL, `f(x) = -ln x`: `q_i ∝ p_i / (tau - l_i)` with `tau > max l`.
//!
//! [`simplex_bruteforce`] evaluates the divergence straight from its
//! definition on a grid of the simplex and shares no code with the solvers.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, invalid, Error, Result};

const SUM_TOL: f64 = 1e-12;
const BISECTION_ITERS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DroDivergence {
    Kl,
    Chi2,
    ReverseKl,
}

/// Probability vector summing to one within `1e-12`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution(Vec<f64>);

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("distribution needs at least one atom"));
        }
        check_finite(&probs, "probability")?;
        if let Some(i) = probs.iter().position(|&p| p < 0.0) {
            return Err(invalid(format!("probability {i} is negative")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("distribution needs at least one atom"));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    /// Normalizes nonnegative masses.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) || weights.iter().any(|&w| w < 0.0) {
            return Err(invalid("weights must be nonnegative with a positive finite sum"));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroInstance {
    losses: Vec<f64>,
    base: DiscreteDistribution,
    rho: f64,
    divergence: DroDivergence,
}

/// JSON record form of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroRecord {
    pub losses: Vec<f64>,
    pub probs: Vec<f64>,
    pub rho: f64,
    pub divergence: DroDivergence,
}

impl DroInstance {
    pub fn new(
        losses: Vec<f64>,
        base: DiscreteDistribution,
        rho: f64,
        divergence: DroDivergence,
    ) -> Result<Self> {
        check_finite(&losses, "loss")?;
        if losses.len() != base.len() {
            return Err(invalid(format!(
                "{} losses for {} atoms",
                losses.len(),
                base.len()
            )));
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(invalid(format!("rho must be nonnegative, got {rho}")));
        }
        Ok(Self {
            losses,
            base,
            rho,
            divergence,
        })
    }

    pub fn uniform(losses: Vec<f64>, rho: f64, divergence: DroDivergence) -> Result<Self> {
        let base = DiscreteDistribution::uniform(losses.len())?;
        Self::new(losses, base, rho, divergence)
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn base(&self) -> &DiscreteDistribution {
        &self.base
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn divergence(&self) -> DroDivergence {
        self.divergence
    }

    pub fn with_divergence(&self, divergence: DroDivergence) -> Self {
        Self {
            divergence,
            ..self.clone()
        }
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(self.losses.clone(), self.base.clone(), rho, self.divergence)
    }

    pub fn base_expectation(&self) -> f64 {
        self.base.expectation(&self.losses)
    }

    /// Largest loss over atoms with positive base mass.
    pub fn max_loss(&self) -> f64 {
        self.support().map(|i| self.losses[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.base.probs().iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, _)| i)
    }

    fn is_constant(&self) -> bool {
        let max = self.max_loss();
        self.support().all(|i| self.losses[i] == max)
    }

    /// Base mass on the maximizing atoms.
    fn argmax_mass(&self) -> f64 {
        let max = self.max_loss();
        self.support().filter(|&i| self.losses[i] == max).map(|i| self.base.probs()[i]).sum()
    }

    fn point_mass_solution(&self) -> Result<DroSolution> {
        let max = self.max_loss();
        let p = self.base.probs();
        let masses: Vec<f64> = (0..p.len())
            .map(|i| if p[i] > 0.0 && self.losses[i] == max { p[i] } else { 0.0 })
            .collect();
        Ok(DroSolution {
            value: max,
            worst_dist: DiscreteDistribution::from_weights(&masses)?,
            dual: DualCertificate::PointMass,
        })
    }

    fn base_solution(&self) -> DroSolution {
        DroSolution {
            value: self.base_expectation(),
            worst_dist: self.base.clone(),
            dual: DualCertificate::Base,
        }
    }
}

impl TryFrom<DroRecord> for DroInstance {
    type Error = Error;

    fn try_from(r: DroRecord) -> Result<Self> {
        DroInstance::new(r.losses, DiscreteDistribution::new(r.probs)?, r.rho, r.divergence)
    }
}

impl From<&DroInstance> for DroRecord {
    fn from(i: &DroInstance) -> Self {
        DroRecord {
            losses: i.losses.clone(),
            probs: i.base.probs().to_vec(),
            rho: i.rho,
            divergence: i.divergence,
        }
    }
}

/// Which member of the divergence's optimal family the solver returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualCertificate {
    /// Zero radius or constant losses: the base distribution itself.
    Base,
    /// The radius admits the point mass on the maximizing atoms.
    PointMass,
    /// KL: `q_i ∝ p_i exp(l_i / beta)`.
    Tilted { beta: f64 },
    /// Chi-squared: `q_i = p_i max(0, 1 + slope (l_i - shift))`.
    Affine { slope: f64, shift: f64 },
    /// Reverse KL: `q_i ∝ p_i / (pole - l_i)`.
    Reciprocal { pole: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroSolution {
    pub value: f64,
    pub worst_dist: DiscreteDistribution,
    pub dual: DualCertificate,
}

/// `sum_i p_i f(q_i / p_i)` straight from the f-divergence definition.
///
/// KL and reverse KL use the generators `x ln x - x + 1` and `x - 1 - ln x`,
/// which give the same divergence for normalized `q` but are nonnegative
/// term by term, so a `q` next to `p` cannot round to a negative value.
pub fn f_divergence(divergence: DroDivergence, q: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if pi == 0.0 {
            if qi > 0.0 {
                return f64::INFINITY;
            }
            continue;
        }
        let x = qi / pi;
        total += pi
            * match divergence {
                DroDivergence::Kl => {
                    if x == 0.0 {
                        1.0
                    } else {
                        x * (x - 1.0).ln_1p() - (x - 1.0)
                    }
                }
                DroDivergence::Chi2 => (x - 1.0) * (x - 1.0),
                DroDivergence::ReverseKl => {
                    if x == 0.0 {
                        return f64::INFINITY;
                    }
                    (x - 1.0) - (x - 1.0).ln_1p()
                }
            };
    }
    total
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn require(instance: &DroInstance, divergence: DroDivergence) -> Result<()> {
    if instance.divergence != divergence {
        return Err(invalid(format!(
            "solver for {divergence:?} given a {:?} instance",
            instance.divergence
        )));
    }
    Ok(())
}

/// Bisects `[lo, hi]` for a root of an increasing function until the interval stops shrinking.
fn bisect_increasing<F: FnMut(f64) -> f64>(mut lo: f64, mut hi: f64, mut f: F) -> f64 {
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exponential tilt with inverse temperature `eta = 1/beta`.
struct Tilt {
    log_p: Vec<f64>,
    shifted: Vec<f64>,
}

impl Tilt {
    fn new(instance: &DroInstance) -> Self {
        let max = instance.max_loss();
        let p = instance.base.probs();
        Self {
            log_p: p.iter().map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect(),
            shifted: instance.losses.iter().map(|l| l - max).collect(),
        }
    }

    /// `(q, KL(q || p))`
    fn eval(&self, eta: f64) -> (Vec<f64>, f64) {
        let logw: Vec<f64> = self.log_p.iter().zip(&self.shifted).map(|(lp, a)| lp + eta * a).collect();
        let lse = log_sum_exp(&logw);
        let q: Vec<f64> = logw.iter().map(|w| (w - lse).exp()).collect();
        let mean_a: f64 = q.iter().zip(&self.shifted).map(|(qi, a)| if *qi > 0.0 { qi * a } else { 0.0 }).sum();
        (q, (eta * mean_a - lse).max(0.0))
    }
}

/// KL worst case by bisection on the tilt until the divergence meets the radius.
pub fn kl_dro_primal(instance: &DroInstance) -> Result<DroSolution> {
    require(instance, DroDivergence::Kl)?;
    if instance.rho == 0.0 || instance.is_constant() {
        return Ok(instance.base_solution());
    }
    let kl_max = -instance.argmax_mass().ln();
    if instance.rho >= kl_max {
        return instance.point_mass_solution();
    }
    let tilt = Tilt::new(instance);
    let spread = instance.max_loss()
        - instance.support().map(|i| instance.losses[i]).fold(f64::INFINITY, f64::min);
    let mut hi = 1.0 / spread;
    while tilt.eval(hi).1 <= instance.rho {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Oracle("tilt bisection failed to bracket the radius".into()));
        }
    }
    let eta = bisect_increasing(0.0, hi, |eta| tilt.eval(eta).1 - instance.rho);
    let (q, kl) = tilt.eval(eta);
    if (kl - instance.rho).abs() > 1e-10 {
        return Err(Error::Oracle(format!(
            "tilt bisection stalled at KL {kl} for radius {}",
            instance.rho
        )));
    }
    let worst_dist = DiscreteDistribution::from_weights(&q)?;
    Ok(DroSolution {
        value: worst_dist.expectation(&instance.losses),
        worst_dist,
        dual: DualCertificate::Tilted { beta: 1.0 / eta },
    })
}

/// `beta ln E_p[exp(l / beta)] + beta rho`, evaluated in the log domain.
pub fn kl_dual_objective(instance: &DroInstance, beta: f64) -> f64 {
    let max = instance.max_loss();
    let p = instance.base.probs();
    let min = instance.support().map(|i| instance.losses[i]).fold(f64::INFINITY, f64::min);
    let log_mgf = if (max - min) / beta < 1.0 {
        // near-flat tilt: ln(1 + E_p[expm1(a / beta)]) keeps the relative precision
        // that the multiplication by a large beta would otherwise amplify
        let total: f64 = instance.support().map(|i| p[i]).sum();
        let excess: f64 = instance
            .support()
            .map(|i| p[i] * ((instance.losses[i] - max) / beta).exp_m1())
            .sum();
        (excess / total).ln_1p()
    } else {
        let terms: Vec<f64> = p
            .iter()
            .zip(&instance.losses)
            .map(|(&p, &l)| if p > 0.0 { p.ln() + (l - max) / beta } else { f64::NEG_INFINITY })
            .collect();
        log_sum_exp(&terms)
    };
    max + beta * log_mgf + beta * instance.rho
}

/// KL dual value: golden-section search over `ln beta`, together with the
/// `beta -> 0` limit (max loss) and, at zero radius, the `beta -> inf` limit.
pub fn kl_dro_dual(instance: &DroInstance) -> Result<f64> {
    require(instance, DroDivergence::Kl)?;
    if instance.is_constant() {
        return Ok(instance.max_loss());
    }
    let spread = instance.max_loss()
        - instance.support().map(|i| instance.losses[i]).fold(f64::INFINITY, f64::min);
    let f = |s: f64| kl_dual_objective(instance, s.exp());
    let (mut a, mut b) = (spread.ln() - 40.0, spread.ln() + 40.0);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut best = fc.min(fd);
    for _ in 0..BISECTION_ITERS {
        if b - a < 1e-12 {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        best = best.min(fc).min(fd);
    }
    let mut value = best.min(instance.max_loss());
    if instance.rho == 0.0 {
        value = value.min(instance.base_expectation());
    }
    Ok(value)
}

/// Chi-squared family member at `slope`; the shift is solved exactly for normalization.
fn chi2_member(losses: &[f64], p: &[f64], order: &[usize], slope: f64) -> (Vec<f64>, f64) {
    // Activate atoms from the largest loss down until the normalizing shift is consistent.
    let (mut mass, mut weighted) = (0.0, 0.0);
    let mut shift = f64::NAN;
    for (k, &i) in order.iter().enumerate() {
        mass += p[i];
        weighted += p[i] * (1.0 + slope * losses[i]);
        let mu = (weighted - 1.0) / (slope * mass);
        let floor = mu - 1.0 / slope;
        let next_inactive = order.get(k + 1).is_none_or(|&j| losses[j] <= floor);
        if losses[i] > floor && next_inactive {
            shift = mu;
            break;
        }
    }
    let q = p
        .iter()
        .zip(losses)
        .map(|(&pi, &l)| if pi > 0.0 { pi * (1.0 + slope * (l - shift)).max(0.0) } else { 0.0 })
        .collect();
    (q, shift)
}

fn chi2_of(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(_, &pi)| pi > 0.0)
        .map(|(qi, pi)| (qi - pi) * (qi - pi) / pi)
        .sum()
}

/// Chi-squared worst case via the clamped affine family.
pub fn chi2_dro_value(instance: &DroInstance) -> Result<DroSolution> {
    require(instance, DroDivergence::Chi2)?;
    if instance.rho == 0.0 || instance.is_constant() {
        return Ok(instance.base_solution());
    }
    let chi2_max = 1.0 / instance.argmax_mass() - 1.0;
    if instance.rho >= chi2_max {
        return instance.point_mass_solution();
    }
    let p = instance.base.probs();
    let losses = &instance.losses;
    let mut order: Vec<usize> = instance.support().collect();
    order.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap_or(Ordering::Equal));
    let div = |slope: f64| chi2_of(&chi2_member(losses, p, &order, slope).0, p);

    let spread = instance.max_loss() - losses[*order.last().expect("non-empty support")];
    let mut hi = 1.0 / spread;
    while div(hi) <= instance.rho {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Oracle("chi2 search failed to bracket the radius".into()));
        }
    }
    let slope = bisect_increasing(0.0, hi, |s| div(s) - instance.rho);
    let (q, shift) = chi2_member(losses, p, &order, slope);
    let worst_dist = DiscreteDistribution::from_weights(&q)?;
    Ok(DroSolution {
        value: worst_dist.expectation(losses),
        worst_dist,
        dual: DualCertificate::Affine { slope, shift },
    })
}

fn revkl_member(instance: &DroInstance, pole: f64) -> (Vec<f64>, f64) {
    let p = instance.base.probs();
    let raw: Vec<f64> = p
        .iter()
        .zip(&instance.losses)
        .map(|(&pi, &l)| if pi > 0.0 { pi / (pole - l) } else { 0.0 })
        .collect();
    let z: f64 = raw.iter().sum();
    let q: Vec<f64> = raw.iter().map(|r| r / z).collect();
    let d = p
        .iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>();
    (q, d)
}

/// Reverse-KL worst case via the reciprocal family; search over `ln(pole - max loss)`.
pub fn revkl_dro_value(instance: &DroInstance) -> Result<DroSolution> {
    require(instance, DroDivergence::ReverseKl)?;
    if instance.rho == 0.0 || instance.is_constant() {
        return Ok(instance.base_solution());
    }
    let max = instance.max_loss();
    // divergence decreases as the pole moves away from the max loss
    let div = |s: f64| revkl_member(instance, max + s.exp()).1;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    while div(lo) <= instance.rho {
        lo -= 4.0;
        if lo < -700.0 {
            return Err(Error::Oracle("reverse-KL search failed to bracket the radius".into()));
        }
    }
    while div(hi) > instance.rho {
        hi += 4.0;
        if hi > 700.0 {
            return Err(Error::Oracle("reverse-KL search failed to bracket the radius".into()));
        }
    }
    let s = bisect_increasing(lo, hi, |s| instance.rho - div(s));
    let pole = max + s.exp();
    let (q, _) = revkl_member(instance, pole);
    let worst_dist = DiscreteDistribution::from_weights(&q)?;
    Ok(DroSolution {
        value: worst_dist.expectation(&instance.losses),
        worst_dist,
        dual: DualCertificate::Reciprocal { pole },
    })
}

/// Dispatches on the instance's divergence.
pub fn solve(instance: &DroInstance) -> Result<DroSolution> {
    match instance.divergence {
        DroDivergence::Kl => kl_dro_primal(instance),
        DroDivergence::Chi2 => chi2_dro_value(instance),
        DroDivergence::ReverseKl => revkl_dro_value(instance),
    }
}

pub const MAX_BRUTEFORCE_ATOMS: usize = 4;

/// Best feasible value on a simplex grid with `grid_points` points per edge,
/// followed by local zoom passes around the incumbent.
pub fn simplex_bruteforce(instance: &DroInstance, grid_points: usize) -> Result<f64> {
    simplex_bruteforce_argmax(instance, grid_points).map(|(v, _)| v)
}

pub fn simplex_bruteforce_argmax(instance: &DroInstance, grid_points: usize) -> Result<(f64, Vec<f64>)> {
    let n = instance.losses.len();
    if n > MAX_BRUTEFORCE_ATOMS {
        return Err(invalid(format!(
            "brute force supports at most {MAX_BRUTEFORCE_ATOMS} atoms, got {n}"
        )));
    }
    if grid_points < 2 {
        return Err(invalid("grid needs at least two points per edge"));
    }
    let p = instance.base.probs();
    let losses = &instance.losses;
    let rho = instance.rho;
    let mut best_value = f64::NEG_INFINITY;
    let mut best = Vec::new();
    let consider = |q: &[f64], best_value: &mut f64, best: &mut Vec<f64>| {
        let value: f64 = q.iter().zip(losses).map(|(a, b)| a * b).sum();
        if value > *best_value && f_divergence(instance.divergence, q, p) <= rho {
            *best_value = value;
            best.clear();
            best.extend_from_slice(q);
        }
    };

    // Full grid: every composition of `grid_points - 1` into n parts.
    let steps = grid_points - 1;
    let h = 1.0 / steps as f64;
    let mut counts = vec![0usize; n];
    let mut q = vec![0.0; n];
    loop {
        let used: usize = counts[..n - 1].iter().sum();
        if used <= steps {
            counts[n - 1] = steps - used;
            for (qi, &c) in q.iter_mut().zip(&counts) {
                *qi = c as f64 * h;
            }
            consider(&q, &mut best_value, &mut best);
        }
        // odometer over the first n-1 coordinates
        let mut k = 0;
        loop {
            if k == n - 1 {
                break;
            }
            counts[k] += 1;
            if counts[..n - 1].iter().sum::<usize>() <= steps {
                break;
            }
            counts[k] = 0;
            k += 1;
        }
        if k == n - 1 {
            break;
        }
    }
    // The base distribution itself is always feasible.
    if best.is_empty() || instance.base_expectation() > best_value {
        best_value = instance.base_expectation();
        best = p.to_vec();
    }

    // Infeasible trial points are pulled back along the segment towards the
    // base distribution (the feasible set is convex and contains it), so the
    // search can slide along a curved constraint boundary.
    let retract = |q: &mut [f64]| {
        if f_divergence(instance.divergence, q, p) <= rho {
            return;
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let trial: Vec<f64> = q.iter().zip(p).map(|(qi, pi)| pi + mid * (qi - pi)).collect();
            if f_divergence(instance.divergence, &trial, p) <= rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for (qi, pi) in q.iter_mut().zip(p) {
            *qi = pi + lo * (*qi - pi);
        }
    };

    // Pattern search: scan a local grid of half-width `REACH` cells around the
    // incumbent, re-centre until it stops improving, then shrink the cell.
    const REACH: i64 = 8;
    const SHRINK: f64 = 4.0;
    const LEVELS: usize = 12;
    const MAX_RECENTRES: usize = 64;
    let mut cell = h;
    for _ in 0..if n == 1 { 0 } else { LEVELS } {
        for _ in 0..MAX_RECENTRES {
            let before = best_value;
            let center = best.clone();
            let mut offsets = vec![-REACH; n - 1];
            loop {
                let mut ok = true;
                let mut tail = 1.0;
                for k in 0..n - 1 {
                    q[k] = center[k] + offsets[k] as f64 * cell;
                    if q[k] < 0.0 {
                        ok = false;
                    }
                    tail -= q[k];
                }
                q[n - 1] = tail;
                if ok && tail >= 0.0 {
                    retract(&mut q);
                    consider(&q, &mut best_value, &mut best);
                }
                let mut k = 0;
                while k < n - 1 {
                    offsets[k] += 1;
                    if offsets[k] <= REACH {
                        break;
                    }
                    offsets[k] = -REACH;
                    k += 1;
                }
                if k == n - 1 {
                    break;
                }
            }
            if best_value <= before {
                break;
            }
        }
        cell /= SHRINK;
    }
    Ok((best_value, best))
}

/// How well a worst-case distribution fits its divergence's optimal family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormReport {
    /// Max over atoms of `|q_hat - q| / q` on atoms with `q > 0`.
    pub max_rel_deviation: f64,
    /// Max over all atoms of `|q_hat - q|`.
    pub max_abs_deviation: f64,
}

impl FormReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_deviation < tol
    }
}

/// Least-squares line through `(x_i, y_i)`; a flat line when the x values coincide.
fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Fits the divergence's one-parameter family to `q` by least squares in the
/// family's linearizing coordinates and reports the deviation of the fit.
///
/// - KL: `ln(q_i / p_i)` affine in `l_i`.
/// - chi-squared: `q_i / p_i` affine in `l_i` on atoms with `q_i > 0`, and
///   the fitted line nonpositive elsewhere.
/// - reverse KL: `p_i / q_i` affine in `l_i`.
///
/// Point-mass distributions are checked against the limit of the family:
/// `q ∝ p` on the maximizing atoms.
pub fn optimal_weight_form_check(instance: &DroInstance, q: &[f64]) -> Result<FormReport> {
    let p = instance.base.probs();
    let losses = &instance.losses;
    if q.len() != p.len() {
        return Err(invalid("distribution length does not match the instance"));
    }
    let support: Vec<usize> = instance.support().collect();
    let active: Vec<usize> = support.iter().copied().filter(|&i| q[i] > 0.0).collect();
    if active.is_empty() {
        return Err(invalid("distribution has no mass on the base support"));
    }
    let xs: Vec<f64> = active.iter().map(|&i| losses[i]).collect();
    let fitted: Vec<f64> = match instance.divergence {
        DroDivergence::Kl => {
            let ys: Vec<f64> = active.iter().map(|&i| (q[i] / p[i]).ln()).collect();
            let (a, b) = fit_line(&xs, &ys);
            let zero_mass_expected = active.len() < support.len();
            (0..p.len())
                .map(|i| {
                    if p[i] == 0.0 || (zero_mass_expected && q[i] == 0.0) {
                        0.0
                    } else {
                        p[i] * (a + b * losses[i]).exp()
                    }
                })
                .collect()
        }
        DroDivergence::Chi2 => {
            // The active set of this family is always an upper set of losses:
            // fit each candidate and keep the closest.
            let mut order = support.clone();
            order.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap_or(Ordering::Equal));
            let mut best: Option<FormReport> = None;
            for k in 1..=order.len() {
                let top = &order[..k];
                let xs: Vec<f64> = top.iter().map(|&i| losses[i]).collect();
                let ys: Vec<f64> = top.iter().map(|&i| q[i] / p[i]).collect();
                let (a, b) = fit_line(&xs, &ys);
                let mut fitted = vec![0.0; p.len()];
                for &i in top {
                    fitted[i] = p[i] * (a + b * losses[i]).max(0.0);
                }
                if let Some(r) = compare_normalized(q, &fitted) {
                    if best.is_none_or(|b| r.max_abs_deviation < b.max_abs_deviation) {
                        best = Some(r);
                    }
                }
            }
            return best.ok_or_else(|| invalid("no chi2 candidate fits the distribution"));
        }
        DroDivergence::ReverseKl => {
            let ys: Vec<f64> = active.iter().map(|&i| p[i] / q[i]).collect();
            let (a, b) = fit_line(&xs, &ys);
            (0..p.len())
                .map(|i| {
                    let denom = a + b * losses[i];
                    if p[i] > 0.0 && q[i] > 0.0 && denom > 0.0 {
                        p[i] / denom
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    compare_normalized(q, &fitted).ok_or_else(|| invalid("fitted form has no mass"))
}

fn compare_normalized(q: &[f64], fitted: &[f64]) -> Option<FormReport> {
    let z: f64 = fitted.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return None;
    }
    let mut rel: f64 = 0.0;
    let mut abs: f64 = 0.0;
    for (&qi, &fi) in q.iter().zip(fitted) {
        let dev = (fi / z - qi).abs();
        abs = abs.max(dev);
        if qi > 0.0 {
            rel = rel.max(dev / qi);
        } else if dev > 0.0 {
            rel = f64::INFINITY;
        }
    }
    Some(FormReport {
        max_rel_deviation: rel,
        max_abs_deviation: abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kl(losses: Vec<f64>, rho: f64) -> DroInstance {
        DroInstance::uniform(losses, rho, DroDivergence::Kl).unwrap()
    }

    #[test]
    fn distribution_validation() {
        assert!(DiscreteDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(DiscreteDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(DiscreteDistribution::new(vec![]).is_err());
        let base = DiscreteDistribution::uniform(2).unwrap();
        assert!(DroInstance::new(vec![0.0; 3], base.clone(), 0.1, DroDivergence::Kl).is_err());
        assert!(DroInstance::new(vec![0.0; 2], base, -0.1, DroDivergence::Kl).is_err());
    }

    #[test]
    fn zero_radius_returns_base() {
        let i = DroInstance::new(
            vec![1.0, 2.0, 4.0],
            DiscreteDistribution::new(vec![0.2, 0.3, 0.5]).unwrap(),
            0.0,
            DroDivergence::Kl,
        )
        .unwrap();
        let s = kl_dro_primal(&i).unwrap();
        assert_eq!(s.worst_dist, *i.base());
        assert!((s.value - 2.8).abs() < 1e-15);
        assert!(kl_dro_dual(&i).unwrap() >= s.value - 1e-12);
        for div in [DroDivergence::Chi2, DroDivergence::ReverseKl] {
            assert!((solve(&i.with_divergence(div)).unwrap().value - 2.8).abs() < 1e-15);
        }
    }

    #[test]
    fn point_mass_boundary() {
        let i = kl(vec![0.0, 1.0], 2f64.ln());
        let s = kl_dro_primal(&i).unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.worst_dist.probs(), &[0.0, 1.0]);
        assert_eq!(s.dual, DualCertificate::PointMass);
        assert!((kl_dro_dual(&i).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_point_instance_against_grid() {
        let i = kl(vec![0.0, 1.0], 0.05);
        let s = kl_dro_primal(&i).unwrap();
        assert!(s.value > 0.5 && s.value < 1.0);
        let dual = kl_dro_dual(&i).unwrap();
        assert!((dual - s.value).abs() < 1e-8);
        let brute = simplex_bruteforce(&i, 2001).unwrap();
        assert!((brute - s.value).abs() < 2e-3);
        assert!(brute <= s.value + 1e-12);
        // E_q[l] = q_1 where q_1 > 1/2 solves q ln 2q + (1-q) ln 2(1-q) = 0.05
        let g = |q: f64| q * (2.0 * q).ln() + (1.0 - q) * (2.0 * (1.0 - q)).ln() - 0.05;
        let (mut lo, mut hi) = (0.5, 1.0 - 1e-12);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 { hi = mid } else { lo = mid }
        }
        assert!((s.value - lo).abs() < 1e-10, "{} vs {lo}", s.value);
        assert!((s.value - 0.656_781_598_365).abs() < 1e-10);
    }

    #[test]
    fn constant_losses() {
        for div in [DroDivergence::Kl, DroDivergence::Chi2, DroDivergence::ReverseKl] {
            let i = DroInstance::uniform(vec![2.5; 4], 0.3, div).unwrap();
            let s = solve(&i).unwrap();
            assert_eq!(s.value, 2.5);
            assert_eq!(s.worst_dist, *i.base());
        }
        assert_eq!(kl_dro_dual(&kl(vec![2.5; 4], 0.3)).unwrap(), 2.5);
    }

    #[test]
    fn form_check_on_solver_output() {
        let i = DroInstance::new(
            vec![0.3, 1.9, 4.2, 2.2],
            DiscreteDistribution::new(vec![0.1, 0.4, 0.2, 0.3]).unwrap(),
            0.2,
            DroDivergence::Kl,
        )
        .unwrap();
        for div in [DroDivergence::Kl, DroDivergence::Chi2, DroDivergence::ReverseKl] {
            let inst = i.with_divergence(div);
            let s = solve(&inst).unwrap();
            let r = optimal_weight_form_check(&inst, s.worst_dist.probs()).unwrap();
            assert!(r.passes(1e-6), "{div:?}: {r:?}");
            let d = f_divergence(div, s.worst_dist.probs(), inst.base().probs());
            assert!((d - 0.2).abs() < 1e-9, "{div:?}: {d}");
        }
        let wrong = optimal_weight_form_check(&i, &[0.4, 0.1, 0.2, 0.3]).unwrap();
        assert!(!wrong.passes(1e-6));
    }

    #[test]
    fn chi2_and_revkl_against_grid() {
        let base = DiscreteDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        for (div, rho) in [(DroDivergence::Chi2, 0.4), (DroDivergence::Chi2, 3.0), (DroDivergence::ReverseKl, 0.3)] {
            let i = DroInstance::new(vec![0.5, 2.0, 3.5], base.clone(), rho, div).unwrap();
            let s = solve(&i).unwrap();
            let brute = simplex_bruteforce(&i, 2001).unwrap();
            assert!((brute - s.value).abs() < 2e-3, "{div:?} {rho}: {brute} vs {}", s.value);
        }
    }

    #[test]
    fn chi2_clamped_branch() {
        // large radius forces the smallest-loss atom to zero mass
        let i = DroInstance::uniform(vec![0.0, 1.0, 3.0], 1.2, DroDivergence::Chi2).unwrap();
        let s = chi2_dro_value(&i).unwrap();
        assert_eq!(s.worst_dist.probs()[0], 0.0);
        assert!((f_divergence(DroDivergence::Chi2, s.worst_dist.probs(), i.base().probs()) - 1.2).abs() < 1e-9);
        assert!(optimal_weight_form_check(&i, s.worst_dist.probs()).unwrap().passes(1e-6));
    }

    #[test]
    fn bruteforce_limits() {
        let i = DroInstance::uniform(vec![1.0, 5.0, 2.0], 0.0, DroDivergence::Kl).unwrap();
        let v = simplex_bruteforce(&i, 101).unwrap();
        assert!((v - 8.0 / 3.0).abs() < 1e-9, "{v:e}");
        let i = i.with_rho(50.0).unwrap();
        assert_eq!(simplex_bruteforce(&i, 101).unwrap(), 5.0);
        let big = DroInstance::uniform(vec![1.0; 5], 0.1, DroDivergence::Kl).unwrap();
        assert!(simplex_bruteforce(&big, 11).is_err());
    }

    #[test]
    fn record_round_trip() {
        let json = r#"{"losses":[0.0,1.0],"probs":[0.5,0.5],"rho":0.05,"divergence":"kl"}"#;
        let rec: DroRecord = serde_json::from_str(json).unwrap();
        let inst = DroInstance::try_from(rec.clone()).unwrap();
        assert_eq!(DroRecord::from(&inst), rec);
        assert!(serde_json::from_str::<DroRecord>(r#"{"losses":[1],"probs":[1],"rho":0,"divergence":"kl","x":1}"#).is_err());
    }

    #[test]
    fn handles_large_losses() {
        let i = kl(vec![690.0, 700.0, 650.0], 0.1);
        let s = kl_dro_primal(&i).unwrap();
        let d = kl_dro_dual(&i).unwrap();
        assert!((s.value - d).abs() < 1e-8 * 700.0);
    }
}
