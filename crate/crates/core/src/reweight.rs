//! Per-sample loss reweighting.
//!
//! Every rule maps a loss `u` to a weight through the clipped loss
//! `clamp(u, 0, tau)`, so weights are bounded and insensitive to losses past
//! the clip level:
//!
//! | divergence   | weight                              | range               |
//! |--------------|-------------------------------------|---------------------|
//! | `Kl`         | `exp(clamp(u, 0, tau) / (tau + 1))` | `[1, e^(tau/(tau+1))]` |
//! | `Chi2`       | `clamp(u, 0, tau) + tau`            | `[tau, 2 tau]`      |
//! | `ReverseKl`  | `1 / (1 - clamp(u, 0, tau) / (tau + 1))` | `[1, tau + 1]` |
//! | `None`       | `1`                                 | ERM                 |
//!
//! Weights are constants with respect to the model parameters: gradients
//! flow through the loss only.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Kl,
    Chi2,
    ReverseKl,
    None,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Divergence::Kl => "kl",
            Divergence::Chi2 => "chi2",
            Divergence::ReverseKl => "reverse_kl",
            Divergence::None => "none",
        };
        f.write_str(s)
    }
}

fn default_tau() -> f64 {
    1.0
}

/// Divergence selector plus clip level; fully determines the weight function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingRule {
    pub divergence: Divergence,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Ablation only: replaces the KL scale `1/(tau+1)` with a fixed value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_override: Option<f64>,
}

impl WeightingRule {
    pub fn new(divergence: Divergence, tau: f64) -> Result<Self> {
        let rule = Self {
            divergence,
            tau,
            gamma_override: None,
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn kl(tau: f64) -> Result<Self> {
        Self::new(Divergence::Kl, tau)
    }

    pub fn chi2(tau: f64) -> Result<Self> {
        Self::new(Divergence::Chi2, tau)
    }

    pub fn reverse_kl(tau: f64) -> Result<Self> {
        Self::new(Divergence::ReverseKl, tau)
    }

    /// Unit weights (plain empirical risk minimization).
    pub fn erm() -> Self {
        Self {
            divergence: Divergence::None,
            tau: 1.0,
            gamma_override: None,
        }
    }

    /// KL rule with the scale decoupled from the clip level (gamma ablation).
    pub fn kl_with_gamma(tau: f64, gamma: f64) -> Result<Self> {
        let rule = Self {
            divergence: Divergence::Kl,
            tau,
            gamma_override: Some(gamma),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(invalid(format!("tau must be positive and finite, got {}", self.tau)));
        }
        if let Some(g) = self.gamma_override {
            if self.divergence != Divergence::Kl {
                return Err(invalid("gamma_override only applies to the kl rule"));
            }
            if !(g.is_finite() && g > 0.0) {
                return Err(invalid(format!("gamma_override must be positive, got {g}")));
            }
        }
        Ok(())
    }

    /// Scale applied to the clipped loss: `1/(tau+1)` for KL and reverse KL.
    pub fn gamma(&self) -> Option<f64> {
        match self.divergence {
            Divergence::Kl => Some(self.gamma_override.unwrap_or(1.0 / (self.tau + 1.0))),
            Divergence::ReverseKl => Some(1.0 / (self.tau + 1.0)),
            Divergence::Chi2 | Divergence::None => None,
        }
    }

    /// Largest weight the rule can produce.
    pub fn max_weight(&self) -> f64 {
        match self.divergence {
            Divergence::Kl => match self.gamma_override {
                Some(g) => (g * self.tau).exp(),
                None => (self.tau / (self.tau + 1.0)).exp(),
            },
            Divergence::Chi2 => 2.0 * self.tau,
            Divergence::ReverseKl => 1.0 / (1.0 - self.tau / (self.tau + 1.0)),
            Divergence::None => 1.0,
        }
    }

    pub fn weight(&self, u: f64) -> Result<f64> {
        if !u.is_finite() {
            return Err(Error::NonFinite { what: "loss", index: 0 });
        }
        Ok(self.weight_unchecked(u))
    }

    /// Weight for a loss already known to be finite.
    #[inline]
    pub(crate) fn weight_unchecked(&self, u: f64) -> f64 {
        match self.divergence {
            Divergence::Kl => match self.gamma_override {
                Some(g) => (g * clip(u, self.tau)).exp(),
                None => kl(u, self.tau),
            },
            Divergence::Chi2 => chi2(u, self.tau),
            Divergence::ReverseKl => revkl(u, self.tau),
            Divergence::None => 1.0,
        }
    }

    /// Whether the loss sits at or above the clip level.
    pub fn saturates(&self, u: f64) -> bool {
        self.divergence != Divergence::None && u >= self.tau
    }
}

#[inline]
fn clip(u: f64, tau: f64) -> f64 {
    u.clamp(0.0, tau)
}

#[inline]
fn kl(u: f64, tau: f64) -> f64 {
    (clip(u, tau) / (tau + 1.0)).exp()
}

#[inline]
fn chi2(u: f64, tau: f64) -> f64 {
    clip(u, tau) + tau
}

#[inline]
fn revkl(u: f64, tau: f64) -> f64 {
    1.0 / (1.0 - clip(u, tau) / (tau + 1.0))
}

fn check_scalar(u: f64, tau: f64) -> Result<()> {
    if !u.is_finite() {
        return Err(Error::NonFinite { what: "loss", index: 0 });
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(invalid(format!("tau must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// `exp(clamp(u, 0, tau) / (tau + 1))`
pub fn weight_kl(u: f64, tau: f64) -> Result<f64> {
    check_scalar(u, tau)?;
    Ok(kl(u, tau))
}

/// `clamp(u, 0, tau) + tau`
pub fn weight_chi2(u: f64, tau: f64) -> Result<f64> {
    check_scalar(u, tau)?;
    Ok(chi2(u, tau))
}

/// `(1 - clamp(u, 0, tau) / (tau + 1))^-1`, finite for every `u`.
pub fn weight_revkl(u: f64, tau: f64) -> Result<f64> {
    check_scalar(u, tau)?;
    Ok(revkl(u, tau))
}

/// Per-sample losses of one batch. Non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("loss vector must be non-empty"));
        }
        check_finite(&values, "loss")?;
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for LossVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Per-sample importance weights. Positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("weight vector must be non-empty"));
        }
        check_finite(&values, "weight")?;
        if let Some(i) = values.iter().position(|&w| w <= 0.0) {
            return Err(invalid(format!("weight {i} is not positive: {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn batch_weights(losses: &LossVector, rule: &WeightingRule) -> Result<WeightVector> {
    rule.validate()?;
    let values = losses
        .as_slice()
        .iter()
        .map(|&u| rule.weight_unchecked(u))
        .collect();
    Ok(WeightVector(values))
}

/// `(1/B) sum_i w_i l_i`, the reported surrogate loss of a reweighted batch.
pub fn weighted_objective(losses: &LossVector, weights: &WeightVector) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(invalid(format!(
            "length mismatch: {} losses vs {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let sum: f64 = losses
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .map(|(l, w)| w * l)
        .sum();
    Ok(sum / losses.len() as f64)
}

/// Summary of a batch's weights, recorded in training traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Fraction of samples whose loss reached the clip level.
    pub sat_frac: f64,
}

impl WeightStats {
    pub fn unit() -> Self {
        Self {
            min: 1.0,
            mean: 1.0,
            max: 1.0,
            sat_frac: 0.0,
        }
    }

    pub fn from_weights(weights: &[f64], saturated: usize) -> Self {
        let n = weights.len().max(1) as f64;
        let (min, max, sum) = weights.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, 0.0),
            |(lo, hi, s), &w| (lo.min(w), hi.max(w), s + w),
        );
        Self {
            min,
            mean: sum / n,
            max,
            sat_frac: saturated as f64 / n,
        }
    }

    pub fn compute(losses: &[f64], weights: &[f64], rule: &WeightingRule) -> Self {
        let saturated = losses.iter().filter(|&&u| rule.saturates(u)).count();
        Self::from_weights(weights, saturated)
    }
}
