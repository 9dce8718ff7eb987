//! Differentiable predictors with per-sample losses and hand-derived gradients.
//!
//! Parameters live in one flat vector. Layouts:
//! - linear regression: `theta[0..d]`, no bias; loss `(x.theta - y)^2`.
//! - softmax classifier: `W` (C x d, row-major) then `b` (C); cross-entropy.
//! - MLP: for each layer `W` (out x in, row-major) then `b` (out); tanh hidden
//!   units, linear logits, cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, invalid, Error, Result};
use crate::reweight::{LossVector, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    SoftmaxClassifier,
    Mlp,
}

/// Shape metadata; determines the parameter count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Class count for classifiers; ignored (always 1) for regression.
    #[serde(default = "one")]
    pub classes: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            input_dim,
            classes: 1,
            hidden: Vec::new(),
        }
    }

    pub fn softmax(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxClassifier,
            input_dim,
            classes,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            classes,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be positive"));
        }
        match self.kind {
            ModelKind::LinearRegression => {
                if !self.hidden.is_empty() {
                    return Err(invalid("linear regression takes no hidden layers"));
                }
            }
            ModelKind::SoftmaxClassifier => {
                if self.classes < 2 {
                    return Err(invalid("classifier needs at least 2 classes"));
                }
                if !self.hidden.is_empty() {
                    return Err(invalid("softmax classifier takes no hidden layers"));
                }
            }
            ModelKind::Mlp => {
                if self.classes < 2 {
                    return Err(invalid("classifier needs at least 2 classes"));
                }
                if !(1..=2).contains(&self.hidden.len()) || self.hidden.contains(&0) {
                    return Err(invalid("mlp needs one or two non-empty hidden layers"));
                }
            }
        }
        Ok(())
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::LinearRegression
    }

    /// `(fan_in, fan_out)` for each affine layer.
    fn layers(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::LinearRegression => vec![(self.input_dim, 1)],
            ModelKind::SoftmaxClassifier => vec![(self.input_dim, self.classes)],
            ModelKind::Mlp => {
                let mut sizes = vec![self.input_dim];
                sizes.extend(&self.hidden);
                sizes.push(self.classes);
                sizes.windows(2).map(|w| (w[0], w[1])).collect()
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression => self.input_dim,
            _ => self.layers().iter().map(|(i, o)| i * o + o).sum(),
        }
    }
}

/// Flat parameter vector plus its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    spec: ModelSpec,
    theta: Vec<f64>,
}

impl ModelState {
    pub fn new(spec: ModelSpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.param_count() {
            return Err(invalid(format!(
                "theta has {} entries, shape implies {}",
                theta.len(),
                spec.param_count()
            )));
        }
        check_finite(&theta, "theta")?;
        Ok(Self { spec, theta })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let n = spec.param_count();
        Self::new(spec, vec![0.0; n])
    }

    /// Weights ~ N(0, 1/fan_in), biases zero. Linear and softmax models start at zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        if spec.kind != ModelKind::Mlp {
            return Self::zeros(spec);
        }
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layers() {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            theta.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
            theta.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self::new(spec, theta)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.spec.clone(), theta)
    }

    /// Raw outputs for one input row: the prediction for regression, logits otherwise.
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let mut scratch = Scratch::default();
        match self.spec.kind {
            ModelKind::LinearRegression => vec![dot(&self.theta, x)],
            ModelKind::SoftmaxClassifier => {
                let mut z = vec![0.0; self.spec.classes];
                affine(&self.theta, self.spec.input_dim, self.spec.classes, x, &mut z);
                z
            }
            ModelKind::Mlp => {
                mlp_forward(&self.spec, &self.theta, x, &mut scratch);
                scratch.acts.last().cloned().unwrap_or_default()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `B x d` row-major inputs with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    dim: usize,
    targets: Targets,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, targets: Targets) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("input dimension must be positive"));
        }
        if targets.is_empty() {
            return Err(invalid("batch must hold at least one sample"));
        }
        if inputs.len() != dim * targets.len() {
            return Err(invalid(format!(
                "inputs hold {} values, expected {} x {}",
                inputs.len(),
                targets.len(),
                dim
            )));
        }
        check_finite(&inputs, "inputs")?;
        if let Targets::Regression(y) = &targets {
            check_finite(y, "targets")?;
        }
        Ok(Self {
            inputs,
            dim,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.dim != spec.input_dim {
            return Err(invalid(format!(
                "batch dimension {} does not match model input {}",
                self.dim, spec.input_dim
            )));
        }
        match (&self.targets, spec.is_classifier()) {
            (Targets::Regression(_), false) => Ok(()),
            (Targets::Classes(c), true) => match c.iter().position(|&k| k >= spec.classes) {
                Some(i) => Err(invalid(format!(
                    "class index {} at sample {i} out of range for {} classes",
                    c[i], spec.classes
                ))),
                None => Ok(()),
            },
            (Targets::Regression(_), true) => Err(invalid("classifier given regression targets")),
            (Targets::Classes(_), false) => Err(invalid("regressor given class targets")),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W x + b` for a layer stored as `W` (out x in) followed by `b`.
#[inline]
fn affine(params: &[f64], fan_in: usize, fan_out: usize, x: &[f64], out: &mut [f64]) {
    let (w, b) = params.split_at(fan_in * fan_out);
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = dot(&w[o * fan_in..(o + 1) * fan_in], x) + b[o];
    }
}

/// Cross-entropy of `logits` against `label`; overwrites `logits` with softmax probabilities.
#[inline]
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    // -log softmax = log-sum-exp - z_y, both taken relative to the max
    sum.ln() - shifted_label
}

#[derive(Default)]
struct Scratch {
    /// Activations per layer, input excluded; the last entry holds logits.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

fn mlp_forward(spec: &ModelSpec, theta: &[f64], x: &[f64], s: &mut Scratch) {
    let layers = spec.layers();
    s.acts.resize_with(layers.len(), Vec::new);
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let size = fan_in * fan_out + fan_out;
        let params = &theta[offset..offset + size];
        offset += size;
        let (done, rest) = s.acts.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
        let out = &mut rest[0];
        out.resize(fan_out, 0.0);
        affine(params, fan_in, fan_out, input, out);
        if l + 1 < layers.len() {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
    }
}

/// Per-sample state kept between the forward pass and the gradient accumulation.
enum Cache {
    /// Residuals `x.theta - y`.
    Linear(Vec<f64>),
    /// Softmax probabilities, `B x C`.
    Softmax(Vec<f64>),
    /// Flattened activations per sample (hidden layers then probabilities).
    Mlp { acts: Vec<f64>, stride: usize },
}

/// Output of a forward pass over a batch.
pub(crate) struct Forward {
    pub losses: Vec<f64>,
    cache: Cache,
}

pub(crate) fn forward(model: &ModelState, batch: &Batch) -> Result<Forward> {
    let spec = &model.spec;
    batch.check_against(spec)?;
    let theta = &model.theta;
    let n = batch.len();
    let mut losses = Vec::with_capacity(n);
    let cache = match (&batch.targets, spec.kind) {
        (Targets::Regression(y), ModelKind::LinearRegression) => {
            let mut resid = Vec::with_capacity(n);
            for (i, &yi) in y.iter().enumerate() {
                let r = dot(theta, batch.row(i)) - yi;
                resid.push(r);
                losses.push(r * r);
            }
            Cache::Linear(resid)
        }
        (Targets::Classes(y), ModelKind::SoftmaxClassifier) => {
            let c = spec.classes;
            let mut probs = vec![0.0; n * c];
            for (i, &yi) in y.iter().enumerate() {
                let p = &mut probs[i * c..(i + 1) * c];
                affine(theta, spec.input_dim, c, batch.row(i), p);
                losses.push(softmax_xent(p, yi));
            }
            Cache::Softmax(probs)
        }
        (Targets::Classes(y), ModelKind::Mlp) => {
            let stride: usize = spec.hidden.iter().sum::<usize>() + spec.classes;
            let mut acts = Vec::with_capacity(n * stride);
            let mut s = Scratch::default();
            for (i, &yi) in y.iter().enumerate() {
                mlp_forward(spec, theta, batch.row(i), &mut s);
                let logits = s.acts.last_mut().expect("output layer");
                losses.push(softmax_xent(logits, yi));
                for a in &s.acts {
                    acts.extend_from_slice(a);
                }
            }
            Cache::Mlp { acts, stride }
        }
        _ => unreachable!("targets checked against model kind"),
    };
    Ok(Forward { losses, cache })
}

/// Accumulates `sum_i coeffs[i] * grad l_i` into a fresh vector.
pub(crate) fn backward(
    model: &ModelState,
    batch: &Batch,
    fwd: &Forward,
    coeffs: &[f64],
) -> Vec<f64> {
    let spec = &model.spec;
    let theta = &model.theta;
    let mut grad = vec![0.0; theta.len()];
    match &fwd.cache {
        Cache::Linear(resid) => {
            for (i, (&r, &c)) in resid.iter().zip(coeffs).enumerate() {
                let s = c * 2.0 * r;
                for (g, x) in grad.iter_mut().zip(batch.row(i)) {
                    *g += s * x;
                }
            }
        }
        Cache::Softmax(probs) => {
            let Targets::Classes(y) = &batch.targets else {
                unreachable!()
            };
            let (d, k) = (spec.input_dim, spec.classes);
            let (gw, gb) = grad.split_at_mut(d * k);
            for (i, &c) in coeffs.iter().enumerate() {
                let x = batch.row(i);
                let p = &probs[i * k..(i + 1) * k];
                for o in 0..k {
                    let delta = c * (p[o] - if o == y[i] { 1.0 } else { 0.0 });
                    for (g, xv) in gw[o * d..(o + 1) * d].iter_mut().zip(x) {
                        *g += delta * xv;
                    }
                    gb[o] += delta;
                }
            }
        }
        Cache::Mlp { acts, stride } => {
            let Targets::Classes(y) = &batch.targets else {
                unreachable!()
            };
            let layers = spec.layers();
            let mut offsets = Vec::with_capacity(layers.len());
            let mut act_offsets = Vec::with_capacity(layers.len());
            let (mut po, mut ao) = (0, 0);
            for &(fi, fo) in &layers {
                offsets.push(po);
                act_offsets.push(ao);
                po += fi * fo + fo;
                ao += fo;
            }
            let mut s = Scratch::default();
            for (i, &c) in coeffs.iter().enumerate() {
                let sample = &acts[i * stride..(i + 1) * stride];
                let last = layers.len() - 1;
                let (_, k) = layers[last];
                s.delta.clear();
                s.delta.extend(
                    sample[act_offsets[last]..act_offsets[last] + k]
                        .iter()
                        .enumerate()
                        .map(|(o, &p)| c * (p - if o == y[i] { 1.0 } else { 0.0 })),
                );
                for l in (0..layers.len()).rev() {
                    let (fi, fo) = layers[l];
                    let input: &[f64] = if l == 0 {
                        batch.row(i)
                    } else {
                        &sample[act_offsets[l - 1]..act_offsets[l - 1] + fi]
                    };
                    let (gw, gb) = grad[offsets[l]..offsets[l] + fi * fo + fo].split_at_mut(fi * fo);
                    for o in 0..fo {
                        let d = s.delta[o];
                        for (g, a) in gw[o * fi..(o + 1) * fi].iter_mut().zip(input) {
                            *g += d * a;
                        }
                        gb[o] += d;
                    }
                    if l > 0 {
                        let w = &theta[offsets[l]..offsets[l] + fi * fo];
                        s.delta_prev.clear();
                        s.delta_prev.resize(fi, 0.0);
                        for o in 0..fo {
                            let d = s.delta[o];
                            for (dp, wv) in s.delta_prev.iter_mut().zip(&w[o * fi..(o + 1) * fi]) {
                                *dp += d * wv;
                            }
                        }
                        for (dp, a) in s.delta_prev.iter_mut().zip(input) {
                            *dp *= 1.0 - a * a;
                        }
                        std::mem::swap(&mut s.delta, &mut s.delta_prev);
                    }
                }
            }
        }
    }
    grad
}

pub fn per_sample_loss(model: &ModelState, batch: &Batch) -> Result<LossVector> {
    LossVector::new(forward(model, batch)?.losses)
}

/// `(1/B) sum_i w_i grad l_i` with the weights held constant.
pub fn weighted_grad(model: &ModelState, batch: &Batch, weights: &WeightVector) -> Result<Vec<f64>> {
    if weights.len() != batch.len() {
        return Err(invalid(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    let fwd = forward(model, batch)?;
    let scale = 1.0 / batch.len() as f64;
    let coeffs: Vec<f64> = weights.as_slice().iter().map(|w| w * scale).collect();
    Ok(backward(model, batch, &fwd, &coeffs))
}

/// One gradient vector per sample.
pub fn per_sample_grads(model: &ModelState, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let fwd = forward(model, batch)?;
    let mut coeffs = vec![0.0; batch.len()];
    Ok((0..batch.len())
        .map(|i| {
            coeffs[i] = 1.0;
            let g = backward(model, batch, &fwd, &coeffs);
            coeffs[i] = 0.0;
            g
        })
        .collect())
}

/// Central differences `(f(theta + h e_j) - f(theta - h e_j)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut objective: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        probe[j] = theta[j] + h;
        let up = objective(&probe);
        probe[j] = theta[j] - h;
        let down = objective(&probe);
        probe[j] = theta[j];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Oracle(format!(
                "objective not finite around coordinate {j}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reweight::{batch_weights, weighted_objective, WeightingRule};
    use rand::Rng;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::linear(10).param_count(), 10);
        assert_eq!(ModelSpec::softmax(20, 10).param_count(), 210);
        assert_eq!(ModelSpec::mlp(4, vec![5], 3).param_count(), 4 * 5 + 5 + 5 * 3 + 3);
        assert_eq!(
            ModelSpec::mlp(4, vec![5, 6], 3).param_count(),
            25 + 36 + 21
        );
        assert!(ModelSpec::mlp(4, vec![], 3).validate().is_err());
        assert!(ModelState::new(ModelSpec::linear(3), vec![0.0; 2]).is_err());
        assert!(ModelState::new(ModelSpec::linear(2), vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn linear_losses() {
        let m = ModelState::zeros(ModelSpec::linear(3)).unwrap();
        let b = Batch::new(
            [e(0, 3), e(0, 3)].concat(),
            3,
            Targets::Regression(vec![0.0, 2.0]),
        )
        .unwrap();
        assert_eq!(per_sample_loss(&m, &b).unwrap().as_slice(), &[0.0, 4.0]);
    }

    #[test]
    fn uniform_softmax_loss() {
        let m = ModelState::zeros(ModelSpec::softmax(4, 10)).unwrap();
        let b = Batch::new(vec![0.3, -1.0, 2.0, 0.5], 4, Targets::Classes(vec![7])).unwrap();
        let l = per_sample_loss(&m, &b).unwrap();
        assert!((l.as_slice()[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let m = ModelState::zeros(ModelSpec::softmax(4, 3)).unwrap();
        let wrong_dim = Batch::new(vec![0.0; 3], 3, Targets::Classes(vec![0])).unwrap();
        assert!(per_sample_loss(&m, &wrong_dim).is_err());
        let bad_class = Batch::new(vec![0.0; 4], 4, Targets::Classes(vec![3])).unwrap();
        assert!(per_sample_loss(&m, &bad_class).is_err());
        let reg = Batch::new(vec![0.0; 4], 4, Targets::Regression(vec![1.0])).unwrap();
        assert!(per_sample_loss(&m, &reg).is_err());
        assert!(Batch::new(vec![0.0; 5], 4, Targets::Classes(vec![0])).is_err());
        let ok = Batch::new(vec![0.0; 4], 4, Targets::Classes(vec![0])).unwrap();
        assert!(weighted_grad(&m, &ok, &WeightVector::ones(2)).is_err());
    }

    #[test]
    fn hand_weighted_gradient() {
        // per-sample grads 2(x.theta - y)x: [1,0] and [0,2]
        let m = ModelState::zeros(ModelSpec::linear(2)).unwrap();
        let b = Batch::new(
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            Targets::Regression(vec![-0.5, -1.0]),
        )
        .unwrap();
        let g = per_sample_grads(&m, &b).unwrap();
        assert_eq!(g, vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let w = WeightVector::new(vec![1.0, 0.5f64.exp()]).unwrap();
        let v = weighted_grad(&m, &b, &w).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn linear_mean_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = ModelSpec::linear(d);
        let m = ModelState::new(spec.clone(), theta.clone()).unwrap();
        let b = Batch::new(x, d, Targets::Regression(y)).unwrap();
        let analytic = weighted_grad(&m, &b, &WeightVector::ones(5)).unwrap();
        let fd = finite_diff_grad(
            |t| {
                per_sample_loss(&ModelState::new(spec.clone(), t.to_vec()).unwrap(), &b)
                    .unwrap()
                    .mean()
            },
            &theta,
            1e-5,
        )
        .unwrap();
        for (a, f) in analytic.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn kl_weighted_gradient_matches_fd_for_mlp() {
        let spec = ModelSpec::mlp(3, vec![4, 3], 3);
        let m = ModelState::init(spec.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let b = Batch::new(x, 3, Targets::Classes(y)).unwrap();
        let w = batch_weights(
            &per_sample_loss(&m, &b).unwrap(),
            &WeightingRule::kl(1.0).unwrap(),
        )
        .unwrap();
        let analytic = weighted_grad(&m, &b, &w).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let l = per_sample_loss(&ModelState::new(spec.clone(), t.to_vec()).unwrap(), &b)
                    .unwrap();
                weighted_objective(&l, &w).unwrap()
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
    fn mlp_forward_is_deterministic() {
        let spec = ModelSpec::mlp(3, vec![8], 4);
        let a = ModelState::init(spec.clone(), 42).unwrap();
        let b = ModelState::init(spec, 42).unwrap();
        assert_eq!(a, b);
        let batch = Batch::new(vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0], 3, Targets::Classes(vec![1, 3]))
            .unwrap();
        let la = per_sample_loss(&a, &batch).unwrap();
        let lb = per_sample_loss(&b, &batch).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.predict_row(batch.row(0)).len(), 4);
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let spec = ModelSpec::softmax(1, 2);
        let m = ModelState::new(spec, vec![1000.0, -1000.0, 0.0, 0.0]).unwrap();
        let b = Batch::new(vec![1.0, 1.0], 1, Targets::Classes(vec![0, 1])).unwrap();
        let l = per_sample_loss(&m, &b).unwrap();
        assert_eq!(l.as_slice()[0], 0.0);
        assert!((l.as_slice()[1] - 2000.0).abs() < 1e-9);
    }
}
