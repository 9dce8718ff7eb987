//! Experiment orchestration: configs, the training loop, traces, metrics,
//! hyperparameter sweeps and trace export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{seeded_rng, DataSplits, Dataset, DatasetSpec};
use crate::error::{invalid, Error, Result};
use crate::models::{per_sample_loss, ModelKind, ModelSpec, ModelState, Targets};
use crate::optim::{
    ma_exp_step_report, rgd_step_report, term_step_report, tilted_probabilities, MovingAverageState,
    OptimizerState, TrainConfig,
};
use crate::reweight::{Divergence, WeightStats, WeightingRule};

/// Unweighted alternatives to the clipped rule in `TrainConfig::rule`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    /// Batch tilted ERM: weights `softmax(t * l)`.
    Term { t: f64 },
    /// `exp(lambda * l) / z` with `z` a moving average of batch means.
    MovingAverage { lambda: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Loss,
    Accuracy,
    Mse,
    FrequentL2,
    RareL2,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Accuracy => "accuracy",
            Metric::Mse => "mse",
            Metric::FrequentL2 => "frequent_l2",
            Metric::RareL2 => "rare_l2",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "holdout" => Some(Split::Holdout),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_eval_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Replaces the reweighting rule; requires `train.rule` to be ERM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Defaults to loss plus accuracy (classifiers) or mse (regression).
    #[serde(default)]
    pub metrics: Vec<Metric>,
    /// Metric tracked for the best-holdout summary; defaults to the first metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select: Option<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, model: ModelSpec, train: TrainConfig) -> Self {
        Self {
            name: None,
            dataset,
            model,
            train,
            baseline: None,
            eval_every: default_eval_every(),
            metrics: Vec::new(),
            select: None,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Overrides the training seed and the dataset seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.dataset = self.dataset.with_seed(seed);
        self
    }

    pub fn resolved_metrics(&self) -> Vec<Metric> {
        if !self.metrics.is_empty() {
            return self.metrics.clone();
        }
        if self.model.is_classifier() {
            vec![Metric::Loss, Metric::Accuracy]
        } else {
            vec![Metric::Loss, Metric::Mse]
        }
    }

    pub fn selection_metric(&self) -> Metric {
        self.select.unwrap_or_else(|| self.resolved_metrics()[0])
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(config_err)?;
        self.train.validate().map_err(config_err)?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.baseline.is_some() && self.train.rule.divergence != Divergence::None {
            return Err(Error::Config("a baseline replaces the rule; set train.rule to none".into()));
        }
        match self.baseline {
            Some(Baseline::Term { t }) if !(t > 0.0 && t.is_finite()) => {
                return Err(Error::Config(format!("tilt t must be positive, got {t}")))
            }
            Some(Baseline::MovingAverage { lambda, beta }) => {
                MovingAverageState::new(lambda, beta).map_err(config_err)?;
            }
            _ => {}
        }
        let metrics = self.resolved_metrics();
        for m in &metrics {
            let ok = match m {
                Metric::Loss => true,
                Metric::Accuracy => self.model.is_classifier(),
                Metric::Mse | Metric::FrequentL2 | Metric::RareL2 => {
                    self.model.kind == ModelKind::LinearRegression
                }
            };
            if !ok {
                return Err(Error::Config(format!("metric {m} does not apply to {:?}", self.model.kind)));
            }
        }
        if !metrics.contains(&self.selection_metric()) {
            return Err(Error::Config(format!(
                "selection metric {} is not in the metric list",
                self.selection_metric()
            )));
        }
        Ok(())
    }

    fn method_label(&self) -> String {
        match self.baseline {
            Some(Baseline::Term { t }) => format!("term(t={t})"),
            Some(Baseline::MovingAverage { lambda, beta }) => format!("ma(lambda={lambda},beta={beta})"),
            None => match self.train.rule.divergence {
                Divergence::None => "erm".into(),
                d => format!("rgd({d},tau={})", self.train.rule.tau),
            },
        }
    }
}

/// One evaluation of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: usize,
    pub split: Split,
    /// Mean of weight times loss over the split.
    pub objective: f64,
    pub metrics: BTreeMap<String, f64>,
    pub w_min: f64,
    pub w_mean: f64,
    pub w_max: f64,
    pub w_sat_frac: f64,
}

/// Append-only evaluation log; steps strictly increase within each split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<TraceRecord>) -> Result<Self> {
        let mut trace = Self::new();
        for r in records {
            trace.push(r)?;
        }
        Ok(trace)
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if let Some(last) = self.records.iter().rev().find(|r| r.split == record.split) {
            if record.step <= last.step {
                return Err(invalid(format!(
                    "{} step {} does not follow step {}",
                    record.split, record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self, split: Split) -> Option<&TraceRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Every metric name that appears in any record, sorted.
    pub fn metric_names(&self) -> Vec<String> {
        let names: BTreeSet<&String> = self.records.iter().flat_map(|r| r.metrics.keys()).collect();
        names.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: usize,
    pub metric: Metric,
    pub value: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: Option<String>,
    pub method: String,
    pub steps: usize,
    /// How minibatches were drawn.
    pub sampling: String,
    pub final_metrics: BTreeMap<Split, BTreeMap<String, f64>>,
    pub best_holdout: Option<BestRecord>,
    pub theta: Vec<f64>,
}

/// `sqrt(sum_{i in index_set} (theta_i - theta*_i)^2)`
pub fn direction_l2(theta: &[f64], theta_star: &[f64], index_set: &[usize]) -> Result<f64> {
    if theta.len() != theta_star.len() {
        return Err(invalid(format!(
            "theta has {} coordinates, theta* has {}",
            theta.len(),
            theta_star.len()
        )));
    }
    let mut sum = 0.0;
    for &i in index_set {
        if i >= theta.len() {
            return Err(invalid(format!("index {i} out of range for {} coordinates", theta.len())));
        }
        sum += (theta[i] - theta_star[i]).powi(2);
    }
    Ok(sum.sqrt())
}

/// Fraction of rows whose largest logit is at the label (first index wins ties).
pub fn accuracy(model: &ModelState, dataset: &Dataset) -> Result<f64> {
    let (Targets::Classes(labels), true) = (dataset.targets(), model.spec().is_classifier()) else {
        return Err(invalid("accuracy needs a classifier and class labels"));
    };
    if dataset.dim() != model.spec().input_dim {
        return Err(invalid("dataset dimension does not match the model"));
    }
    let batch = dataset.as_batch();
    let hits = (0..dataset.len())
        .filter(|&i| {
            let logits = model.predict_row(batch.row(i));
            let mut best = 0;
            for (k, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = k;
                }
            }
            best == labels[i]
        })
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

pub fn mse(model: &ModelState, dataset: &Dataset) -> Result<f64> {
    let (Targets::Regression(y), ModelKind::LinearRegression) = (dataset.targets(), model.kind()) else {
        return Err(invalid("mse needs a regression model and real targets"));
    };
    if dataset.dim() != model.spec().input_dim {
        return Err(invalid("dataset dimension does not match the model"));
    }
    let batch = dataset.as_batch();
    let total: f64 = (0..dataset.len()).map(|i| (model.predict_row(batch.row(i))[0] - y[i]).powi(2)).sum();
    Ok(total / dataset.len() as f64)
}

/// Epoch-wise shuffling without replacement; the final chunk of an epoch may be short.
struct EpochSampler {
    rng: rand_chacha::ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl EpochSampler {
    fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: seeded_rng(seed, 10),
            order: (0..n).collect(),
            cursor: n,
            batch_size,
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor = (start + self.batch_size).min(self.order.len());
        &self.order[start..self.cursor]
    }
}

enum Method {
    Rule(WeightingRule),
    Term(f64),
    MovingAverage(MovingAverageState),
}

impl Method {
    fn eval_weights(&self, losses: &[f64]) -> (Vec<f64>, WeightStats) {
        match self {
            Method::Rule(rule) => {
                let w: Vec<f64> = losses.iter().map(|&u| rule.weight_unchecked(u)).collect();
                let stats = WeightStats::compute(losses, &w, rule);
                (w, stats)
            }
            Method::Term(t) => {
                let n = losses.len() as f64;
                let w: Vec<f64> = tilted_probabilities(losses, *t).into_iter().map(|p| p * n).collect();
                let stats = WeightStats::from_weights(&w, 0);
                (w, stats)
            }
            Method::MovingAverage(ma) => {
                let mut probe = *ma;
                let w = match ma.log_z() {
                    Some(log_z) => losses.iter().map(|&l| (ma.lambda * l - log_z).exp()).collect(),
                    None => probe.update(losses).unwrap_or_else(|_| vec![1.0; losses.len()]),
                };
                let stats = WeightStats::from_weights(&w, 0);
                (w, stats)
            }
        }
    }
}

struct Evaluator<'a> {
    config: &'a ExperimentConfig,
    metrics: Vec<Metric>,
    splits: Vec<(Split, &'a Dataset)>,
    reference: &'a Dataset,
}

impl Evaluator<'_> {
    fn evaluate(&self, step: usize, model: &ModelState, method: &Method, trace: &mut Trace) -> Result<()> {
        for &(split, data) in &self.splits {
            let losses = per_sample_loss(model, data.as_batch())?.into_inner();
            let (weights, stats) = method.eval_weights(&losses);
            let n = losses.len() as f64;
            let objective = losses.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / n;
            let mut metrics = BTreeMap::new();
            for &m in &self.metrics {
                let value = match m {
                    Metric::Loss => losses.iter().sum::<f64>() / n,
                    Metric::Accuracy => accuracy(model, data)?,
                    Metric::Mse => mse(model, data)?,
                    Metric::FrequentL2 | Metric::RareL2 => {
                        let meta = self.reference.metadata();
                        let (Some(star), Some(freq), Some(rare)) = (&meta.theta_star, &meta.frequent, &meta.rare) else {
                            return Err(Error::Config(format!(
                                "metric {m} needs a dataset with a known theta* and feature partition"
                            )));
                        };
                        let set = if m == Metric::FrequentL2 { freq } else { rare };
                        direction_l2(model.theta(), star, set)?
                    }
                };
                metrics.insert(m.name().to_string(), value);
            }
            trace.push(TraceRecord {
                step,
                split,
                objective,
                metrics,
                w_min: stats.min,
                w_mean: stats.mean,
                w_max: stats.max,
                w_sat_frac: stats.sat_frac,
            })?;
        }
        let _ = self.config;
        Ok(())
    }
}

/// Trains on `splits.train` for `config.train.steps` steps, evaluating every
/// split at step 0, every `eval_every` steps and at the final step.
pub fn run_with_data(config: &ExperimentConfig, splits: &DataSplits) -> Result<(Trace, RunSummary)> {
    config.validate()?;
    let train = &splits.train;
    let tc = &config.train;
    if tc.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training rows",
            tc.batch_size,
            train.len()
        )));
    }
    let model = ModelState::init(config.model.clone(), tc.seed).map_err(|e| Error::Config(e.to_string()))?;
    let mut state = OptimizerState::for_config(model, tc);
    let mut method = match config.baseline {
        None => Method::Rule(tc.rule),
        Some(Baseline::Term { t }) => Method::Term(t),
        Some(Baseline::MovingAverage { lambda, beta }) => Method::MovingAverage(MovingAverageState::new(lambda, beta)?),
    };
    let mut eval_splits = vec![(Split::Train, train)];
    if let Some(h) = &splits.holdout {
        eval_splits.push((Split::Holdout, h));
    }
    if let Some(t) = &splits.test {
        eval_splits.push((Split::Test, t));
    }
    let evaluator = Evaluator {
        config,
        metrics: config.resolved_metrics(),
        splits: eval_splits,
        reference: train,
    };
    let mut trace = Trace::new();
    evaluator.evaluate(0, state.model(), &method, &mut trace)?;

    let mut sampler = EpochSampler::new(train.len(), tc.batch_size, tc.seed);
    for step in 1..=tc.steps {
        let batch = train.batch(sampler.next())?;
        state = match &mut method {
            Method::Rule(rule) => rgd_step_report(state, &batch, rule, tc)?.0,
            Method::Term(t) => term_step_report(state, &batch, *t, tc)?.0,
            Method::MovingAverage(ma) => {
                let (next, updated, _) = ma_exp_step_report(state, *ma, &batch, tc)?;
                *ma = updated;
                next
            }
        };
        if step % config.eval_every == 0 || step == tc.steps {
            evaluator.evaluate(step, state.model(), &method, &mut trace)?;
        }
    }

    let mut final_metrics = BTreeMap::new();
    for split in [Split::Train, Split::Holdout, Split::Test] {
        if let Some(r) = trace.last(split) {
            final_metrics.insert(split, r.metrics.clone());
        }
    }
    let select = config.selection_metric();
    let best_holdout = best_record(&trace, Split::Holdout, select);
    let summary = RunSummary {
        name: config.name.clone(),
        method: config.method_label(),
        steps: tc.steps,
        sampling: "epoch_shuffle_without_replacement".into(),
        final_metrics,
        best_holdout,
        theta: state.theta().to_vec(),
    };
    Ok((trace, summary))
}

fn best_record(trace: &Trace, split: Split, metric: Metric) -> Option<BestRecord> {
    let mut best: Option<BestRecord> = None;
    for r in trace.split(split) {
        let Some(&value) = r.metrics.get(metric.name()) else { continue };
        let better = match &best {
            None => true,
            Some(b) => {
                if metric.higher_is_better() {
                    value > b.value
                } else {
                    value < b.value
                }
            }
        };
        if better {
            best = Some(BestRecord {
                step: r.step,
                metric,
                value,
                metrics: r.metrics.clone(),
            });
        }
    }
    best
}

/// Builds the dataset, trains, and writes the trace to `config.output` if set
/// (format from the extension; `.json` or CSV otherwise).
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Trace, RunSummary)> {
    config.validate()?;
    let splits = config.dataset.build()?;
    let (trace, summary) = run_with_data(config, &splits)?;
    if let Some(path) = &config.output {
        export_trace(&trace, path, TraceFormat::from_path(path))?;
    }
    Ok((trace, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => TraceFormat::Json,
            _ => TraceFormat::Csv,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Rust's float formatting emits the shortest string that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn trace_to_csv(trace: &Trace) -> String {
    let names = trace.metric_names();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "split".into(), "objective".into()];
    header.extend(names.iter().cloned());
    header.extend(["w_min", "w_mean", "w_max", "w_sat_frac"].map(String::from));
    w.write_record(&header).expect("in-memory write");
    for r in trace.records() {
        let mut row = vec![r.step.to_string(), r.split.to_string(), fmt_f64(r.objective)];
        row.extend(names.iter().map(|n| r.metrics.get(n).map(|&v| fmt_f64(v)).unwrap_or_default()));
        row.extend([r.w_min, r.w_mean, r.w_max, r.w_sat_frac].map(fmt_f64));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn trace_from_csv(text: &str) -> Result<Trace> {
    let here = Path::new("<csv>");
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().map_err(|e| format_err(here, e))?.iter().map(String::from).collect();
    let fixed_tail = ["w_min", "w_mean", "w_max", "w_sat_frac"];
    if header.len() < 7 || header[..3] != ["step", "split", "objective"] || header[header.len() - 4..] != fixed_tail {
        return Err(format_err(here, "unexpected trace header"));
    }
    let metric_names = &header[3..header.len() - 4];
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| format_err(here, e))?;
        let bad = |what: &str| format_err(here, format!("row {}: bad {what}", line + 2));
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let mut metrics = BTreeMap::new();
        for (k, name) in metric_names.iter().enumerate() {
            let cell = &row[3 + k];
            if !cell.is_empty() {
                metrics.insert(name.clone(), num(cell, name)?);
            }
        }
        let tail = header.len() - 4;
        records.push(TraceRecord {
            step: row[0].parse().map_err(|_| bad("step"))?,
            split: Split::parse(&row[1]).ok_or_else(|| bad("split"))?,
            objective: num(&row[2], "objective")?,
            metrics,
            w_min: num(&row[tail], "w_min")?,
            w_mean: num(&row[tail + 1], "w_mean")?,
            w_max: num(&row[tail + 2], "w_max")?,
            w_sat_frac: num(&row[tail + 3], "w_sat_frac")?,
        });
    }
    Trace::from_records(records)
}

pub fn trace_to_json(trace: &Trace) -> String {
    serde_json::to_string_pretty(trace.records()).expect("records serialize")
}

pub fn trace_from_json(text: &str) -> Result<Trace> {
    let records: Vec<TraceRecord> = serde_json::from_str(text).map_err(|e| format_err(Path::new("<json>"), e))?;
    Trace::from_records(records)
}

pub fn export_trace(trace: &Trace, path: &Path, format: TraceFormat) -> Result<()> {
    let text = match format {
        TraceFormat::Csv => trace_to_csv(trace),
        TraceFormat::Json => trace_to_json(trace) + "\n",
    };
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

pub fn import_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    std::io::Read::read_to_string(&mut BufReader::new(file), &mut text).map_err(|e| io_err(path, e))?;
    let parsed = match TraceFormat::from_path(path) {
        TraceFormat::Csv => trace_from_csv(&text),
        TraceFormat::Json => trace_from_json(&text),
    };
    parsed.map_err(|e| match e {
        Error::Format { message, .. } => format_err(path, message),
        other => other,
    })
}

/// One row per (trace, split): the last record of that split, as CSV.
pub fn report(traces: &[(String, Trace)]) -> String {
    let names: BTreeSet<String> = traces.iter().flat_map(|(_, t)| t.metric_names()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run".to_string(), "split".into(), "step".into(), "objective".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for (run, trace) in traces {
        for split in [Split::Train, Split::Holdout, Split::Test] {
            let Some(r) = trace.last(split) else { continue };
            let mut row = vec![run.clone(), split.to_string(), r.step.to_string(), fmt_f64(r.objective)];
            row.extend(names.iter().map(|n| r.metrics.get(n).map(|&v| fmt_f64(v)).unwrap_or_default()));
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn default_lr_multipliers() -> Vec<f64> {
    vec![1.0]
}

/// Grid over clip levels, baselines and learning-rate multipliers; every
/// point is trained and scored on the holdout split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Clip levels for the base config's divergence (KL when the base rule is none).
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default = "default_lr_multipliers")]
    pub lr_multipliers: Vec<f64>,
    /// Include the unweighted run.
    #[serde(default)]
    pub erm: bool,
    #[serde(default)]
    pub term_t: Vec<f64>,
    #[serde(default)]
    pub ma_lambda: Vec<f64>,
    #[serde(default)]
    pub ma_beta: Vec<f64>,
    pub selection_metric: Metric,
}

/// A sweep file: the base experiment plus its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub base: ExperimentConfig,
    pub grid: SweepSpec,
}

impl SweepFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.base.validate()?;
        file.grid.points(&file.base)?;
        Ok(file)
    }
}

/// Method family in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Erm,
    Rgd,
    Term,
    MovingAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub family: Family,
    /// Family hyperparameters (tau, t, or lambda then beta), then the lr multiplier.
    pub params: Vec<f64>,
}

impl GridPoint {
    fn key_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.family.cmp(&other.family).then_with(|| {
            for (a, b) in self.params.iter().zip(&other.params) {
                match a.total_cmp(b) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            self.params.len().cmp(&other.params.len())
        })
    }

    pub fn label(&self) -> String {
        let p: Vec<String> = self.params.iter().map(|v| v.to_string()).collect();
        format!("{:?}({})", self.family, p.join(","))
    }
}

impl SweepSpec {
    pub fn points(&self, base: &ExperimentConfig) -> Result<Vec<(GridPoint, ExperimentConfig)>> {
        if self.lr_multipliers.is_empty() || self.lr_multipliers.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Config("lr_multipliers must be nonempty and positive".into()));
        }
        let mut base = base.clone();
        if !base.metrics.contains(&self.selection_metric) {
            if base.metrics.is_empty() && base.resolved_metrics().contains(&self.selection_metric) {
                base.metrics = base.resolved_metrics();
            } else {
                return Err(Error::Config(format!(
                    "selection metric {} is not in the base metric list",
                    self.selection_metric
                )));
            }
        }
        base.select = Some(self.selection_metric);
        let divergence = match base.train.rule.divergence {
            Divergence::None => Divergence::Kl,
            d => d,
        };
        let mut families: Vec<(Family, Vec<f64>, ExperimentConfig)> = Vec::new();
        let plain = |rule: WeightingRule, baseline: Option<Baseline>| {
            let mut c = base.clone();
            c.train.rule = rule;
            c.baseline = baseline;
            c
        };
        if self.erm {
            families.push((Family::Erm, vec![], plain(WeightingRule::erm(), None)));
        }
        for &tau in &self.tau {
            let rule = WeightingRule::new(divergence, tau).map_err(|e| Error::Config(e.to_string()))?;
            families.push((Family::Rgd, vec![tau], plain(rule, None)));
        }
        for &t in &self.term_t {
            families.push((Family::Term, vec![t], plain(WeightingRule::erm(), Some(Baseline::Term { t }))));
        }
        if self.ma_lambda.is_empty() != self.ma_beta.is_empty() {
            return Err(Error::Config("ma_lambda and ma_beta must both be set or both empty".into()));
        }
        for &lambda in &self.ma_lambda {
            for &beta in &self.ma_beta {
                let b = Baseline::MovingAverage { lambda, beta };
                families.push((Family::MovingAverage, vec![lambda, beta], plain(WeightingRule::erm(), Some(b))));
            }
        }
        if families.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        let mut points = Vec::new();
        for (family, params, config) in families {
            for &m in &self.lr_multipliers {
                let mut c = config.clone();
                c.train.lr_base *= m;
                c.output = None;
                let mut p = params.clone();
                p.push(m);
                c.name = Some(GridPoint { family, params: p.clone() }.label());
                c.validate()?;
                points.push((GridPoint { family, params: p }, c));
            }
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub point: GridPoint,
    /// Selection metric at the final holdout evaluation.
    pub score: Option<f64>,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub best: Option<(GridPoint, ExperimentConfig)>,
    pub results: Vec<GridResult>,
}

impl SweepOutcome {
    /// One CSV row per grid point.
    pub fn table(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["point", "score", "error", "selected"]).expect("in-memory write");
        let best = self.best.as_ref().map(|(p, _)| p);
        for r in &self.results {
            let selected = best == Some(&r.point);
            w.write_record([
                r.point.label(),
                r.score.map(fmt_f64).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
                selected.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

/// Runs every grid point in parallel on shared data and picks the best final
/// holdout score; ties go to the smallest (family, params) tuple. Failed points
/// are recorded and skipped.
pub fn sweep(spec: &SweepSpec, base: &ExperimentConfig) -> Result<SweepOutcome> {
    let points = spec.points(base)?;
    let splits = base.dataset.build()?;
    if splits.holdout.is_none() {
        return Err(Error::Config("sweep selection needs a dataset with a holdout split".into()));
    }
    let metric = spec.selection_metric;
    let results: Vec<GridResult> = points
        .par_iter()
        .map(|(point, config)| match run_with_data(config, &splits) {
            Ok((trace, summary)) => GridResult {
                point: point.clone(),
                score: trace
                    .last(Split::Holdout)
                    .and_then(|r| r.metrics.get(metric.name()).copied())
                    .filter(|v| v.is_finite()),
                summary: Some(summary),
                error: None,
            },
            Err(e) => GridResult {
                point: point.clone(),
                score: None,
                summary: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        let Some(score) = r.score else { continue };
        let replace = match best {
            None => true,
            Some(j) => {
                let incumbent = results[j].score.expect("scored");
                let better = if metric.higher_is_better() { score > incumbent } else { score < incumbent };
                better || (score == incumbent && r.point.key_cmp(&results[j].point).is_lt())
            }
        };
        if replace {
            best = Some(i);
        }
    }
    Ok(SweepOutcome {
        best: best.map(|i| points[i].clone()),
        results,
    })
}
