//! Seeded synthetic datasets: one-hot rare-feature regression, Gaussian
//! mixtures, long-tailed subsampling, label flips and holdout splits.
//!
//! On disk a dataset is a CSV with columns `x0..x{d-1},y` plus a sidecar
//! `<file>.meta.json` holding [`DatasetMetadata`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, invalid, Error, Result};
use crate::models::{Batch, Targets};

/// Independent ChaCha stream `stream` under `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub generator: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequent: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rare: Option<Vec<usize>>,
    /// Diagnostics only; training never reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    batch: Batch,
    metadata: DatasetMetadata,
}

fn count_classes(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, dim: usize, targets: Targets, mut metadata: DatasetMetadata) -> Result<Self> {
        let batch = Batch::new(inputs, dim, targets)?;
        if let Targets::Classes(labels) = batch.targets() {
            let seen = labels.iter().max().map_or(0, |m| m + 1);
            let classes = metadata.classes.unwrap_or(seen);
            if seen > classes {
                return Err(invalid(format!("label {} out of range for {classes} classes", seen - 1)));
            }
            metadata.classes = Some(classes);
            metadata.class_counts = Some(count_classes(labels, classes));
        }
        if let Some(mask) = &metadata.flip_mask {
            if mask.len() != batch.len() {
                return Err(invalid("flip mask length does not match the dataset"));
            }
        }
        Ok(Self { batch, metadata })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.batch.dim()
    }

    pub fn inputs(&self) -> &[f64] {
        self.batch.inputs()
    }

    pub fn targets(&self) -> &Targets {
        self.batch.targets()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self.batch.targets() {
            Targets::Classes(y) => Some(y),
            Targets::Regression(_) => None,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        self.metadata.classes
    }

    pub fn metadata(&self) -> &DatasetMetadata {
        &self.metadata
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> &Batch {
        &self.batch
    }

    /// Rows `indices` as a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.dim();
        let mut inputs = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(invalid(format!("row {i} out of range for {} rows", self.len())));
            }
            inputs.extend_from_slice(self.batch.row(i));
        }
        let targets = match self.batch.targets() {
            Targets::Regression(y) => Targets::Regression(indices.iter().map(|&i| y[i]).collect()),
            Targets::Classes(y) => Targets::Classes(indices.iter().map(|&i| y[i]).collect()),
        };
        Batch::new(inputs, d, targets)
    }

    /// Rows `indices` as a dataset with per-row metadata carried along.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let batch = self.batch(indices)?;
        let mut metadata = self.metadata.clone();
        metadata.flip_mask = metadata.flip_mask.map(|m| indices.iter().map(|&i| m[i]).collect());
        let (inputs, dim, targets) = (batch.inputs().to_vec(), batch.dim(), batch.targets().clone());
        Dataset::new(inputs, dim, targets, metadata)
    }

    fn with_labels(&self, labels: Vec<usize>, metadata: DatasetMetadata) -> Result<Dataset> {
        Dataset::new(self.inputs().to_vec(), self.dim(), Targets::Classes(labels), metadata)
    }
}

/// One-hot regression over 10 features: features 0-4 appear 50 times each and
/// features 5-9 once each; `y = x . theta*` with `theta* ~ N(0, I)`.
pub fn rare_feature_regression(seed: u64) -> Dataset {
    const DIM: usize = 10;
    const FREQUENT_REPEATS: usize = 50;
    let mut rng = seeded_rng(seed, 0);
    let theta: Vec<f64> = (0..DIM).map(|_| rng.sample(StandardNormal)).collect();
    let feature_counts: Vec<usize> = (0..DIM).map(|k| if k < 5 { FREQUENT_REPEATS } else { 1 }).collect();
    let mut inputs = Vec::new();
    let mut y = Vec::new();
    for (k, &count) in feature_counts.iter().enumerate() {
        for _ in 0..count {
            let mut row = [0.0; DIM];
            row[k] = 1.0;
            inputs.extend_from_slice(&row);
            y.push(theta[k]);
        }
    }
    let metadata = DatasetMetadata {
        generator: "rare_feature_regression".into(),
        seed,
        theta_star: Some(theta),
        feature_counts: Some(feature_counts),
        frequent: Some((0..5).collect()),
        rare: Some((5..DIM).collect()),
        ..Default::default()
    };
    Dataset::new(inputs, DIM, Targets::Regression(y), metadata).expect("construction is valid")
}

/// Per-class counts `round(n_max * IF^(-i/(C-1)))`, with both endpoints pinned.
pub fn long_tailed_counts(classes: usize, n_max: usize, imbalance_factor: f64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {classes}")));
    }
    if n_max == 0 {
        return Err(invalid("largest class must hold at least one sample"));
    }
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(invalid(format!("imbalance factor must be at least 1, got {imbalance_factor}")));
    }
    let mu = 1.0 / imbalance_factor;
    let top = n_max as f64;
    let mut counts: Vec<usize> = (0..classes)
        .map(|i| ((top * mu.powf(i as f64 / (classes - 1) as f64)).round() as usize).max(1))
        .collect();
    counts[0] = n_max;
    counts[classes - 1] = ((top / imbalance_factor).round() as usize).max(1);
    Ok(counts)
}

/// Balanced mixture with class `c` centred at `separation * e_c` and unit isotropic noise.
pub fn gaussian_mixture_classification(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {classes}")));
    }
    if dim < classes {
        return Err(invalid(format!("dimension {dim} cannot hold {classes} axis-aligned means")));
    }
    if n_per_class == 0 {
        return Err(invalid("need at least one sample per class"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(invalid(format!("separation must be nonnegative, got {separation}")));
    }
    let mut rng = seeded_rng(seed, 0);
    let mut inputs = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        for _ in 0..n_per_class {
            for k in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push(noise + if k == c { separation } else { 0.0 });
            }
            labels.push(c);
        }
    }
    let metadata = DatasetMetadata {
        generator: "gaussian_mixture_classification".into(),
        seed,
        classes: Some(classes),
        ..Default::default()
    };
    Dataset::new(inputs, dim, Targets::Classes(labels), metadata)
}

fn class_indices(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

fn require_labels(dataset: &Dataset) -> Result<(&[usize], usize)> {
    match (dataset.labels(), dataset.classes()) {
        (Some(y), Some(c)) => Ok((y, c)),
        _ => Err(invalid("operation needs a classification dataset")),
    }
}

/// Keeps the first `counts[c]` rows of each class after a seeded shuffle.
pub fn subsample_long_tailed(dataset: &Dataset, counts: &[usize], seed: u64) -> Result<Dataset> {
    let (labels, classes) = require_labels(dataset)?;
    if counts.len() != classes {
        return Err(invalid(format!("{} counts for {classes} classes", counts.len())));
    }
    let mut rng = seeded_rng(seed, 1);
    let mut keep = Vec::new();
    for (c, mut idx) in class_indices(labels, classes).into_iter().enumerate() {
        if idx.len() < counts[c] {
            return Err(invalid(format!(
                "class {c} has {} samples, {} requested",
                idx.len(),
                counts[c]
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..counts[c]]);
    }
    keep.sort_unstable();
    dataset.select(&keep)
}

/// Relabels `floor(p * n)` uniformly chosen rows with a uniformly chosen different class.
pub fn flip_labels(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("flip fraction must lie in [0, 1], got {fraction}")));
    }
    let (labels, classes) = require_labels(dataset)?;
    let n = labels.len();
    let flips = (fraction * n as f64).floor() as usize;
    let mut rng = seeded_rng(seed, 2);
    let chosen = rand::seq::index::sample(&mut rng, n, flips);
    let mut mask = dataset.metadata.flip_mask.clone().unwrap_or_else(|| vec![false; n]);
    let mut noisy = labels.to_vec();
    for i in chosen.iter() {
        let draw = rng.random_range(0..classes - 1);
        noisy[i] = if draw >= labels[i] { draw + 1 } else { draw };
        mask[i] = true;
    }
    let mut metadata = dataset.metadata.clone();
    metadata.flip_mask = Some(mask);
    dataset.with_labels(noisy, metadata)
}

/// Splits sizes `total` proportionally across `sizes` by largest remainder.
fn apportion(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let target = (fraction * n as f64).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&s| fraction * s as f64).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(sizes.len() * 2) {
        if remaining == 0 {
            break;
        }
        if take[c] < sizes[c] {
            take[c] += 1;
            remaining -= 1;
        }
    }
    take
}

/// Seeded split into `(train, rest)`; stratified by class for classification data.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = seeded_rng(seed, 3);
    let groups: Vec<Vec<usize>> = match (dataset.labels(), dataset.classes()) {
        (Some(y), Some(c)) => class_indices(y, c),
        _ => vec![(0..dataset.len()).collect()],
    };
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let take = apportion(&sizes, train_fraction);
    let (mut train, mut rest) = (Vec::new(), Vec::new());
    for (mut idx, k) in groups.into_iter().zip(take) {
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..k]);
        rest.extend_from_slice(&idx[k..]);
    }
    if train.is_empty() || rest.is_empty() {
        return Err(invalid(format!(
            "split of {} rows at fraction {train_fraction} leaves an empty side",
            dataset.len()
        )));
    }
    train.sort_unstable();
    rest.sort_unstable();
    Ok((dataset.select(&train)?, dataset.select(&rest)?))
}

/// Declarative dataset recipe, as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Trains and evaluates on the same 255 rows.
    RareFeatureRegression { seed: u64 },
    /// Train pool -> optional long-tail subsample -> optional label flips ->
    /// optional holdout split. The test set is clean and balanced.
    GaussianMixture {
        classes: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
        #[serde(default)]
        test_per_class: usize,
        #[serde(default)]
        holdout_fraction: f64,
        #[serde(default)]
        flip_fraction: f64,
        #[serde(default)]
        imbalance_factor: Option<f64>,
    },
    /// Pre-generated files written by [`write_csv`].
    Files {
        train: PathBuf,
        #[serde(default)]
        holdout: Option<PathBuf>,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub holdout: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl DatasetSpec {
    pub fn seed(&self) -> Option<u64> {
        match self {
            DatasetSpec::RareFeatureRegression { seed } | DatasetSpec::GaussianMixture { seed, .. } => Some(*seed),
            DatasetSpec::Files { .. } => None,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut spec = self.clone();
        match &mut spec {
            DatasetSpec::RareFeatureRegression { seed } | DatasetSpec::GaussianMixture { seed, .. } => *seed = new_seed,
            DatasetSpec::Files { .. } => {}
        }
        spec
    }

    pub fn build(&self) -> Result<DataSplits> {
        match self {
            DatasetSpec::RareFeatureRegression { seed } => {
                let data = rare_feature_regression(*seed);
                Ok(DataSplits {
                    train: data.clone(),
                    holdout: None,
                    test: Some(data),
                })
            }
            DatasetSpec::GaussianMixture {
                classes,
                n_per_class,
                dim,
                separation,
                seed,
                test_per_class,
                holdout_fraction,
                flip_fraction,
                imbalance_factor,
            } => {
                let mut train = gaussian_mixture_classification(*classes, *n_per_class, *dim, *separation, *seed)?;
                if let Some(factor) = imbalance_factor {
                    let counts = long_tailed_counts(*classes, *n_per_class, *factor)?;
                    train = subsample_long_tailed(&train, &counts, *seed)?;
                }
                if *flip_fraction > 0.0 {
                    train = flip_labels(&train, *flip_fraction, *seed)?;
                }
                let holdout = if *holdout_fraction > 0.0 {
                    let (tr, ho) = split(&train, 1.0 - holdout_fraction, *seed)?;
                    train = tr;
                    Some(ho)
                } else {
                    None
                };
                let test = if *test_per_class > 0 {
                    let test_seed = seed.wrapping_add(0x7e57_0000_0000_0001);
                    Some(gaussian_mixture_classification(*classes, *test_per_class, *dim, *separation, test_seed)?)
                } else {
                    None
                };
                Ok(DataSplits { train, holdout, test })
            }
            DatasetSpec::Files { train, holdout, test } => Ok(DataSplits {
                train: read_csv(train)?,
                holdout: holdout.as_deref().map(read_csv).transpose()?,
                test: test.as_deref().map(read_csv).transpose()?,
            }),
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

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes `x0..x{d-1},y` rows and the metadata sidecar.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<String> = (0..dataset.dim()).map(|k| format!("x{k}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(|e| format_err(path, e))?;
    for i in 0..dataset.len() {
        let mut record: Vec<String> = dataset.as_batch().row(i).iter().map(|v| v.to_string()).collect();
        record.push(match dataset.targets() {
            Targets::Regression(y) => y[i].to_string(),
            Targets::Classes(y) => y[i].to_string(),
        });
        w.write_record(&record).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;

    let meta_path = sidecar_path(path);
    let sidecar = Sidecar {
        target: match dataset.targets() {
            Targets::Regression(_) => TargetKind::Regression,
            Targets::Classes(_) => TargetKind::Classes,
        },
        metadata: dataset.metadata.clone(),
    };
    let file = File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, &sidecar).map_err(|e| format_err(&meta_path, e))?;
    out.write_all(b"\n").map_err(|e| io_err(&meta_path, e))?;
    out.flush().map_err(|e| io_err(&meta_path, e))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TargetKind {
    Regression,
    Classes,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    target: TargetKind,
    metadata: DatasetMetadata,
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let meta_path = sidecar_path(path);
    let file = File::open(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(file)).map_err(|e| format_err(&meta_path, e))?;

    let mut reader = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let header = reader.headers().map_err(|e| format_err(path, e))?.clone();
    let dim = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| format_err(path, "need x columns and y"))?;
    for (k, name) in header.iter().take(dim).enumerate() {
        if name != format!("x{k}") {
            return Err(format_err(path, format!("column {k} is `{name}`, expected `x{k}`")));
        }
    }
    if &header[dim] != "y" {
        return Err(format_err(path, "last column must be `y`"));
    }
    let mut inputs = Vec::new();
    let mut reals = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(path, e))?;
        let bad = |what: &str| format_err(path, format!("row {}: bad {what}", line + 2));
        for field in record.iter().take(dim) {
            inputs.push(field.parse::<f64>().map_err(|_| bad("input"))?);
        }
        match sidecar.target {
            TargetKind::Regression => reals.push(record[dim].parse::<f64>().map_err(|_| bad("target"))?),
            TargetKind::Classes => labels.push(record[dim].parse::<usize>().map_err(|_| bad("label"))?),
        }
    }
    check_finite(&inputs, "inputs")?;
    let targets = match sidecar.target {
        TargetKind::Regression => Targets::Regression(reals),
        TargetKind::Classes => Targets::Classes(labels),
    };
    Dataset::new(inputs, dim, targets, sidecar.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rare_feature_construction() {
        let d = rare_feature_regression(7);
        assert_eq!(d.len(), 255);
        let theta = d.metadata().theta_star.clone().unwrap();
        let mut counts = [0usize; 10];
        let Targets::Regression(y) = d.targets() else { panic!() };
        for i in 0..d.len() {
            let row = d.as_batch().row(i);
            let k = row.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(y[i], theta[k]);
            counts[k] += 1;
        }
        assert_eq!(counts, [50, 50, 50, 50, 50, 1, 1, 1, 1, 1]);
        assert_eq!(d, rare_feature_regression(7));
        assert_ne!(d, rare_feature_regression(8));
    }

    #[test]
    fn rare_feature_least_squares_recovers_theta() {
        // one-hot design: X^T X is diagonal with the feature counts, so the
        // normal equations give theta_k = mean of y over rows with feature k
        let d = rare_feature_regression(3);
        let Targets::Regression(y) = d.targets() else { panic!() };
        let mut xtx = [0.0; 10];
        let mut xty = [0.0; 10];
        for i in 0..d.len() {
            for (k, &x) in d.as_batch().row(i).iter().enumerate() {
                xtx[k] += x * x;
                xty[k] += x * y[i];
            }
        }
        let theta = d.metadata().theta_star.as_ref().unwrap();
        for k in 0..10 {
            assert!((xty[k] / xtx[k] - theta[k]).abs() <= 1e-14 * theta[k].abs());
        }
    }

    #[test]
    fn long_tail_examples() {
        let c = long_tailed_counts(10, 5000, 100.0).unwrap();
        assert_eq!((c[0], c[9]), (5000, 50));
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(long_tailed_counts(4, 30, 1.0).unwrap(), vec![30; 4]);
        assert_eq!(long_tailed_counts(2, 100, 4.0).unwrap(), vec![100, 25]);
        assert!(long_tailed_counts(1, 100, 4.0).is_err());
        assert!(long_tailed_counts(3, 0, 4.0).is_err());
        assert!(long_tailed_counts(3, 10, 0.5).is_err());
        // 100 * 10^(-1/2) = 31.62...
        assert_eq!(long_tailed_counts(3, 100, 10.0).unwrap(), vec![100, 32, 10]);
    }

    #[test]
    fn mixture_shape_and_determinism() {
        let d = gaussian_mixture_classification(3, 4, 5, 2.0, 1).unwrap();
        assert_eq!(d.len(), 12);
        assert_eq!(d.metadata().class_counts, Some(vec![4, 4, 4]));
        assert_eq!(d, gaussian_mixture_classification(3, 4, 5, 2.0, 1).unwrap());
        assert!(gaussian_mixture_classification(3, 4, 2, 2.0, 1).is_err());
    }

    #[test]
    fn mixture_means() {
        let d = gaussian_mixture_classification(2, 4000, 2, 3.0, 5).unwrap();
        let labels = d.labels().unwrap();
        let mut sums = [[0.0; 2]; 2];
        for i in 0..d.len() {
            for k in 0..2 {
                sums[labels[i]][k] += d.as_batch().row(i)[k] / 4000.0;
            }
        }
        assert!((sums[0][0] - 3.0).abs() < 0.1 && sums[0][1].abs() < 0.1);
        assert!((sums[1][1] - 3.0).abs() < 0.1 && sums[1][0].abs() < 0.1);
    }

    #[test]
    fn subsample_counts() {
        let d = gaussian_mixture_classification(3, 10, 3, 1.0, 2).unwrap();
        let s = subsample_long_tailed(&d, &[10, 5, 2], 9).unwrap();
        assert_eq!(s.metadata().class_counts, Some(vec![10, 5, 2]));
        assert_eq!(s, subsample_long_tailed(&d, &[10, 5, 2], 9).unwrap());
        assert_eq!(subsample_long_tailed(&d, &[10, 10, 10], 9).unwrap(), d);
        assert!(subsample_long_tailed(&d, &[11, 1, 1], 9).is_err());
    }

    #[test]
    fn flips_are_exact_and_pure() {
        let d = gaussian_mixture_classification(4, 250, 4, 1.0, 3).unwrap();
        let f = flip_labels(&d, 0.4, 11).unwrap();
        let mask = f.metadata().flip_mask.clone().unwrap();
        let (before, after) = (d.labels().unwrap(), f.labels().unwrap());
        assert_eq!(mask.iter().filter(|&&m| m).count(), 400);
        for i in 0..d.len() {
            assert_eq!(mask[i], before[i] != after[i]);
        }
        assert_eq!(f, flip_labels(&d, 0.4, 11).unwrap());
        let same = flip_labels(&d, 0.0, 11).unwrap();
        assert_eq!(same.labels(), d.labels());
        assert!(flip_labels(&rare_feature_regression(0), 0.1, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let d = gaussian_mixture_classification(4, 25, 4, 1.0, 3).unwrap();
        let (a, b) = split(&d, 0.8, 4).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
        assert_eq!(a.metadata().class_counts, Some(vec![20; 4]));
        assert_eq!((a.clone(), b.clone()), split(&d, 0.8, 4).unwrap());
        let r = rare_feature_regression(0);
        let (a, b) = split(&r, 0.5, 0).unwrap();
        assert_eq!(a.len() + b.len(), 255);
        assert!(split(&d, 1.0, 0).is_err());
        let tiny = gaussian_mixture_classification(2, 1, 2, 1.0, 0).unwrap();
        assert!(split(&tiny, 0.1, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = flip_labels(&gaussian_mixture_classification(3, 5, 4, 1.5, 6).unwrap(), 0.2, 1).unwrap();
        let path = dir.path().join("mix.csv");
        write_csv(&d, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), d);
        let r = rare_feature_regression(5);
        let path = dir.path().join("toy.csv");
        write_csv(&r, &path).unwrap();
        assert_eq!(read_csv(&path).unwrap(), r);
    }

    #[test]
    fn spec_builds_noisy_splits() {
        let spec: DatasetSpec = serde_json::from_str(
            r#"{"generator":"gaussian_mixture","classes":3,"n_per_class":50,"dim":4,
                "separation":2.0,"seed":1,"test_per_class":10,"holdout_fraction":0.2,"flip_fraction":0.4}"#,
        )
        .unwrap();
        let s = spec.build().unwrap();
        assert_eq!(s.train.len() + s.holdout.as_ref().unwrap().len(), 150);
        assert_eq!(s.test.as_ref().unwrap().len(), 30);
        assert!(s.test.as_ref().unwrap().metadata().flip_mask.is_none());
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"generator":"rare_feature_regression","seed":1,"x":2}"#).is_err());
    }
}
