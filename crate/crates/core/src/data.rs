//! Synthetic and CSV-backed classification datasets.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Fraction of examples held out for validation unless stated otherwise.
pub const DEFAULT_HOLDOUT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("degenerate generator parameters: {0}")]
    Degenerate(String),
    #[error("empty dataset")]
    Empty,
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged { line: u64, expected: usize, found: usize },
    #[error("line {line}: `{value}` is not a number")]
    NonNumeric { line: u64, value: String },
    #[error("line {line}: label `{value}` is out of range")]
    LabelOutOfRange { line: u64, value: String },
    #[error("subsample fraction {0} must lie in (0, 1]")]
    BadFraction(f64),
    #[error("subsample of {fraction} x {n} examples is empty")]
    EmptySubsample { fraction: f64, n: usize },
    #[error("holdout fraction {0} must lie in [0, 1)")]
    BadHoldout(f64),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

/// A set of labelled examples: an `N x D` feature matrix and labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> Examples {
        Examples {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update((self.classes as u64).to_le_bytes());
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim() as u64).to_le_bytes());
        for (row, &label) in self.features.rows().into_iter().zip(&self.labels) {
            hasher.update((label as u64).to_le_bytes());
            for x in row {
                hasher.update(x.to_le_bytes());
            }
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut hasher = Sha256::new();
        self.hash_into(&mut hasher);
        Fingerprint::from_digest(&hasher.finalize())
    }

    /// Splits off `holdout` of the examples (seeded) as a validation set.
    pub fn split(self, holdout: f64, seed: u64) -> Result<Dataset, DataError> {
        if !(0.0..1.0).contains(&holdout) {
            return Err(DataError::BadHoldout(holdout));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((n as f64) * holdout).round() as usize;
        if n_val >= n {
            return Err(DataError::Empty);
        }
        let (val_idx, train_idx) = order.split_at(n_val);
        Ok(Dataset {
            train: self.select(train_idx),
            val: self.select(val_idx),
        })
    }
}

/// 64-bit content hash, rendered as 16 hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Fingerprint(pub u64);

impl Fingerprint {
    fn from_digest(digest: &[u8]) -> Self {
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Fingerprint(u64::from_be_bytes(bytes))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl From<Fingerprint> for String {
    fn from(f: Fingerprint) -> String {
        f.to_string()
    }
}

impl TryFrom<String> for Fingerprint {
    type Error = std::num::ParseIntError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        u64::from_str_radix(&s, 16).map(Fingerprint)
    }
}

/// Disjoint training and validation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Examples,
    pub val: Examples,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.train.classes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut hasher = Sha256::new();
        hasher.update(b"train");
        self.train.hash_into(&mut hasher);
        hasher.update(b"val");
        self.val.hash_into(&mut hasher);
        Fingerprint::from_digest(&hasher.finalize())
    }

    /// Rescales every feature to zero mean and unit variance using statistics
    /// of the training split only. Constant features are centred but not scaled.
    pub fn standardize(mut self) -> Self {
        let mean = self
            .train
            .features
            .mean_axis(Axis(0))
            .expect("training split is non-empty");
        let std = self.train.features.std_axis(Axis(0), 0.0);
        let scale = std.mapv(|s| if s > 0.0 { 1.0 / s } else { 1.0 });
        for split in [&mut self.train, &mut self.val] {
            split.features -= &mean;
            split.features *= &scale;
        }
        self
    }
}

/// Synthetic dataset families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// Isotropic unit-variance Gaussian clusters. Each class owns
    /// `clusters_per_class` clusters; with one cluster per class the class
    /// centres sit at distance `separation` from the origin along distinct
    /// axes, otherwise cluster centres are drawn uniformly from
    /// `[-separation, separation]^dim`.
    Blobs {
        classes: usize,
        separation: f64,
        n: usize,
        dim: usize,
        #[serde(default = "one")]
        clusters_per_class: usize,
    },
    /// Two interleaved spirals in the plane (binary).
    Spirals { n: usize, noise: f64, turns: f64 },
    /// Points uniform in `[-1, 1]^dim`, labelled by the side of a random
    /// hyperplane, with a gap of `margin` around it (binary).
    Separable { n: usize, dim: usize, margin: f64 },
}

fn one() -> usize {
    1
}

/// A generator plus its validation holdout.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub holdout: f64,
}

impl SyntheticSpec {
    pub fn new(generator: Generator) -> Self {
        Self {
            generator,
            holdout: DEFAULT_HOLDOUT,
        }
    }
}

/// Generates, splits and standardizes a synthetic dataset. Deterministic in
/// `(spec, seed)`.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = match &spec.generator {
        Generator::Blobs {
            classes,
            separation,
            n,
            dim,
            clusters_per_class,
        } => blobs(*classes, *separation, *n, *dim, *clusters_per_class, &mut rng)?,
        Generator::Spirals { n, noise, turns } => spirals(*n, *noise, *turns, &mut rng)?,
        Generator::Separable { n, dim, margin } => separable(*n, *dim, *margin, &mut rng)?,
    };
    Ok(examples
        .split(spec.holdout, seed ^ 0x9e37_79b9_7f4a_7c15)?
        .standardize())
}

fn degenerate(msg: impl Into<String>) -> DataError {
    DataError::Degenerate(msg.into())
}

fn blobs(
    classes: usize,
    separation: f64,
    n: usize,
    dim: usize,
    clusters_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Examples, DataError> {
    if classes < 2 {
        return Err(degenerate("blobs need at least two classes"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(degenerate("blob separation must be positive"));
    }
    if dim == 0 || n < 2 || clusters_per_class == 0 {
        return Err(degenerate("blobs need n >= 2, dim >= 1, clusters >= 1"));
    }
    let n_clusters = classes * clusters_per_class;
    let mut centres = Array2::<f64>::zeros((n_clusters, dim));
    if clusters_per_class == 1 {
        if dim >= classes {
            for c in 0..classes {
                centres[[c, c]] = separation;
            }
        } else if dim >= 2 {
            for c in 0..classes {
                let angle = 2.0 * PI * c as f64 / classes as f64;
                centres[[c, 0]] = separation * angle.cos();
                centres[[c, 1]] = separation * angle.sin();
            }
        } else {
            for c in 0..classes {
                centres[[c, 0]] = separation * c as f64;
            }
        }
    } else {
        centres.mapv_inplace(|_| rng.random_range(-separation..=separation));
    }
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let cluster = i % n_clusters;
        labels.push(cluster % classes);
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            features[[i, j]] = centres[[cluster, j]] + noise;
        }
    }
    Ok(Examples {
        features,
        labels,
        classes,
    })
}

fn spirals(n: usize, noise: f64, turns: f64, rng: &mut ChaCha8Rng) -> Result<Examples, DataError> {
    if n < 2 {
        return Err(degenerate("spirals need n >= 2"));
    }
    if !(noise.is_finite() && noise >= 0.0 && turns.is_finite() && turns > 0.0) {
        return Err(degenerate("spirals need noise >= 0 and turns > 0"));
    }
    let mut features = Array2::<f64>::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let arm = i % 2;
        let r: f64 = rng.random_range(0.05..1.0);
        let angle = 2.0 * PI * turns * r + PI * arm as f64;
        let (nx, ny): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        features[[i, 0]] = r * angle.cos() + noise * nx;
        features[[i, 1]] = r * angle.sin() + noise * ny;
        labels.push(arm);
    }
    Ok(Examples {
        features,
        labels,
        classes: 2,
    })
}

fn separable(n: usize, dim: usize, margin: f64, rng: &mut ChaCha8Rng) -> Result<Examples, DataError> {
    if n < 2 || dim == 0 {
        return Err(degenerate("separable data needs n >= 2 and dim >= 1"));
    }
    if !(margin.is_finite() && (0.0..0.5).contains(&margin)) {
        return Err(degenerate("margin must lie in [0, 0.5)"));
    }
    let mut normal: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = normal.iter().map(|x| x * x).sum::<f64>().sqrt();
    normal.iter_mut().for_each(|x| *x /= norm);
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = vec![0.0; dim];
    for i in 0..n {
        let side = loop {
            row.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            let side: f64 = row.iter().zip(&normal).map(|(x, w)| x * w).sum();
            if side.abs() >= margin && side != 0.0 {
                break side;
            }
        };
        for (j, &x) in row.iter().enumerate() {
            features[[i, j]] = x;
        }
        labels.push(usize::from(side > 0.0));
    }
    Ok(Examples {
        features,
        labels,
        classes: 2,
    })
}

/// Offline subsampling: keeps a seeded uniform subset of `fraction` of the
/// training split, without replacement. The validation split is untouched.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let n = dataset.train.len();
    let keep = ((n as f64) * fraction).round() as usize;
    if keep == 0 {
        return Err(DataError::EmptySubsample { fraction, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    indices.sort_unstable();
    Ok(Dataset {
        train: dataset.train.select(&indices),
        val: dataset.val.clone(),
    })
}

/// Reads `label,feature1,...,featureD` rows after a header line.
///
/// With `classes = None` the class count is inferred as `max label + 1`
/// (at least 2).
pub fn load_csv(path: impl AsRef<Path>, classes: Option<usize>) -> Result<Examples, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let width = reader.headers()?.len();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(DataError::Ragged {
                line,
                expected: width,
                found: record.len(),
            });
        }
        let raw_label = &record[0];
        let label: usize = raw_label.parse().map_err(|_| DataError::LabelOutOfRange {
            line,
            value: raw_label.to_string(),
        })?;
        if classes.is_some_and(|k| label >= k) {
            return Err(DataError::LabelOutOfRange {
                line,
                value: raw_label.to_string(),
            });
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let x: f64 = field.parse().map_err(|_| DataError::NonNumeric {
                line,
                value: field.to_string(),
            })?;
            if !x.is_finite() {
                return Err(DataError::NonNumeric {
                    line,
                    value: field.to_string(),
                });
            }
            values.push(x);
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let dim = width - 1;
    let features = Array2::from_shape_vec((labels.len(), dim), values).expect("row widths were checked");
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)));
    Ok(Examples {
        features,
        labels,
        classes,
    })
}

/// Writes examples in the layout read by [`load_csv`]. Floats are written in
/// shortest round-trip form, so reloading preserves the fingerprint.
pub fn write_csv(examples: &Examples, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=examples.dim()).map(|j| format!("x{j}")));
    writer.write_record(&header)?;
    for (row, label) in examples.features.rows().into_iter().zip(&examples.labels) {
        let mut record = vec![label.to_string()];
        record.extend(row.iter().map(|x| x.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn blobs_spec(classes: usize, separation: f64, n: usize) -> SyntheticSpec {
        SyntheticSpec::new(Generator::Blobs {
            classes,
            separation,
            n,
            dim: 2,
            clusters_per_class: 1,
        })
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(&blobs_spec(2, 10.0, 1000), 7).unwrap();
        let b = make_synthetic(&blobs_spec(2, 10.0, 1000), 7).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = make_synthetic(&blobs_spec(2, 10.0, 1000), 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.train.len(), 900);
        assert_eq!(a.val.len(), 100);
    }

    #[test]
    fn degenerate_generators_rejected() {
        assert!(matches!(
            make_synthetic(&blobs_spec(2, 0.0, 100), 1),
            Err(DataError::Degenerate(_))
        ));
        assert!(matches!(
            make_synthetic(&blobs_spec(1, 3.0, 100), 1),
            Err(DataError::Degenerate(_))
        ));
        let spirals = SyntheticSpec::new(Generator::Spirals {
            n: 100,
            noise: 0.0,
            turns: 0.0,
        });
        assert!(make_synthetic(&spirals, 1).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        // Row identity is tracked through an index feature.
        let n = 50;
        let features = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let examples = Examples {
            features,
            labels: vec![0; n],
            classes: 2,
        };
        let ds = examples.split(0.2, 3).unwrap();
        let train: HashSet<i64> = ds.train.features.column(0).iter().map(|&x| x as i64).collect();
        let val: HashSet<i64> = ds.val.features.column(0).iter().map(|&x| x as i64).collect();
        assert_eq!(train.len() + val.len(), n);
        assert!(train.is_disjoint(&val));
    }

    #[test]
    fn standardized_train_split() {
        let ds = make_synthetic(&blobs_spec(3, 4.0, 600), 2).unwrap();
        let mean = ds.train.features.mean_axis(Axis(0)).unwrap();
        let std = ds.train.features.std_axis(Axis(0), 0.0);
        for j in 0..2 {
            assert!(mean[j].abs() < 1e-12);
            assert!((std[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subsample_contract() {
        let ds = make_synthetic(&blobs_spec(2, 3.0, 1112), 1).unwrap();
        assert_eq!(ds.train.len(), 1001);
        let half = subsample(&ds, 0.5, 9).unwrap();
        assert_eq!(half.train.len(), 501);
        assert_eq!(half.val, ds.val);
        assert_eq!(subsample(&ds, 0.5, 9).unwrap(), half);
        let full = subsample(&ds, 1.0, 9).unwrap();
        assert_eq!(full.train, ds.train);
        assert!(matches!(subsample(&ds, 0.0, 1), Err(DataError::BadFraction(_))));
        assert!(matches!(subsample(&ds, 1e-5, 1), Err(DataError::EmptySubsample { .. })));
    }

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_parsing() {
        let f = write_file("label,a,b\n0,1.0,2.0\n1,0.5,-1\n2,3,4e-1\n");
        let ex = load_csv(f.path(), None).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex.classes, 3);
        assert_eq!(ex.features[[2, 1]], 0.4);

        let f = write_file("label,a,b\n");
        assert!(matches!(load_csv(f.path(), None), Err(DataError::Empty)));

        let f = write_file("label,a,b\n0,1,2\n1,3\n");
        match load_csv(f.path(), None) {
            Err(DataError::Ragged { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_file("label,a\n0,x\n");
        assert!(matches!(
            load_csv(f.path(), None),
            Err(DataError::NonNumeric { line: 2, .. })
        ));
        let f = write_file("label,a\n-1,0\n");
        assert!(matches!(
            load_csv(f.path(), None),
            Err(DataError::LabelOutOfRange { .. })
        ));
        let f = write_file("label,a\n3,0\n");
        assert!(matches!(
            load_csv(f.path(), Some(3)),
            Err(DataError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            load_csv("/nonexistent/file.csv", None),
            Err(DataError::Csv(_))
        ));
    }

    #[test]
    fn csv_round_trip_keeps_fingerprint() {
        let ds = make_synthetic(&blobs_spec(4, 2.5, 300), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        write_csv(&ds.train, &path).unwrap();
        let back = load_csv(&path, Some(4)).unwrap();
        assert_eq!(back.fingerprint(), ds.train.fingerprint());
    }
}
