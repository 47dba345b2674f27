//! Datasets of embeddings, non-IID client partitions, and controlled
//! uncertainty injection (label flips and feature corruption).
//!
//! Labels are stored 0-indexed; CSV files carry 1-indexed labels.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub observed_labels: Vec<usize>,
    /// Ground truth, used for evaluation and relabel precision only.
    pub clean_labels: Vec<usize>,
    /// True where the observed label is wrong or the features were corrupted.
    pub corruption_mask: Vec<bool>,
    pub feature_corrupted: Vec<bool>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Length {
                what: "labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad + 1,
                classes,
            });
        }
        let n = labels.len();
        Ok(Self {
            features,
            clean_labels: labels.clone(),
            observed_labels: labels,
            corruption_mask: vec![false; n],
            feature_corrupted: vec![false; n],
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn refresh_mask(&mut self) {
        for i in 0..self.len() {
            self.corruption_mask[i] =
                self.observed_labels[i] != self.clean_labels[i] || self.feature_corrupted[i];
        }
    }

    pub fn noisy_label_count(&self) -> usize {
        self.observed_labels
            .iter()
            .zip(&self.clean_labels)
            .filter(|(a, b)| a != b)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Half the distance between class means.
    pub separation: f64,
    /// Per-coordinate standard deviation around each mean.
    pub spread: f64,
}

/// Class means `separation·√2·e_c` on orthogonal axes when `dim ≥ classes`
/// (pairwise distance `2·separation`), random unit directions otherwise.
pub fn class_means(spec: &SyntheticSpec, rng: &mut Rng) -> Matrix {
    let radius = spec.separation * std::f64::consts::SQRT_2;
    let mut means = Matrix::zeros(spec.classes, spec.dim);
    for c in 0..spec.classes {
        if spec.dim >= spec.classes {
            means.set(c, c, radius);
        } else {
            let dir: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (j, v) in dir.iter().enumerate() {
                means.set(c, j, radius * v / norm);
            }
        }
    }
    means
}

/// Isotropic Gaussian clusters, class by class.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::Config {
            key: "classes/dim".into(),
            msg: "synthetic data needs at least 2 classes and 2 dimensions".into(),
        });
    }
    let means = class_means(spec, rng);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.per_class {
            for j in 0..spec.dim {
                data.push(means.get(c, j) + spec.spread * rng.normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::new(n, spec.dim, data)?, labels, spec.classes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.train.len()
    }
}

pub const TEST_FRACTION: f64 = 0.2;
const MAX_PARTITION_ATTEMPTS: usize = 10;

/// Splits `total` by `proportions` with largest-remainder rounding; ties go
/// to the lower index.
pub fn largest_remainder(total: usize, proportions: &[f64]) -> Vec<usize> {
    let sum: f64 = proportions.iter().sum();
    let quotas: Vec<f64> = proportions.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class Dir(α) proportions across clients, then an 80/20 per-client
/// train/test split stratified by class.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    client_count: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Partition> {
    if client_count == 0 {
        return Err(Error::Partition("client_count must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!("alpha must be positive, got {alpha}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l + 1, classes });
        }
        by_class[l].push(i);
    }

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut per_client: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); classes]; client_count];
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut idx = members.clone();
            rng.shuffle(&mut idx);
            let mut props: Vec<f64> = (0..client_count).map(|_| rng.gamma(alpha)).collect();
            if !(props.iter().sum::<f64>() > 0.0) {
                // every gamma draw underflowed; the limit of Dir(α→0) is a vertex
                props = vec![0.0; client_count];
                props[rng.below(client_count)] = 1.0;
            }
            let counts = largest_remainder(idx.len(), &props);
            let mut start = 0;
            for (k, n) in counts.into_iter().enumerate() {
                per_client[k][c].extend_from_slice(&idx[start..start + n]);
                start += n;
            }
        }
        if per_client.iter().any(|cls| cls.iter().all(Vec::is_empty)) {
            continue;
        }
        let mut train = Vec::with_capacity(client_count);
        let mut test = Vec::with_capacity(client_count);
        for cls in per_client {
            let mut tr = Vec::new();
            let mut te = Vec::new();
            for group in cls {
                let n_test = if group.len() >= 2 {
                    ((group.len() as f64 * TEST_FRACTION).round() as usize).max(1)
                } else {
                    0
                };
                te.extend_from_slice(&group[..n_test]);
                tr.extend_from_slice(&group[n_test..]);
            }
            tr.sort_unstable();
            te.sort_unstable();
            train.push(tr);
            test.push(te);
        }
        return Ok(Partition { train, test });
    }
    Err(Error::Partition(format!(
        "a client received no samples after {MAX_PARTITION_ATTEMPTS} Dirichlet draws"
    )))
}

fn fraction_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Flips exactly `⌊rate·N⌋` observed labels to a different class.
pub fn inject_label_noise(ds: &Dataset, rate: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config {
            key: "noise_rate".into(),
            msg: format!("must lie in [0,1], got {rate}"),
        });
    }
    let mut out = ds.clone();
    let count = fraction_count(rate, ds.len());
    for i in rng.sample_without_replacement(ds.len(), count) {
        let old = out.observed_labels[i];
        let mut new = rng.below(ds.classes - 1);
        if new >= old {
            new += 1;
        }
        out.observed_labels[i] = new;
    }
    out.refresh_mask();
    Ok(out)
}

/// Adds Gaussian noise of std `severity · (global feature std)` to
/// `⌊rate·N⌋` samples.
pub fn corrupt_features(ds: &Dataset, rate: f64, severity: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) || !(severity >= 0.0) {
        return Err(Error::Config {
            key: "corruption".into(),
            msg: format!("rate must lie in [0,1] and severity be nonnegative, got {rate}, {severity}"),
        });
    }
    let mut out = ds.clone();
    if severity == 0.0 {
        return Ok(out);
    }
    let values = ds.features.as_slice();
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len().max(1) as f64).sqrt();
    let sd = severity * std;
    for i in rng.sample_without_replacement(ds.len(), fraction_count(rate, ds.len())) {
        for v in out.features.row_mut(i) {
            *v += sd * rng.normal();
        }
        out.feature_corrupted[i] = true;
    }
    out.refresh_mask();
    Ok(out)
}

/// Reads `label,f0,f1,...` with 1-indexed labels.
pub fn load_embeddings_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            line: 0,
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Csv {
            line: 1,
            msg: "no data rows".into(),
        });
    }
    if headers.get(0).map(str::trim) != Some("label") || headers.len() < 2 {
        return Err(Error::Csv {
            line: 1,
            msg: "header must be `label,f0,f1,...`".into(),
        });
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h.trim() != format!("f{j}") {
            return Err(Error::Csv {
                line: 1,
                msg: format!("expected column `f{j}`, found `{h}`"),
            });
        }
    }
    let dim = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Csv {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != dim + 1 {
            return Err(Error::Csv {
                line,
                msg: format!("expected {} fields, found {}", dim + 1, record.len()),
            });
        }
        let label: usize = record[0].trim().parse().map_err(|_| Error::Csv {
            line,
            msg: format!("bad label `{}`", &record[0]),
        })?;
        if label == 0 {
            return Err(Error::Csv {
                line,
                msg: "labels are 1-indexed".into(),
            });
        }
        labels.push(label - 1);
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Csv {
                line,
                msg: format!("bad value `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line,
                    msg: format!("non-finite value `{field}`"),
                });
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Csv {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let n = labels.len();
    Dataset::new(Matrix::new(n, dim, data)?, labels, classes)
}

/// Writes observed labels (1-indexed) and features.
pub fn write_embeddings_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..ds.dim()).map(|j| format!("f{j}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.len() {
        write!(w, "{}", ds.observed_labels[i] + 1)?;
        for v in ds.features.row(i) {
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Provenance snapshot of the data split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSnapshot {
    pub version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub train_indices: Vec<Vec<usize>>,
    pub test_indices: Vec<Vec<usize>>,
    pub noisy_indices: Vec<usize>,
}

impl DataSnapshot {
    pub fn new(seed: u64, config: serde_json::Value, ds: &Dataset, partition: &Partition) -> Self {
        Self {
            version: 1,
            seed,
            config,
            train_indices: partition.train.clone(),
            test_indices: partition.test.clone(),
            noisy_indices: (0..ds.len()).filter(|&i| ds.corruption_mask[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, dim: usize, per_class: usize, separation: f64, spread: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes,
            dim,
            per_class,
            separation,
            spread,
        }
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let s = spec(3, 4, 5, 2.0, 0.0);
        let ds = generate_synthetic(&s, &mut Rng::new(1)).unwrap();
        let means = class_means(&s, &mut Rng::new(1));
        for i in 0..ds.len() {
            assert_eq!(ds.features.row(i), means.row(ds.clean_labels[i]));
        }
        assert_eq!(ds.observed_labels, ds.clean_labels);
    }

    #[test]
    fn means_are_twice_separation_apart() {
        let s = spec(4, 6, 1, 3.0, 0.0);
        let m = class_means(&s, &mut Rng::new(0));
        let d: f64 = m.row(0).iter().zip(m.row(2)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((d - 6.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_mean_separates_well_spaced_classes() {
        let s = spec(2, 2, 200, 5.0, 0.1);
        let means = class_means(&s, &mut Rng::new(0));
        let ds = generate_synthetic(&s, &mut Rng::new(77)).unwrap();
        for i in 0..ds.len() {
            let x = ds.features.row(i);
            let dist = |c: usize| -> f64 { x.iter().zip(means.row(c)).map(|(a, b)| (a - b) * (a - b)).sum() };
            let pred = if dist(0) <= dist(1) { 0 } else { 1 };
            assert_eq!(pred, ds.clean_labels[i]);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let s = spec(3, 5, 10, 1.0, 0.5);
        let a = generate_synthetic(&s, &mut Rng::new(5)).unwrap();
        let b = generate_synthetic(&s, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_client_takes_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let p = dirichlet_partition(&labels, 5, 1, 0.5, &mut Rng::new(2)).unwrap();
        let mut all: Vec<usize> = p.train[0].iter().chain(&p.test[0]).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        for c in 0..5 {
            assert_eq!(p.test[0].iter().filter(|&&i| labels[i] == c).count(), 2);
        }
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(7, &[0.5, 0.25, 0.25]).iter().sum::<usize>(), 7);
        assert_eq!(largest_remainder(0, &[0.3, 0.7]), vec![0, 0]);
    }

    #[test]
    fn label_noise_edge_rates() {
        let s = spec(2, 2, 50, 1.0, 0.5);
        let ds = generate_synthetic(&s, &mut Rng::new(5)).unwrap();
        assert_eq!(inject_label_noise(&ds, 0.0, &mut Rng::new(1)).unwrap(), ds);
        let flipped = inject_label_noise(&ds, 1.0, &mut Rng::new(1)).unwrap();
        assert!(flipped.observed_labels.iter().zip(&ds.observed_labels).all(|(a, b)| a != b));
        assert!(flipped.corruption_mask.iter().all(|m| *m));
    }

    #[test]
    fn label_noise_exact_count() {
        let s = spec(5, 5, 200, 1.0, 0.5);
        let ds = generate_synthetic(&s, &mut Rng::new(5)).unwrap();
        let noisy = inject_label_noise(&ds, 0.2, &mut Rng::new(9)).unwrap();
        assert_eq!(noisy.corruption_mask.iter().filter(|m| **m).count(), 200);
        assert_eq!(noisy.noisy_label_count(), 200);
        assert_eq!(noisy.clean_labels, ds.clean_labels);
    }

    #[test]
    fn feature_corruption() {
        let s = spec(3, 8, 200, 3.0, 0.5);
        let ds = generate_synthetic(&s, &mut Rng::new(5)).unwrap();
        assert_eq!(corrupt_features(&ds, 0.3, 0.0, &mut Rng::new(1)).unwrap(), ds);
        assert_eq!(corrupt_features(&ds, 0.0, 5.0, &mut Rng::new(1)).unwrap(), ds);

        let bad = corrupt_features(&ds, 0.1, 5.0, &mut Rng::new(1)).unwrap();
        assert_eq!(bad.feature_corrupted.iter().filter(|m| **m).count(), 60);
        let means = class_means(&s, &mut Rng::new(5));
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for i in 0..bad.len() {
            let d: f64 = bad
                .features
                .row(i)
                .iter()
                .zip(means.row(bad.clean_labels[i]))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let g = usize::from(bad.feature_corrupted[i]);
            sums[g] += d;
            counts[g] += 1;
        }
        assert!(sums[1] / counts[1] as f64 > sums[0] / counts[0] as f64);
        assert_eq!(bad.corruption_mask, bad.feature_corrupted);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        let err = load_embeddings_csv(&empty).unwrap_err().to_string();
        assert!(err.contains("no data rows"), "{err}");

        let header_only = dir.path().join("h.csv");
        std::fs::write(&header_only, "label,f0\n").unwrap();
        assert!(load_embeddings_csv(&header_only).unwrap_err().to_string().contains("no data rows"));

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "label,f0,f1\n1,0.5,0.25\n2,abc,1\n").unwrap();
        let err = load_embeddings_csv(&bad).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "label,f0,f1\n1,0.5,0.25\n2,1\n").unwrap();
        assert!(load_embeddings_csv(&ragged).is_err());
    }

    #[test]
    fn csv_two_rows_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.csv");
        std::fs::write(&path, "label,f0,f1\n1,0.5,0.25\n3,-1,2e-3\n").unwrap();
        let ds = load_embeddings_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.observed_labels, vec![0, 2]);
        assert_eq!(ds.classes, 3);

        let synth = generate_synthetic(&spec(3, 4, 7, 1.5, 0.7), &mut Rng::new(8)).unwrap();
        let path = dir.path().join("rt.csv");
        write_embeddings_csv(&synth, &path).unwrap();
        let back = load_embeddings_csv(&path).unwrap();
        assert_eq!(back.features, synth.features);
        assert_eq!(back.observed_labels, synth.observed_labels);
    }
}
