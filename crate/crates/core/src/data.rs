//! Synthetic half-moons data, splitting and CSV persistence.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub n_samples: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Labelled points. Rows of `features` line up with `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize, meta: DatasetMeta) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Subset by row indices, keeping the metadata.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            meta: self.meta.clone(),
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for d in 0..self.dim() {
            out.push_str(&format!("x{d},"));
        }
        out.push_str("label\n");
        for (row, label) in self.features.outer_iter().zip(&self.labels) {
            for v in row {
                out.push_str(&fmt_f64(*v));
                out.push(',');
            }
            out.push_str(&label.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }

    /// Reads a `x0,..,x{D-1},label` file. The class count is the larger of
    /// two and `max(label) + 1`.
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => malformed(format!("{other:?}")),
        })?;
        let headers = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
        let dim = headers.len().saturating_sub(1);
        let expected: Vec<String> = (0..dim).map(|d| format!("x{d}")).chain(["label".to_string()]).collect();
        if dim == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(malformed(format!("unexpected header {:?}", headers)));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| malformed(e.to_string()))?;
            for field in rec.iter().take(dim) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| malformed(format!("row {}: bad float {field:?}", line + 1)))?;
                values.push(v);
            }
            let label: usize = rec[dim]
                .trim()
                .parse()
                .map_err(|_| malformed(format!("row {}: bad label {:?}", line + 1, &rec[dim])))?;
            labels.push(label);
        }
        let n = labels.len();
        let features = Array2::from_shape_vec((n, dim), values).map_err(|e| malformed(e.to_string()))?;
        let n_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        Dataset::new(
            features,
            labels,
            n_classes,
            DatasetMeta {
                generator: "csv".into(),
                n_samples: n,
                noise: f64::NAN,
                seed: 0,
            },
        )
    }
}

fn arc_params(m: usize) -> impl Iterator<Item = f64> {
    (0..m).map(move |i| if m > 1 { PI * i as f64 / (m - 1) as f64 } else { 0.0 })
}

/// Two interleaving half circles. The upper arc `(cos t, sin t)` holds
/// `ceil(n/2)` points labelled 0, the lower arc `(1 - cos t, 0.5 - sin t)`
/// holds `floor(n/2)` points labelled 1; `t` is evenly spaced over `[0, pi]`
/// including both ends. Gaussian noise of std `noise` is added to every
/// coordinate.
pub fn make_half_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid(format!("half-moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid(format!("noise must be finite and >= 0, got {noise}")));
    }
    let n_upper = n.div_ceil(2);
    let n_lower = n / 2;
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for t in arc_params(n_upper) {
        values.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for t in arc_params(n_lower) {
        values.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        let mut r = rng::stream(seed, Stream::Data);
        for v in values.iter_mut() {
            *v += noise * rng::standard_normal(&mut r);
        }
    }
    let features = Array2::from_shape_vec((n, 2), values).expect("2n values");
    Dataset::new(
        features,
        labels,
        2,
        DatasetMeta {
            generator: "half_moons".into(),
            n_samples: n,
            noise,
            seed,
        },
    )
}

/// Disjoint shuffled split into `(train, val)`.
pub fn split(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let total = n_train
        .checked_add(n_val)
        .filter(|&t| t <= ds.len())
        .ok_or_else(|| Error::invalid(format!("{n_train} + {n_val} exceeds dataset size {}", ds.len())))?;
    let mut r = rng::stream(seed, Stream::Split);
    let perm = rng::permutation(&mut r, ds.len());
    let train = ds.select(&perm[..n_train]);
    let val = ds.select(&perm[n_train..total]);
    let single_class = |d: &Dataset| d.class_counts().iter().filter(|&&c| c > 0).count() < 2;
    if single_class(&train) {
        return Err(Error::DegenerateSplit("training split has fewer than two classes".into()));
    }
    if n_val > 0 && single_class(&val) {
        return Err(Error::DegenerateSplit("validation split has fewer than two classes".into()));
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_endpoints() {
        let ds = make_half_moons(4, 0.0, 99).unwrap();
        assert_eq!(ds.point(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(ds.labels()[0], 0);
        assert_eq!(ds.point(2).to_vec(), vec![0.0, 0.5]);
        assert_eq!(ds.labels()[2], 1);
        // t = pi endpoints
        assert!((ds.point(1)[0] + 1.0).abs() < 1e-15);
        assert!((ds.point(3)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn noise_free_points_lie_on_arcs() {
        let ds = make_half_moons(101, 0.0, 0).unwrap();
        for (p, &l) in ds.features().outer_iter().zip(ds.labels()) {
            let (x, y) = if l == 0 { (p[0], p[1]) } else { (1.0 - p[0], 0.5 - p[1]) };
            assert!((x * x + y * y - 1.0).abs() < 1e-12);
            assert!(y >= -1e-15);
        }
    }

    #[test]
    fn class_balance_and_odd_counts() {
        for n in [2, 3, 7, 750, 751] {
            let ds = make_half_moons(n, 0.1, 1).unwrap();
            let c = ds.class_counts();
            assert_eq!(c[0], n.div_ceil(2));
            assert_eq!(c[1], n / 2);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(make_half_moons(1, 0.0, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_half_moons(10, -0.1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_half_moons(10, f64::NAN, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn deterministic_generation() {
        let a = make_half_moons(750, 0.125, 5).unwrap();
        let b = make_half_moons(750, 0.125, 5).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        let c = make_half_moons(750, 0.125, 6).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn noisy_class_means_match_noise_free_means() {
        // Mean of sin over m evenly spaced nodes on [0, pi] is cot(pi / (2(m-1))) / m;
        // the cosine mean vanishes by symmetry.
        let m_up = 375usize;
        let m_lo = 375usize;
        let sin_mean = |m: usize| (PI / (2.0 * (m - 1) as f64)).tan().recip() / m as f64;
        let expect = [[0.0, sin_mean(m_up)], [1.0, 0.5 - sin_mean(m_lo)]];
        let ds = make_half_moons(750, 0.125, 2024).unwrap();
        for (class, want) in expect.iter().enumerate() {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
            let sub = ds.select(&idx);
            let mean = sub.features().mean_axis(Axis(0)).unwrap();
            for d in 0..2 {
                assert!(
                    (mean[d] - want[d]).abs() < 0.05,
                    "class {class} dim {d}: {} vs {}",
                    mean[d],
                    want[d]
                );
            }
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = make_half_moons(750, 0.125, 1).unwrap();
        let (tr, va) = split(&ds, 500, 250, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (500, 250));
        let mut rows: Vec<String> = tr
            .features()
            .outer_iter()
            .chain(va.features().outer_iter())
            .map(|r| format!("{:?}", r.to_vec()))
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 750);
        let (tr2, va2) = split(&ds, 500, 250, 3).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
    }

    #[test]
    fn split_edge_cases() {
        let ds = make_half_moons(10, 0.0, 1).unwrap();
        let (tr, va) = split(&ds, 10, 0, 0).unwrap();
        assert_eq!((tr.len(), va.len()), (10, 0));
        assert!(matches!(split(&ds, 8, 3, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(split(&ds, 1, 0, 0), Err(Error::DegenerateSplit(_))));
        assert!(matches!(split(&ds, 8, 1, 0), Err(Error::DegenerateSplit(_))));
    }

    #[test]
    fn csv_round_trip() {
        let ds = make_half_moons(31, 0.125, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,label\n"));
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
    }
}
