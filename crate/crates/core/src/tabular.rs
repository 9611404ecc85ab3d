//! Feature matrix ingestion, train/test splitting and synthetic data.
//!
//! A [`FeatureMatrix`] holds `N x V` finite observations in row-major order,
//! one binary label per row (0 = typical development, 1 = impaired) and a
//! unique name per column. Missing values are rejected at load time; there is
//! no imputation.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Default class-conditional mean shift of informative synthetic columns,
/// in units of the (unit) noise standard deviation.
pub const DEFAULT_SHIFT: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    labels: Vec<u8>,
    names: Vec<String>,
}

impl FeatureMatrix {
    /// Builds a matrix from row-major `values`, validating every invariant.
    /// A matrix without feature columns is allowed (intercept-only models).
    pub fn new(values: Vec<f64>, labels: Vec<u8>, names: Vec<String>) -> Result<Self> {
        let n_features = names.len();
        if labels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least two rows required, found {}",
                labels.len()
            )));
        }
        if values.len() != labels.len() * n_features {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: labels.len() * n_features,
            });
        }
        let mut seen = HashSet::with_capacity(n_features);
        for name in &names {
            if name.is_empty() {
                return Err(Error::InvalidArgument("empty column name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }
        for (i, &label) in labels.iter().enumerate() {
            if label > 1 {
                return Err(Error::LabelOutOfRange {
                    row: i + 1,
                    value: label.to_string(),
                });
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n_features + 1,
                column: names[pos % n_features].clone(),
            });
        }
        Ok(Self {
            values,
            labels,
            names,
        })
    }

    /// Builds a matrix from per-row vectors.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u8>, names: Vec<String>) -> Result<Self> {
        let width = names.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::DimensionMismatch {
                expected: width,
                found: bad.len(),
            });
        }
        if rows.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: rows.len(),
                right: labels.len(),
            });
        }
        Self::new(rows.concat(), labels, names)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let v = self.n_features();
        &self.values[i * v..(i + 1) * v]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.n_features() + feature]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.value(i, j)).collect()
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| f64::from(y)).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `[count of class 0, count of class 1]`.
    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&y| y == 1).count();
        [self.n_rows() - ones, ones]
    }

    /// Fails unless both classes occur at least once.
    pub fn require_both_classes(&self) -> Result<()> {
        match self.class_counts() {
            [0, _] => Err(Error::SingleClass(1)),
            [_, 0] => Err(Error::SingleClass(0)),
            _ => Ok(()),
        }
    }

    /// Rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(indices.len() * self.n_features());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_rows() {
                return Err(Error::InvalidArgument(format!("row index {i} out of range")));
            }
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(values, labels, self.names.clone())
    }

    /// Columns at `indices`, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(self.n_rows() * indices.len());
        for i in 0..self.n_rows() {
            for &j in indices {
                if j >= self.n_features() {
                    return Err(Error::InvalidArgument(format!("column index {j} out of range")));
                }
                values.push(self.value(i, j));
            }
        }
        let names = indices.iter().map(|&j| self.names[j].clone()).collect();
        Self::new(values, self.labels.clone(), names)
    }

    /// Columns with the given names, in the given order.
    pub fn select_named(&self, names: &[String]) -> Result<Self> {
        let indices = names
            .iter()
            .map(|n| self.feature_index(n).ok_or_else(|| Error::MissingColumn(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.select_columns(&indices)
    }

    /// Writes the matrix as CSV with the label as the last column.
    pub fn write_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = File::create(path).map_err(io_err)?;
        file.write_all(self.to_csv_string(label_column).as_bytes())
            .map_err(io_err)
    }

    pub fn to_csv_string(&self, label_column: &str) -> String {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push(',');
        }
        out.push_str(label_column);
        out.push('\n');
        for i in 0..self.n_rows() {
            for v in self.row(i) {
                // `{}` on f64 prints the shortest string that parses back exactly.
                out.push_str(&format!("{v},"));
            }
            out.push_str(&self.labels[i].to_string());
            out.push('\n');
        }
        out
    }
}

/// Loads a CSV file with a header row. `label_column` is removed from the
/// values and parsed as the 0/1 label; row order is preserved. Row numbers in
/// errors are 1-based data rows (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&bytes, label_column)
}

pub fn parse_csv(bytes: &[u8], label_column: &str) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();

    let mut seen = HashSet::new();
    for name in &header {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateColumn(name.clone()));
        }
    }
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_owned()))?;
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidArgument("at least one feature column required".into()));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if record.len() != header.len() {
            return Err(Error::Csv(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                labels.push(parse_label(cell, row)?);
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: header[j].clone(),
                value: cell.to_owned(),
            })?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    row,
                    column: header[j].clone(),
                });
            }
            values.push(value);
        }
    }
    FeatureMatrix::new(values, labels, names)
}

fn parse_label(cell: &str, row: usize) -> Result<u8> {
    let out_of_range = || Error::LabelOutOfRange {
        row,
        value: cell.to_owned(),
    };
    let value: f64 = cell.parse().map_err(|_| out_of_range())?;
    if value == 0.0 {
        Ok(0)
    } else if value == 1.0 {
        Ok(1)
    } else {
        Err(out_of_range())
    }
}

/// A train/test partition together with the original row indices.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub seed: u64,
    pub train_fraction: f64,
}

/// Number of training rows for `n` rows at `fraction`: `floor(fraction * n)`.
pub fn train_size(n: usize, fraction: f64) -> usize {
    // The epsilon keeps exact products such as 0.7 * 10 from rounding below 7.
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Uniform random split: a ChaCha8 shuffle of `0..N` seeded by `seed`; the
/// first `floor(fraction * N)` positions form the training set. Both sides
/// keep the original row order.
pub fn split(data: &FeatureMatrix, train_fraction: f64, seed: u64) -> Result<SplitPair> {
    let n = data.n_rows();
    let n_train = checked_train_size(n, train_fraction)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut train_rows = order[..n_train].to_vec();
    let mut test_rows = order[n_train..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    assemble(data, train_rows, test_rows, seed, train_fraction)
}

/// Split that samples `floor(fraction * n_c)` rows from each class `c`.
/// The training size can then differ from `floor(fraction * N)` by one.
pub fn split_stratified(data: &FeatureMatrix, train_fraction: f64, seed: u64) -> Result<SplitPair> {
    let n = data.n_rows();
    checked_train_size(n, train_fraction)?;
    let mut rng = rng_from_seed(seed);
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for class in 0..=1u8 {
        let mut rows: Vec<usize> = (0..n).filter(|&i| data.labels()[i] == class).collect();
        rows.shuffle(&mut rng);
        let take = train_size(rows.len(), train_fraction);
        train_rows.extend_from_slice(&rows[..take]);
        test_rows.extend_from_slice(&rows[take..]);
    }
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(Error::DegenerateSplit {
            n_train: train_rows.len(),
            n_test: test_rows.len(),
        });
    }
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    assemble(data, train_rows, test_rows, seed, train_fraction)
}

fn checked_train_size(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0,1), got {fraction}"
        )));
    }
    let n_train = train_size(n, fraction);
    if n_train == 0 || n_train >= n {
        return Err(Error::DegenerateSplit {
            n_train,
            n_test: n.saturating_sub(n_train),
        });
    }
    Ok(n_train)
}

fn assemble(
    data: &FeatureMatrix,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
    seed: u64,
    train_fraction: f64,
) -> Result<SplitPair> {
    Ok(SplitPair {
        train: data.select_rows(&train_rows)?,
        test: data.select_rows(&test_rows)?,
        train_rows,
        test_rows,
        seed,
        train_fraction,
    })
}

/// Synthetic data with [`DEFAULT_SHIFT`]; see [`synth_dataset_with_shift`].
pub fn synth_dataset(n: usize, informative: usize, noise: usize, seed: u64) -> Result<FeatureMatrix> {
    synth_dataset_with_shift(n, informative, noise, DEFAULT_SHIFT, seed)
}

/// Labels are Bernoulli(0.5). Informative column `j` (named `inf_j`) is
/// `N(0,1) + s_j * shift * y` with `s_j` alternating `+1, -1, +1, ...`, so the
/// class means differ by `shift` standard deviations. Noise columns
/// (`noise_j`) are `N(0,1)` independent of the label. Columns come informative
/// first, then noise. If the label draw happens to be single-class, the first
/// row's label is flipped so both classes are present.
pub fn synth_dataset_with_shift(
    n: usize,
    informative: usize,
    noise: usize,
    shift: f64,
    seed: u64,
) -> Result<FeatureMatrix> {
    if informative < 1 {
        return Err(Error::InvalidArgument("informative must be at least 1".into()));
    }
    if n < 20 {
        return Err(Error::InvalidArgument(format!("n must be at least 20, got {n}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    if labels.iter().all(|&y| y == labels[0]) {
        labels[0] = 1 - labels[0];
    }
    let width = informative + noise;
    let mut values = Vec::with_capacity(n * width);
    for &y in &labels {
        for j in 0..width {
            let z: f64 = rng.sample(StandardNormal);
            let offset = if j < informative {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * shift * f64::from(y)
            } else {
                0.0
            };
            values.push(z + offset);
        }
    }
    let names = (1..=informative)
        .map(|j| format!("inf_{j}"))
        .chain((1..=noise).map(|j| format!("noise_{j}")))
        .collect();
    FeatureMatrix::new(values, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn loads_simple_file() {
        let csv = "a,b,group\n1.0,2.0,0\n3,4,1\n5,6.5,0\n";
        let m = parse_csv(csv.as_bytes(), "group").unwrap();
        assert_eq!(m.n_rows(), 3);
        assert_eq!(m.n_features(), 2);
        assert_eq!(m.labels(), &[0, 1, 0]);
        assert_eq!(m.names(), &names(&["a", "b"]));
        assert_eq!(m.row(2), &[5.0, 6.5]);
    }

    #[test]
    fn label_column_may_sit_anywhere() {
        let csv = "group,a\n1,0.5\n0,0.25\n";
        let m = parse_csv(csv.as_bytes(), "group").unwrap();
        assert_eq!(m.labels(), &[1, 0]);
        assert_eq!(m.column(0), vec![0.5, 0.25]);
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let csv = "a,b,group\n1,2,0\n3,abc,1\n";
        match parse_csv(csv.as_bytes(), "group") {
            Err(Error::NonNumeric { row, column, value }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_outside_binary_rejected() {
        let csv = "a,group\n1,0\n2,2\n";
        let err = parse_csv(csv.as_bytes(), "group").unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { row: 2, .. }));
        assert!(err.to_string().contains("label outside {0,1}"));
    }

    #[test]
    fn missing_and_duplicate_columns() {
        assert!(matches!(
            parse_csv(b"a,b\n1,0\n2,1\n", "group"),
            Err(Error::MissingColumn(c)) if c == "group"
        ));
        assert!(matches!(
            parse_csv(b"a,a,group\n1,1,0\n2,2,1\n", "group"),
            Err(Error::DuplicateColumn(c)) if c == "a"
        ));
    }

    #[test]
    fn empty_cells_and_nan_rejected() {
        assert!(matches!(
            parse_csv(b"a,group\n1,0\n,1\n", "group"),
            Err(Error::NonNumeric { row: 2, .. })
        ));
        assert!(matches!(
            parse_csv(b"a,group\n1,0\nNaN,1\n", "group"),
            Err(Error::NonFinite { row: 2, .. })
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_csv("/nonexistent/data.csv", "group"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn split_sizes_follow_floor() {
        let data = synth_dataset(20, 1, 0, 3).unwrap().select_rows(&(0..10).collect::<Vec<_>>()).unwrap();
        let s = split(&data, 0.7, 11).unwrap();
        assert_eq!((s.train.n_rows(), s.test.n_rows()), (7, 3));
        assert_eq!(train_size(1063, 0.7), 744);
        assert_eq!(1063 - train_size(1063, 0.7), 319);
    }

    #[test]
    fn split_is_deterministic_partition() {
        let data = synth_dataset(50, 2, 1, 5).unwrap();
        let a = split(&data, 0.7, 99).unwrap();
        let b = split(&data, 0.7, 99).unwrap();
        assert_eq!(a.train_rows, b.train_rows);
        let mut all: Vec<usize> = a.train_rows.iter().chain(&a.test_rows).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        let c = split(&data, 0.7, 100).unwrap();
        assert_ne!(a.train_rows, c.train_rows);
    }

    #[test]
    fn degenerate_split_rejected() {
        let data = synth_dataset(20, 1, 0, 1).unwrap();
        assert!(matches!(split(&data, 0.01, 0), Err(Error::DegenerateSplit { .. })));
        assert!(split(&data, 1.0, 0).is_err());
    }

    #[test]
    fn stratified_split_keeps_class_ratio() {
        let data = synth_dataset(200, 1, 0, 8).unwrap();
        let s = split_stratified(&data, 0.7, 1).unwrap();
        let [c0, c1] = data.class_counts();
        assert_eq!(s.train.class_counts(), [train_size(c0, 0.7), train_size(c1, 0.7)]);
    }

    #[test]
    fn synth_shape_and_classes() {
        let m = synth_dataset(100, 2, 3, 0).unwrap();
        assert_eq!(m.n_features(), 5);
        assert_eq!(m.n_rows(), 100);
        assert!(m.require_both_classes().is_ok());
        assert_eq!(m, synth_dataset(100, 2, 3, 0).unwrap());
        assert!(synth_dataset(100, 0, 3, 0).is_err());
        assert!(synth_dataset(19, 1, 3, 0).is_err());
    }

    #[test]
    fn invariants_enforced_on_construction() {
        assert!(FeatureMatrix::new(vec![1.0], vec![0], names(&["a"])).is_err());
        assert!(FeatureMatrix::new(vec![1.0, f64::NAN], vec![0, 1], names(&["a"])).is_err());
        assert!(FeatureMatrix::new(vec![1.0, 2.0], vec![0, 3], names(&["a"])).is_err());
        let single = FeatureMatrix::new(vec![1.0, 2.0], vec![1, 1], names(&["a"])).unwrap();
        assert!(matches!(single.require_both_classes(), Err(Error::SingleClass(1))));
    }
}
