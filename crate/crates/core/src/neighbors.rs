//! k-nearest-neighbour classification on standardized features and
//! cross-validated choice of k.
//!
//! Distances are squared Euclidean between z-scored vectors, with each
//! column's mean and population standard deviation taken from the training
//! rows. Neighbours at equal distance are ranked by training-row index.
//!
//! k is chosen by minimizing, over held-out folds, the mean of
//! `(MAE + RMSE + (1 - R^2)) / 3` computed on predicted class-1 fractions
//! against the 0/1 labels. `1 - R^2` turns the goodness-of-fit into an error
//! so the three terms can be averaged. Equal scores keep the smaller k.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::regression_metrics;
use crate::rng::rng_from_seed;
use crate::tabular::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    /// Fits on the given rows; a zero-variance column is an error naming it.
    pub fn fit(data: &FeatureMatrix) -> Result<Self> {
        let n = data.n_rows() as f64;
        let mut means = Vec::with_capacity(data.n_features());
        let mut stds = Vec::with_capacity(data.n_features());
        for j in 0..data.n_features() {
            let col = data.column(j);
            let m = col.iter().sum::<f64>() / n;
            let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            if !(s > 0.0) {
                return Err(Error::ConstantColumn(data.names()[j].clone()));
            }
            means.push(m);
            stds.push(s);
        }
        Ok(Self { means, stds })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    /// Standardized training rows, row-major.
    pub train_vectors: Vec<f64>,
    pub train_labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub label: u8,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn fit_knn(data: &FeatureMatrix, k: usize) -> Result<KnnModel> {
    let n = data.n_rows();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let standardizer = Standardizer::fit(data)?;
    let mut train_vectors = Vec::with_capacity(data.values().len());
    for i in 0..n {
        train_vectors.extend(standardizer.transform(data.row(i)));
    }
    Ok(KnnModel {
        k,
        feature_names: data.names().to_vec(),
        standardizer,
        train_vectors,
        train_labels: data.labels().to_vec(),
    })
}

impl KnnModel {
    pub fn n_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn train_row(&self, i: usize) -> &[f64] {
        let v = self.n_features();
        &self.train_vectors[i * v..(i + 1) * v]
    }

    /// The `m` nearest training rows to the raw query `x`, nearest first.
    pub fn nearest(&self, x: &[f64], m: usize) -> Result<Vec<Neighbor>> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                found: x.len(),
            });
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("query value {bad} is not finite")));
        }
        let m = m.min(self.n_train());
        let q = self.standardizer.transform(x);
        let mut all: Vec<Neighbor> = (0..self.n_train())
            .map(|i| Neighbor {
                index: i,
                distance: squared_distance(&q, self.train_row(i)),
                label: self.train_labels[i],
            })
            .collect();
        let order = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index));
        if m < all.len() && m > 0 {
            all.select_nth_unstable_by(m - 1, order);
            all.truncate(m);
        }
        all.sort_by(order);
        Ok(all)
    }

    /// Fraction of the k nearest neighbours labelled 1.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        let nb = self.nearest(x, self.k)?;
        Ok(ones(&nb) as f64 / self.k as f64)
    }

    /// Majority vote. A split vote goes to the class whose neighbours have
    /// the smaller summed distance, and to class 1 if those sums are equal.
    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        let nb = self.nearest(x, self.k)?;
        Ok(vote(&nb))
    }
}

fn ones(nb: &[Neighbor]) -> usize {
    nb.iter().filter(|n| n.label == 1).count()
}

fn vote(nb: &[Neighbor]) -> u8 {
    let k = nb.len();
    let c1 = ones(nb);
    match (2 * c1).cmp(&k) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => {
            let (mut d0, mut d1) = (0.0, 0.0);
            for n in nb {
                if n.label == 1 {
                    d1 += n.distance;
                } else {
                    d0 += n.distance;
                }
            }
            u8::from(d0 >= d1)
        }
    }
}

/// `floor(sqrt(n_train))`, at least 1.
pub fn default_k_max(n_train: usize) -> usize {
    ((n_train as f64).sqrt().floor() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEvaluation {
    pub fold: usize,
    pub k: usize,
    pub n_test: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub candidates: Vec<KScore>,
    pub fold_evaluations: Vec<FoldEvaluation>,
    pub chosen_k: usize,
    pub k_max: usize,
    pub folds: usize,
    /// Seed of the partition actually used (the requested seed or seed + 1).
    pub fold_seed: u64,
    pub stratified: bool,
}

impl KSelectionReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>4}  {:>9}  {:>9}  {:>9}  {:>9}\n",
            "k", "mae", "rmse", "r2", "score"
        );
        for c in &self.candidates {
            out.push_str(&format!(
                "{:>4}  {:>9.5}  {:>9.5}  {:>9.5}  {:>9.5}{}\n",
                c.k,
                c.mae,
                c.rmse,
                c.r2,
                c.composite,
                if c.k == self.chosen_k { "  *" } else { "" }
            ));
        }
        out
    }
}

/// Fold index of every row: a seeded permutation dealt round-robin, so fold
/// sizes differ by at most one. The stratified variant deals each class
/// separately, continuing the rotation from one class to the next.
pub fn assign_folds(labels: &[u8], folds: usize, seed: u64, stratify: bool) -> Vec<usize> {
    let n = labels.len();
    let mut rng = rng_from_seed(seed);
    let mut assignment = vec![0; n];
    if stratify {
        let mut next = 0;
        for class in 0..=1u8 {
            let mut rows: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            rows.shuffle(&mut rng);
            for i in rows {
                assignment[i] = next % folds;
                next += 1;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (pos, i) in order.into_iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

fn single_class_fold(labels: &[u8], assignment: &[usize], folds: usize) -> Option<usize> {
    (0..folds).find(|&f| {
        let mut seen = [false; 2];
        for (i, &a) in assignment.iter().enumerate() {
            if a == f {
                seen[usize::from(labels[i])] = true;
            }
        }
        !(seen[0] && seen[1])
    })
}

/// Cross-validated choice of k in `1..=k_max`.
pub fn select_k(
    data: &FeatureMatrix,
    k_max: usize,
    folds: usize,
    seed: u64,
    stratify: bool,
) -> Result<KSelectionReport> {
    let n = data.n_rows();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!("folds must lie in 2..={n}, got {folds}")));
    }
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let labels = data.labels();
    let mut fold_seed = seed;
    let mut assignment = assign_folds(labels, folds, fold_seed, stratify);
    if single_class_fold(labels, &assignment, folds).is_some() {
        fold_seed = seed.wrapping_add(1);
        assignment = assign_folds(labels, folds, fold_seed, stratify);
        if let Some(fold) = single_class_fold(labels, &assignment, folds) {
            return Err(Error::SingleClassFold { fold });
        }
    }
    let smallest_train = (0..folds)
        .map(|f| assignment.iter().filter(|&&a| a != f).count())
        .min()
        .unwrap_or(0);
    if k_max > smallest_train {
        return Err(Error::KOutOfRange {
            k: k_max,
            n: smallest_train,
        });
    }

    let per_fold: Vec<Vec<FoldEvaluation>> = (0..folds)
        .into_par_iter()
        .map(|f| evaluate_fold(data, &assignment, f, k_max))
        .collect::<Result<_>>()?;

    let mut candidates = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let rows: Vec<&FoldEvaluation> = per_fold.iter().map(|evals| &evals[k - 1]).collect();
        let avg = |f: fn(&FoldEvaluation) -> f64| rows.iter().map(|e| f(e)).sum::<f64>() / folds as f64;
        let (mae, rmse, r2) = (avg(|e| e.mae), avg(|e| e.rmse), avg(|e| e.r2));
        candidates.push(KScore {
            k,
            mae,
            rmse,
            r2,
            composite: (mae + rmse + (1.0 - r2)) / 3.0,
        });
    }
    let mut chosen = &candidates[0];
    for c in &candidates[1..] {
        if c.composite < chosen.composite {
            chosen = c;
        }
    }
    Ok(KSelectionReport {
        chosen_k: chosen.k,
        candidates,
        fold_evaluations: per_fold.into_iter().flatten().collect(),
        k_max,
        folds,
        fold_seed,
        stratified: stratify,
    })
}

fn evaluate_fold(
    data: &FeatureMatrix,
    assignment: &[usize],
    fold: usize,
    k_max: usize,
) -> Result<Vec<FoldEvaluation>> {
    let train_rows: Vec<usize> = (0..data.n_rows()).filter(|&i| assignment[i] != fold).collect();
    let test_rows: Vec<usize> = (0..data.n_rows()).filter(|&i| assignment[i] == fold).collect();
    let model = fit_knn(&data.select_rows(&train_rows)?, k_max)?;
    let truth: Vec<f64> = test_rows.iter().map(|&i| f64::from(data.labels()[i])).collect();

    // probas[k-1][t] from one sorted neighbour list per query
    let mut probas = vec![Vec::with_capacity(test_rows.len()); k_max];
    for &i in &test_rows {
        let nb = model.nearest(data.row(i), k_max)?;
        let mut c1 = 0usize;
        for (k, n) in nb.iter().enumerate() {
            c1 += usize::from(n.label);
            probas[k].push(c1 as f64 / (k + 1) as f64);
        }
    }
    probas
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let m = regression_metrics(&truth, p)?;
            Ok(FoldEvaluation {
                fold,
                k: k + 1,
                n_test: test_rows.len(),
                mae: m.mae,
                rmse: m.rmse,
                r2: m.r2.ok_or(Error::SingleClassFold { fold })?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::synth_dataset;
    use proptest::prelude::*;

    fn matrix(rows: &[Vec<f64>], labels: Vec<u8>) -> FeatureMatrix {
        let v = rows[0].len();
        FeatureMatrix::from_rows(rows, labels, (0..v).map(|j| format!("x{j}")).collect()).unwrap()
    }

    #[test]
    fn fit_bounds_and_validation() {
        let data = matrix(&[vec![0.0, 1.0], vec![1.0, 2.0], vec![2.0, 0.0]], vec![0, 1, 0]);
        let m = fit_knn(&data, 1).unwrap();
        assert_eq!(m.n_train(), 3);
        assert!(matches!(fit_knn(&data, 4), Err(Error::KOutOfRange { k: 4, n: 3 })));
        assert!(matches!(fit_knn(&data, 0), Err(Error::KOutOfRange { .. })));
        let constant = matrix(&[vec![1.0, 5.0], vec![2.0, 5.0]], vec![0, 1]);
        match fit_knn(&constant, 1) {
            Err(Error::ConstantColumn(name)) => assert_eq!(name, "x1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exact_match_and_global_prevalence() {
        let data = synth_dataset(50, 2, 1, 4).unwrap();
        let m1 = fit_knn(&data, 1).unwrap();
        for i in 0..data.n_rows() {
            assert_eq!(m1.predict_proba(data.row(i)).unwrap(), f64::from(data.labels()[i]));
        }
        let all = fit_knn(&data, 50).unwrap();
        let prevalence = data.class_counts()[1] as f64 / 50.0;
        assert_eq!(all.predict_proba(&[0.0, 0.0, 0.0]).unwrap(), prevalence);
        assert!(matches!(all.predict(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn even_k_tie_prefers_nearer_class() {
        // 1-D training points: class 0 at 0 and 10, class 1 at 3 and 20.
        // The query at 1 sees 0 (class 0, d=1) and 3 (class 1, d=4) first.
        let data = matrix(&[vec![0.0], vec![3.0], vec![10.0], vec![20.0]], vec![0, 1, 0, 1]);
        let m = fit_knn(&data, 2).unwrap();
        assert_eq!(m.predict_proba(&[1.0]).unwrap(), 0.5);
        assert_eq!(m.predict(&[1.0]).unwrap(), 0);
        // query at 2.5: 3 (class 1) is nearer than 0 (class 0)
        assert_eq!(m.predict(&[2.5]).unwrap(), 1);
        // equidistant: class 1
        assert_eq!(m.predict(&[1.5]).unwrap(), 1);
    }

    #[test]
    fn distance_ties_go_to_lower_index() {
        // centred data: query 0 is exactly equidistant from rows 0 and 1
        let data = matrix(&[vec![-1.0], vec![1.0], vec![-5.0], vec![5.0]], vec![1, 0, 0, 0]);
        let m = fit_knn(&data, 1).unwrap();
        let nb = m.nearest(&[0.0], 2).unwrap();
        assert_eq!(nb[0].distance, nb[1].distance);
        assert_eq!(nb[0].index, 0);
        assert_eq!(m.predict(&[0.0]).unwrap(), 1);
    }

    #[test]
    fn default_k_max_values() {
        assert_eq!(default_k_max(730), 27);
        assert_eq!(default_k_max(744), 27);
        assert_eq!(default_k_max(1), 1);
    }

    #[test]
    fn select_k_accounting_and_determinism() {
        let data = synth_dataset(200, 3, 2, 10).unwrap();
        let a = select_k(&data, 12, 5, 99, false).unwrap();
        assert_eq!(a.candidates.len(), 12);
        assert_eq!(a.fold_evaluations.len(), 60);
        let best = a.candidates.iter().map(|c| c.composite).fold(f64::INFINITY, f64::min);
        let first_best = a.candidates.iter().find(|c| c.composite == best).unwrap();
        assert_eq!(first_best.k, a.chosen_k);
        assert_eq!(a, select_k(&data, 12, 5, 99, false).unwrap());
        let s = select_k(&data, 12, 5, 99, true).unwrap();
        assert!(s.stratified);
    }

    #[test]
    fn separated_clusters_choose_one() {
        // Tight clusters of six points whose labels alternate from one
        // cluster to the next: the nearest neighbour always shares the label.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..20 {
            for d in 0..6 {
                let jitter = f64::from(d) * 0.01;
                rows.push(vec![f64::from(c) * 10.0 + jitter]);
                labels.push((c % 2) as u8);
            }
        }
        let data = matrix(&rows, labels);
        let r = select_k(&data, 8, 5, 1, false).unwrap();
        assert_eq!(r.chosen_k, 1);
    }

    #[test]
    fn select_k_rejects_bad_arguments() {
        let data = synth_dataset(40, 2, 0, 1).unwrap();
        assert!(select_k(&data, 5, 1, 0, false).is_err());
        assert!(select_k(&data, 0, 5, 0, false).is_err());
        assert!(matches!(select_k(&data, 33, 5, 0, false), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn single_class_folds_error_after_redraw() {
        // one positive row cannot appear in every held-out fold
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![f64::from(i)]).collect();
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i == 0)).collect();
        assert!(matches!(
            select_k(&matrix(&rows, labels), 3, 5, 0, false),
            Err(Error::SingleClassFold { .. })
        ));
    }

    #[test]
    fn folds_are_balanced() {
        let labels: Vec<u8> = (0..23).map(|i| (i % 3 == 0) as u8).collect();
        for stratify in [false, true] {
            let a = assign_folds(&labels, 5, 3, stratify);
            let mut sizes = [0; 5];
            for f in a {
                sizes[f] += 1;
            }
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    proptest! {
        #[test]
        fn affine_rescaling_does_not_change_predictions(
            seed in 0u64..1000, scale in 0.5f64..20.0, shift in -50.0f64..50.0, k in 1usize..8
        ) {
            let data = synth_dataset(40, 2, 1, seed).unwrap();
            let m = fit_knn(&data, k).unwrap();
            let rows: Vec<Vec<f64>> = (0..40)
                .map(|i| { let mut r = data.row(i).to_vec(); r[0] = r[0] * scale + shift; r })
                .collect();
            let scaled = FeatureMatrix::from_rows(&rows, data.labels().to_vec(), data.names().to_vec()).unwrap();
            let ms = fit_knn(&scaled, k).unwrap();
            let q = [0.3, -0.2, 1.1];
            let qs = [0.3 * scale + shift, -0.2, 1.1];
            let a = m.nearest(&q, k).unwrap();
            let b = ms.nearest(&qs, k).unwrap();
            // same neighbour sets unless distances nearly coincide
            let gap = a.last().unwrap().distance;
            let next = m.nearest(&q, k + 1).unwrap().get(k).map(|n| n.distance).unwrap_or(f64::INFINITY);
            if next - gap > 1e-9 {
                prop_assert_eq!(m.predict_proba(&q).unwrap(), ms.predict_proba(&qs).unwrap());
                let ia: Vec<usize> = a.iter().map(|n| n.index).collect();
                let mut ib: Vec<usize> = b.iter().map(|n| n.index).collect();
                let mut ia_sorted = ia.clone();
                ia_sorted.sort_unstable();
                ib.sort_unstable();
                prop_assert_eq!(ia_sorted, ib);
            }
        }
    }
}
