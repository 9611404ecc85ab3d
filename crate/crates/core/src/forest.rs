//! CART classification trees and the bagged random forest.
//!
//! Splits maximize the two-class impurity reduction
//!
//! ```text
//! gain = p0(A) p1(A) - |AL|/|A| p0(AL) p1(AL) - |AR|/|A| p0(AR) p1(AR)
//! ```
//!
//! over midpoints between consecutive distinct values of each candidate
//! feature. Rows with `value <= threshold` go left. Candidates are compared
//! exactly in integer arithmetic, so equal-gain splits really tie; ties go to
//! the lowest feature index, then the lowest threshold.
//!
//! Variable importance is the mean decrease in Gini impurity: every split on
//! feature `v` adds `n_node * (G(A) - |AL|/|A| G(AL) - |AR|/|A| G(AR))`,
//! with `G = 1 - sum p_i^2` and `n_node` counted with bootstrap multiplicity,
//! and the per-feature totals are divided by the number of trees. For two
//! classes `G = 2 p0 p1`, so each contribution equals `2 * n_node * gain`.
//! The values therefore scale with the training-set size; a fully grown tree
//! contributes `N * G(root)` in total.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, stream_seed, Rng};
use crate::tabular::FeatureMatrix;

pub const FOREST_SCHEMA_VERSION: u32 = 1;

/// Gini impurity `1 - sum p_i^2` of a class probability vector.
pub fn gini_impurity(class_probs: &[f64]) -> Result<f64> {
    if class_probs.is_empty() || class_probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = class_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
    }
    Ok(1.0 - class_probs.iter().map(|p| p * p).sum::<f64>())
}

fn p0p1(counts: [u64; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    counts[0] as f64 * counts[1] as f64 / (n * n)
}

/// Impurity reduction of splitting the node rows (`values`, `labels`) at
/// `threshold`. Both children must be non-empty.
pub fn split_gain(values: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: labels.len(),
        });
    }
    if values.len() < 2 {
        return Err(Error::InvalidArgument("a split needs at least two rows".into()));
    }
    let mut left = [0u64; 2];
    let mut right = [0u64; 2];
    for (&v, &y) in values.iter().zip(labels) {
        let side = if v <= threshold { &mut left } else { &mut right };
        side[usize::from(y.min(1))] += 1;
    }
    let (nl, nr) = (left[0] + left[1], right[0] + right[1]);
    if nl == 0 || nr == 0 {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} leaves a child empty"
        )));
    }
    let n = (nl + nr) as f64;
    let parent = [left[0] + right[0], left[1] + right[1]];
    Ok(p0p1(parent) - nl as f64 / n * p0p1(left) - nr as f64 / n * p0p1(right))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub n_left: usize,
    pub n_right: usize,
}

/// Weighted child term `l0 l1 / l + r0 r1 / r` as an exact fraction.
#[derive(Debug, Clone, Copy)]
struct ChildTerm {
    num: u128,
    den: u128,
}

impl ChildTerm {
    fn new(left: [u64; 2], right: [u64; 2]) -> Self {
        let l = u128::from(left[0] + left[1]);
        let r = u128::from(right[0] + right[1]);
        let lp = u128::from(left[0]) * u128::from(left[1]);
        let rp = u128::from(right[0]) * u128::from(right[1]);
        Self {
            num: lp * r + rp * l,
            den: l * r,
        }
    }

    fn less_than(&self, other: &Self) -> bool {
        self.num * other.den < other.num * self.den
    }

    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    split: Split,
    term: ChildTerm,
}

/// Reusable buffers for the threshold sweep.
#[derive(Default)]
struct Scratch {
    pairs: Vec<(f64, u8)>,
}

fn search_feature(
    column: &[f64],
    labels: &[u8],
    rows: &[usize],
    feature: usize,
    min_leaf: usize,
    parent: [u64; 2],
    scratch: &mut Scratch,
) -> Option<Candidate> {
    let pairs = &mut scratch.pairs;
    pairs.clear();
    pairs.extend(rows.iter().map(|&i| (column[i], labels[i])));
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = pairs.len();
    let n_f = n as f64;
    let parent_term = parent[0] as f64 * parent[1] as f64 / n_f;
    let mut left = [0u64; 2];
    let mut best: Option<Candidate> = None;
    for i in 0..n - 1 {
        left[usize::from(pairs[i].1)] += 1;
        let (lo, hi) = (pairs[i].0, pairs[i + 1].0);
        let n_left = i + 1;
        if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
            continue;
        }
        let right = [parent[0] - left[0], parent[1] - left[1]];
        let term = ChildTerm::new(left, right);
        if best.as_ref().is_some_and(|b| !term.less_than(&b.term)) {
            continue;
        }
        let mut threshold = lo + (hi - lo) / 2.0;
        if threshold >= hi {
            threshold = lo;
        }
        best = Some(Candidate {
            split: Split {
                feature,
                threshold,
                gain: (parent_term - term.value()) / n_f,
                n_left,
                n_right: n - n_left,
            },
            term,
        });
    }
    best
}

fn search_features(
    columns: &[Vec<f64>],
    labels: &[u8],
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
    scratch: &mut Scratch,
) -> Option<Candidate> {
    if rows.len() < 2 {
        return None;
    }
    let mut parent = [0u64; 2];
    for &i in rows {
        parent[usize::from(labels[i])] += 1;
    }
    let mut sorted = features.to_vec();
    sorted.sort_unstable();
    let mut best: Option<Candidate> = None;
    for f in sorted {
        if let Some(c) = search_feature(&columns[f], labels, rows, f, min_leaf, parent, scratch) {
            if best.as_ref().is_none_or(|b| c.term.less_than(&b.term)) {
                best = Some(c);
            }
        }
    }
    best
}

fn columns_of(data: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..data.n_features()).map(|j| data.column(j)).collect()
}

/// Best split of `rows` (duplicates count with multiplicity) over the given
/// features, or `None` when no split leaves `min_leaf` rows on both sides.
pub fn best_split(
    data: &FeatureMatrix,
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Result<Option<Split>> {
    if let Some(&f) = features.iter().find(|&&f| f >= data.n_features()) {
        return Err(Error::InvalidArgument(format!("feature index {f} out of range")));
    }
    if let Some(&i) = rows.iter().find(|&&i| i >= data.n_rows()) {
        return Err(Error::InvalidArgument(format!("row index {i} out of range")));
    }
    let columns = columns_of(data);
    Ok(search_features(
        &columns,
        data.labels(),
        rows,
        features,
        min_leaf.max(1),
        &mut Scratch::default(),
    )
    .map(|c| c.split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        class_counts: [u64; 2],
    },
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// A fitted tree stored as a node arena with the root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    /// Validates that children always point forward, so the arena is a tree.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("tree has no nodes".into()));
        }
        let mut referenced = vec![false; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            if let TreeNode::Internal { left, right, .. } = *node {
                for child in [left, right] {
                    if child <= i || child >= nodes.len() || referenced[child] {
                        return Err(Error::InvalidArgument(format!("invalid child index {child}")));
                    }
                    referenced[child] = true;
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn leaf(class_counts: [u64; 2]) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { class_counts }],
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaf_counts(&self, x: &[f64]) -> [u64; 2] {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { class_counts } => return class_counts,
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// Majority class of the reached leaf; an even leaf votes 0.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let [c0, c1] = self.leaf_counts(x);
        u8::from(c1 > c0)
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features examined per node; `None` means `floor(sqrt(V))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    /// `None` grows until leaves are pure or cannot be split.
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_leaf: 1,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, n_features: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| ((n_features as f64).sqrt().floor() as usize).max(1))
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidArgument("n_trees must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument("min_leaf must be at least 1".into()));
        }
        let mtry = self.resolved_mtry(n_features);
        if mtry == 0 || mtry > n_features {
            return Err(Error::InvalidArgument(format!(
                "mtry must lie in 1..={n_features}, got {mtry}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<DecisionTree>,
    in_bag: Vec<Vec<bool>>,
    importance: Vec<f64>,
    oob_error: Option<f64>,
    params: ForestParams,
    feature_names: Vec<String>,
}

struct GrownTree {
    tree: DecisionTree,
    in_bag: Vec<bool>,
    importance: Vec<f64>,
}

fn grow_tree(
    columns: &[Vec<f64>],
    labels: &[u8],
    params: &ForestParams,
    mtry: usize,
    rng: &mut Rng,
) -> GrownTree {
    let n = labels.len();
    let n_features = columns.len();
    let rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut in_bag = vec![false; n];
    for &i in &rows {
        in_bag[i] = true;
    }

    let mut importance = vec![0.0; n_features];
    let mut nodes = vec![TreeNode::Leaf {
        class_counts: [0, 0],
    }];
    let mut stack = vec![(0usize, rows, 0usize)];
    let mut features: Vec<usize> = (0..n_features).collect();
    let mut scratch = Scratch::default();

    while let Some((slot, rows, depth)) = stack.pop() {
        let mut counts = [0u64; 2];
        for &i in &rows {
            counts[usize::from(labels[i])] += 1;
        }
        let splittable = counts[0] > 0
            && counts[1] > 0
            && rows.len() >= 2 * params.min_leaf
            && params.max_depth.is_none_or(|d| depth < d);
        let mut chosen = None;
        if splittable {
            // Examine mtry random features; if none of them separates the
            // node, keep drawing batches from the same permutation.
            features.shuffle(rng);
            for batch in features.chunks(mtry) {
                chosen = search_features(columns, labels, &rows, batch, params.min_leaf, &mut scratch);
                if chosen.is_some() {
                    break;
                }
            }
        }
        let Some(Candidate { split, .. }) = chosen else {
            nodes[slot] = TreeNode::Leaf {
                class_counts: counts,
            };
            continue;
        };

        importance[split.feature] += 2.0 * rows.len() as f64 * split.gain;
        let column = &columns[split.feature];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| column[i] <= split.threshold);
        let left = nodes.len();
        let right = left + 1;
        nodes.push(TreeNode::Leaf {
            class_counts: [0, 0],
        });
        nodes.push(TreeNode::Leaf {
            class_counts: [0, 0],
        });
        nodes[slot] = TreeNode::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        stack.push((right, right_rows, depth + 1));
        stack.push((left, left_rows, depth + 1));
    }

    GrownTree {
        tree: DecisionTree { nodes },
        in_bag,
        importance,
    }
}

/// Fits `params.n_trees` trees. Tree `t` draws from its own ChaCha8 stream
/// seeded with `stream_seed(params.seed, t)`, so the result does not depend
/// on how many threads grow the trees.
pub fn fit_forest(data: &FeatureMatrix, params: &ForestParams) -> Result<Forest> {
    data.require_both_classes()?;
    let n_features = data.n_features();
    params.validate(n_features)?;
    let mtry = params.resolved_mtry(n_features);
    let columns = columns_of(data);
    let labels = data.labels();

    let grown: Vec<GrownTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(stream_seed(params.seed, t as u64));
            grow_tree(&columns, labels, params, mtry, &mut rng)
        })
        .collect();

    let mut importance = vec![0.0; n_features];
    let mut trees = Vec::with_capacity(grown.len());
    let mut in_bag = Vec::with_capacity(grown.len());
    for g in grown {
        for (total, v) in importance.iter_mut().zip(&g.importance) {
            *total += v;
        }
        trees.push(g.tree);
        in_bag.push(g.in_bag);
    }
    let m = params.n_trees as f64;
    for v in &mut importance {
        *v /= m;
    }

    let mut forest = Forest {
        trees,
        in_bag,
        importance,
        oob_error: None,
        params: params.clone(),
        feature_names: data.names().to_vec(),
    };
    forest.oob_error = match oob_error(&forest, data) {
        Ok(e) => Some(e),
        Err(Error::NoOobRows) => None,
        Err(e) => return Err(e),
    };
    Ok(forest)
}

impl Forest {
    /// Assembles a forest from hand-built trees and in-bag masks. Importance
    /// is zero and the OOB error is left unset.
    pub fn from_parts(
        trees: Vec<DecisionTree>,
        in_bag: Vec<Vec<bool>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidArgument("a forest needs at least one tree".into()));
        }
        if !in_bag.is_empty() && in_bag.len() != trees.len() {
            return Err(Error::LengthMismatch {
                left: trees.len(),
                right: in_bag.len(),
            });
        }
        let params = ForestParams {
            n_trees: trees.len(),
            ..ForestParams::default()
        };
        Ok(Self {
            importance: vec![0.0; feature_names.len()],
            trees,
            in_bag,
            oob_error: None,
            params,
            feature_names,
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    /// In-bag indicator of tree `t` (empty for deserialized forests).
    pub fn in_bag(&self, t: usize) -> &[bool] {
        self.in_bag.get(t).map_or(&[], Vec::as_slice)
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    /// OOB error recorded at fit time.
    pub fn oob_error(&self) -> Option<f64> {
        self.oob_error
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Number of trees voting for class 1.
    pub fn votes(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                found: x.len(),
            });
        }
        Ok(self.trees.iter().filter(|t| t.predict(x) == 1).count())
    }

    pub fn to_document(&self) -> ForestDocument {
        ForestDocument {
            schema_version: FOREST_SCHEMA_VERSION,
            params: self.params.clone(),
            feature_names: self.feature_names.clone(),
            importance: self.importance.clone(),
            oob_error: self.oob_error,
            trees: self.trees.iter().map(|t| t.nodes.clone()).collect(),
        }
    }

    pub fn from_document(doc: ForestDocument) -> Result<Self> {
        if doc.schema_version != FOREST_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                artifact: "forest",
                expected: FOREST_SCHEMA_VERSION,
                found: doc.schema_version,
            });
        }
        let trees = doc
            .trees
            .into_iter()
            .map(DecisionTree::from_nodes)
            .collect::<Result<Vec<_>>>()?;
        let n_features = doc.feature_names.len();
        for tree in &trees {
            for node in tree.nodes() {
                if let TreeNode::Internal { feature, .. } = node {
                    if *feature >= n_features {
                        return Err(Error::InvalidArgument(format!(
                            "split feature {feature} out of range"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            trees,
            in_bag: Vec::new(),
            importance: doc.importance,
            oob_error: doc.oob_error,
            params: doc.params,
            feature_names: doc.feature_names,
        })
    }
}

/// Serialized forest. Bootstrap masks are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestDocument {
    pub schema_version: u32,
    pub params: ForestParams,
    pub feature_names: Vec<String>,
    pub importance: Vec<f64>,
    pub oob_error: Option<f64>,
    pub trees: Vec<Vec<TreeNode>>,
}

/// Majority vote: 1 iff more than half of the trees vote 1.
pub fn predict_forest(model: &Forest, x: &[f64]) -> Result<u8> {
    let ones = model.votes(x)?;
    Ok(u8::from(2 * ones > model.trees.len()))
}

/// Out-of-bag error over `data`, which must be the training matrix. Each row
/// is voted on only by trees that did not sample it; rows sampled by every
/// tree are skipped.
pub fn oob_error(model: &Forest, data: &FeatureMatrix) -> Result<f64> {
    let curve = oob_tallies(model, data, false)?;
    curve.last().copied().flatten().ok_or(Error::NoOobRows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OobPoint {
    pub n_trees: usize,
    pub error: Option<f64>,
}

/// OOB error of the sub-forest made of the first `m` trees, for every `m`.
pub fn oob_curve(model: &Forest, data: &FeatureMatrix) -> Result<Vec<OobPoint>> {
    Ok(oob_tallies(model, data, true)?
        .into_iter()
        .enumerate()
        .map(|(m, error)| OobPoint {
            n_trees: m + 1,
            error,
        })
        .collect())
}

fn oob_tallies(model: &Forest, data: &FeatureMatrix, every_prefix: bool) -> Result<Vec<Option<f64>>> {
    if data.n_features() != model.n_features() {
        return Err(Error::DimensionMismatch {
            expected: model.n_features(),
            found: data.n_features(),
        });
    }
    if model.in_bag.len() != model.trees.len() {
        return Err(Error::NoOobRows);
    }
    let n = data.n_rows();
    if let Some(mask) = model.in_bag.iter().find(|m| m.len() != n) {
        return Err(Error::LengthMismatch {
            left: mask.len(),
            right: n,
        });
    }
    let mut oob_trees = vec![0usize; n];
    let mut ones = vec![0usize; n];
    let mut out = Vec::new();
    let error_now = |oob_trees: &[usize], ones: &[usize]| {
        let mut counted = 0usize;
        let mut wrong = 0usize;
        for i in 0..n {
            if oob_trees[i] == 0 {
                continue;
            }
            counted += 1;
            let vote = u8::from(2 * ones[i] > oob_trees[i]);
            if vote != data.labels()[i] {
                wrong += 1;
            }
        }
        (counted > 0).then(|| wrong as f64 / counted as f64)
    };
    for (tree, mask) in model.trees.iter().zip(&model.in_bag) {
        for i in 0..n {
            if !mask[i] {
                oob_trees[i] += 1;
                ones[i] += usize::from(tree.predict(data.row(i)));
            }
        }
        if every_prefix {
            out.push(error_now(&oob_trees, &ones));
        }
    }
    if !every_prefix {
        out.push(error_now(&oob_trees, &ones));
    }
    Ok(out)
}
