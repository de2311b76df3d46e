//! Histogram-based, leaf-wise gradient-boosted regression trees with a
//! Tweedie objective on a log link.
//!
//! Features are discretised once into equal-frequency bins. Each boosting
//! round builds gradient/hessian histograms per leaf, repeatedly splits the
//! leaf with the highest gain until `max_leaves` is reached, and adds the
//! tree's Newton leaf values scaled by the learning rate. Split thresholds
//! are stored as raw feature values so prediction needs no bin table.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tweedie::{grad_hess, tweedie_loss, validate_power, DEFAULT_TWEEDIE_POWER};
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

pub const GBDT_SCHEMA: &str = "htsf.gbdt.v1";

/// Offset inside the log of the initial score.
pub const BASE_SCORE_EPS: f64 = 1e-12;

/// Splits must improve the second-order objective by more than this.
pub const MIN_SPLIT_GAIN: f64 = 1e-12;

/// Smallest hessian mass allowed in a child.
pub const MIN_CHILD_HESSIAN: f64 = 1e-3;

/// Backtracking halvings tried when a tree would increase training loss.
const MAX_BACKTRACK: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub learning_rate: f64,
    pub feature_fraction: f64,
    pub num_rounds: usize,
    pub max_leaves: usize,
    pub min_leaf_samples: usize,
    pub max_bins: usize,
    pub tweedie_power: f64,
    pub l2_lambda: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            feature_fraction: 0.5,
            num_rounds: 100,
            max_leaves: 31,
            min_leaf_samples: 20,
            max_bins: 255,
            tweedie_power: DEFAULT_TWEEDIE_POWER,
            l2_lambda: 0.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParam(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return bad(format!("feature_fraction {} must lie in (0, 1]", self.feature_fraction));
        }
        if self.max_leaves < 2 {
            return bad(format!("max_leaves {} must be >= 2", self.max_leaves));
        }
        if self.min_leaf_samples < 1 {
            return bad("min_leaf_samples must be >= 1".into());
        }
        if !(2..=u16::MAX as usize + 1).contains(&self.max_bins) {
            return bad(format!("max_bins {} must lie in 2..=65536", self.max_bins));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad(format!("l2_lambda {} must be >= 0", self.l2_lambda));
        }
        validate_power(self.tweedie_power)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { value, count } => Some((*value, *count)),
            TreeNode::Split { .. } => None,
        })
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub schema: String,
    pub params: GbdtParams,
    pub n_features: usize,
    /// Initial raw score `log(mean(y) + ε)`.
    pub base_score: f64,
    pub trees: Vec<Tree>,
    /// Summed training loss after the base score and after every round.
    pub train_loss: Vec<f64>,
}

impl GbdtModel {
    pub fn raw_score(&self, x: &[f64]) -> f64 {
        let lr = self.params.learning_rate;
        self.base_score + lr * self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>()
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Dimension {
                what: "feature row",
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.raw_score(x).exp())
    }

    pub fn predict(&self, x: &RowMatrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::Dimension {
                what: "feature matrix columns",
                expected: self.n_features,
                got: x.cols(),
            });
        }
        Ok(x.iter_rows().map(|r| self.raw_score(r).exp()).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.schema != GBDT_SCHEMA {
            return Err(Error::Data(format!("unexpected model schema '{}'", model.schema)));
        }
        Ok(model)
    }
}

/// Per-feature bin boundaries. Bin `k` holds `thresholds[k-1] < x <= thresholds[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBins {
    pub thresholds: Vec<f64>,
}

impl FeatureBins {
    /// Equal-frequency binning with at most `max_bins` bins. Features with
    /// no more than `max_bins` distinct values get one bin per value.
    pub fn fit(values: &[f64], max_bins: usize) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct: Vec<(f64, usize)> = Vec::new();
        for v in sorted {
            match distinct.last_mut() {
                Some((last, count)) if *last == v => *count += 1,
                _ => distinct.push((v, 1)),
            }
        }
        let mid = |a: f64, b: f64| a + (b - a) / 2.0;
        if distinct.len() <= max_bins {
            return Self {
                thresholds: distinct.windows(2).map(|w| mid(w[0].0, w[1].0)).collect(),
            };
        }
        let n = values.len() as f64;
        let per_bin = n / max_bins as f64;
        let mut thresholds = Vec::with_capacity(max_bins - 1);
        let mut cum = 0usize;
        for w in distinct.windows(2) {
            cum += w[0].1;
            if thresholds.len() + 1 >= max_bins {
                break;
            }
            if cum as f64 >= (thresholds.len() + 1) as f64 * per_bin {
                thresholds.push(mid(w[0].0, w[1].0));
            }
        }
        Self { thresholds }
    }

    pub fn n_bins(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn bin_of(&self, x: f64) -> u16 {
        self.thresholds.partition_point(|&t| t < x) as u16
    }
}

/// Column-major binned copy of a training matrix.
pub struct BinnedMatrix {
    pub bins: Vec<FeatureBins>,
    columns: Vec<Vec<u16>>,
    rows: usize,
}

impl BinnedMatrix {
    pub fn new(x: &RowMatrix, max_bins: usize) -> Self {
        let columns_raw: Vec<Vec<f64>> = (0..x.cols())
            .map(|c| (0..x.rows()).map(|r| x.get(r, c)).collect())
            .collect();
        let (bins, columns) = columns_raw
            .par_iter()
            .map(|col| {
                let b = FeatureBins::fit(col, max_bins);
                let binned = col.iter().map(|&v| b.bin_of(v)).collect();
                (b, binned)
            })
            .unzip();
        Self {
            bins,
            columns,
            rows: x.rows(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.bins.len()
    }
}

/// Gradient, hessian and count sums per bin for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHistogram {
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub count: Vec<u32>,
}

impl FeatureHistogram {
    fn build(column: &[u16], n_bins: usize, rows: &[u32], grad: &[f64], hess: &[f64]) -> Self {
        let mut h = Self {
            grad: vec![0.0; n_bins],
            hess: vec![0.0; n_bins],
            count: vec![0; n_bins],
        };
        for &r in rows {
            let r = r as usize;
            let b = column[r] as usize;
            h.grad[b] += grad[r];
            h.hess[b] += hess[r];
            h.count[b] += 1;
        }
        h
    }

    fn subtract(parent: &Self, child: &Self) -> Self {
        Self {
            grad: parent.grad.iter().zip(&child.grad).map(|(a, b)| a - b).collect(),
            hess: parent.hess.iter().zip(&child.hess).map(|(a, b)| a - b).collect(),
            count: parent.count.iter().zip(&child.count).map(|(a, b)| a - b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    /// Last bin sent left.
    pub bin: usize,
    pub threshold: f64,
    pub gain: f64,
    pub left_grad: f64,
    pub left_hess: f64,
    pub left_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SplitRules {
    pub l2_lambda: f64,
    pub min_leaf_samples: usize,
    pub min_child_hessian: f64,
}

#[inline]
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, g: f64, h: f64, lambda: f64) -> f64 {
    gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)
}

/// Best split of one feature's histogram. Ties keep the lowest bin.
pub fn best_split_for_feature(
    feature: usize,
    hist: &FeatureHistogram,
    bins: &FeatureBins,
    total: (f64, f64, usize),
    rules: &SplitRules,
) -> Option<SplitCandidate> {
    let (g, h, n) = total;
    let mut best: Option<SplitCandidate> = None;
    let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
    for k in 0..bins.n_bins().saturating_sub(1) {
        gl += hist.grad[k];
        hl += hist.hess[k];
        nl += hist.count[k] as usize;
        let nr = n - nl;
        if nl < rules.min_leaf_samples {
            continue;
        }
        if nr < rules.min_leaf_samples {
            break;
        }
        let (gr, hr) = (g - gl, h - hl);
        if hl < rules.min_child_hessian || hr < rules.min_child_hessian {
            continue;
        }
        let gain = split_gain(gl, hl, gr, hr, g, h, rules.l2_lambda);
        if gain > MIN_SPLIT_GAIN && best.is_none_or(|b| gain > b.gain) {
            best = Some(SplitCandidate {
                feature,
                bin: k,
                threshold: bins.thresholds[k],
                gain,
                left_grad: gl,
                left_hess: hl,
                left_count: nl,
            });
        }
    }
    best
}

/// Best split across features, ties resolved toward the lowest feature
/// index and then the lowest threshold.
pub fn best_split(
    features: &[usize],
    hists: &[Option<FeatureHistogram>],
    binned: &BinnedMatrix,
    total: (f64, f64, usize),
    rules: &SplitRules,
) -> Option<SplitCandidate> {
    let per_feature: Vec<Option<SplitCandidate>> = features
        .par_iter()
        .map(|&f| {
            let hist = hists[f].as_ref().expect("histogram for sampled feature");
            best_split_for_feature(f, hist, &binned.bins[f], total, rules)
        })
        .collect();
    per_feature.into_iter().flatten().fold(None, |best: Option<SplitCandidate>, c| match best {
        Some(b) if b.gain >= c.gain => Some(b),
        _ => Some(c),
    })
}

struct Leaf {
    node: usize,
    rows: Vec<u32>,
    grad: f64,
    hess: f64,
    hists: Vec<Option<FeatureHistogram>>,
    best: Option<SplitCandidate>,
}

fn build_hists(
    binned: &BinnedMatrix,
    features: &[usize],
    rows: &[u32],
    grad: &[f64],
    hess: &[f64],
) -> Vec<Option<FeatureHistogram>> {
    let built: Vec<(usize, FeatureHistogram)> = features
        .par_iter()
        .map(|&f| {
            (
                f,
                FeatureHistogram::build(&binned.columns[f], binned.bins[f].n_bins(), rows, grad, hess),
            )
        })
        .collect();
    let mut out = vec![None; binned.n_features()];
    for (f, h) in built {
        out[f] = Some(h);
    }
    out
}

fn sum_rows(rows: &[u32], v: &[f64]) -> f64 {
    rows.iter().map(|&r| v[r as usize]).sum()
}

/// Grows one leaf-wise tree. Returns the tree and every training row's
/// leaf value (zero for rows not in `rows`).
fn grow_tree(
    binned: &BinnedMatrix,
    features: &[usize],
    grad: &[f64],
    hess: &[f64],
    params: &GbdtParams,
) -> (Tree, Vec<f64>) {
    let rules = SplitRules {
        l2_lambda: params.l2_lambda,
        min_leaf_samples: params.min_leaf_samples,
        min_child_hessian: MIN_CHILD_HESSIAN,
    };
    let all: Vec<u32> = (0..binned.rows as u32).collect();
    let (g, h) = (sum_rows(&all, grad), sum_rows(&all, hess));
    let hists = build_hists(binned, features, &all, grad, hess);
    let best = best_split(features, &hists, binned, (g, h, all.len()), &rules);
    let mut nodes = vec![TreeNode::Leaf { value: 0.0, count: all.len() }];
    let mut leaves = vec![Leaf {
        node: 0,
        rows: all,
        grad: g,
        hess: h,
        hists,
        best,
    }];

    while leaves.len() < params.max_leaves {
        let mut pick: Option<usize> = None;
        for (i, leaf) in leaves.iter().enumerate() {
            if let Some(b) = leaf.best {
                if pick.is_none_or(|p| b.gain > leaves[p].best.expect("picked has split").gain) {
                    pick = Some(i);
                }
            }
        }
        let Some(i) = pick else { break };
        let parent = leaves.swap_remove(i);
        let split = parent.best.expect("picked leaf has a split");
        let column = &binned.columns[split.feature];
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) =
            parent.rows.iter().partition(|&&r| (column[r as usize] as usize) <= split.bin);

        let (lg, lh) = (sum_rows(&left_rows, grad), sum_rows(&left_rows, hess));
        let (rg, rh) = (sum_rows(&right_rows, grad), sum_rows(&right_rows, hess));

        let (left_hists, right_hists) = if left_rows.len() <= right_rows.len() {
            let small = build_hists(binned, features, &left_rows, grad, hess);
            let large = subtract_all(&parent.hists, &small);
            (small, large)
        } else {
            let small = build_hists(binned, features, &right_rows, grad, hess);
            let large = subtract_all(&parent.hists, &small);
            (large, small)
        };

        let left_node = nodes.len();
        let right_node = left_node + 1;
        nodes[parent.node] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_node,
            right: right_node,
            gain: split.gain,
        };
        nodes.push(TreeNode::Leaf { value: 0.0, count: left_rows.len() });
        nodes.push(TreeNode::Leaf { value: 0.0, count: right_rows.len() });

        let leaf_best = |hists: &[Option<FeatureHistogram>], g: f64, h: f64, n: usize| {
            if leaves.len() + 2 > params.max_leaves {
                // The tree is full after this split; skip the search.
                None
            } else {
                best_split(features, hists, binned, (g, h, n), &rules)
            }
        };
        let left_best = leaf_best(&left_hists, lg, lh, left_rows.len());
        let right_best = leaf_best(&right_hists, rg, rh, right_rows.len());
        leaves.push(Leaf {
            node: left_node,
            rows: left_rows,
            grad: lg,
            hess: lh,
            hists: left_hists,
            best: left_best,
        });
        leaves.push(Leaf {
            node: right_node,
            rows: right_rows,
            grad: rg,
            hess: rh,
            hists: right_hists,
            best: right_best,
        });
        // keep leaf order stable by node id for deterministic tie-breaks
        leaves.sort_by_key(|l| l.node);
    }

    let mut row_values = vec![0.0; binned.rows];
    for leaf in &leaves {
        let value = -leaf.grad / (leaf.hess + params.l2_lambda);
        let value = if value.is_finite() { value } else { 0.0 };
        nodes[leaf.node] = TreeNode::Leaf {
            value,
            count: leaf.rows.len(),
        };
        for &r in &leaf.rows {
            row_values[r as usize] = value;
        }
    }
    (Tree { nodes }, row_values)
}

fn subtract_all(parent: &[Option<FeatureHistogram>], child: &[Option<FeatureHistogram>]) -> Vec<Option<FeatureHistogram>> {
    parent
        .iter()
        .zip(child)
        .map(|(p, c)| match (p, c) {
            (Some(p), Some(c)) => Some(FeatureHistogram::subtract(p, c)),
            _ => None,
        })
        .collect()
}

fn total_loss(y: &[f64], f: &[f64], rho: f64) -> f64 {
    y.iter().zip(f).map(|(&y, &f)| tweedie_loss(y, f, rho)).sum()
}

/// Trains a boosted ensemble on non-negative targets.
///
/// A round whose tree would raise the summed training loss has its leaf
/// values halved until the loss no longer increases; trees without any
/// split are dropped, so constant data yields a base-score-only model.
pub fn gbdt_train(x: &RowMatrix, y: &[f64], params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    if x.rows() != y.len() {
        return Err(Error::Dimension {
            what: "targets",
            expected: x.rows(),
            got: y.len(),
        });
    }
    if x.cols() == 0 {
        return Err(Error::InvalidParam("feature matrix has no columns".into()));
    }
    if x.rows() < 2 * params.min_leaf_samples {
        return Err(Error::InvalidParam(format!(
            "{} training rows; need at least 2 * min_leaf_samples = {}",
            x.rows(),
            2 * params.min_leaf_samples
        )));
    }
    if let Some(bad) = y.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data(format!("tweedie targets must be finite and non-negative, found {bad}")));
    }
    if x.iter_rows().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("feature matrix contains non-finite values".into()));
    }

    let rho = params.tweedie_power;
    let n = y.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let base_score = (mean + BASE_SCORE_EPS).ln();
    let binned = BinnedMatrix::new(x, params.max_bins);
    let n_features = x.cols();
    let n_sampled = ((params.feature_fraction * n_features as f64).round() as usize).clamp(1, n_features);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut score = vec![base_score; n];
    let mut loss = total_loss(y, &score, rho);
    let mut train_loss = vec![loss];
    let mut trees = Vec::new();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for _ in 0..params.num_rounds {
        for i in 0..n {
            (grad[i], hess[i]) = grad_hess(y[i], score[i], rho);
        }
        let mut features: Vec<usize> = sample(&mut rng, n_features, n_sampled).into_vec();
        features.sort_unstable();

        let (mut tree, row_values) = grow_tree(&binned, &features, &grad, &hess, params);
        if tree.n_leaves() < 2 {
            train_loss.push(loss);
            continue;
        }

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACK {
            let step = params.learning_rate * scale;
            let candidate: Vec<f64> = score.iter().zip(&row_values).map(|(s, v)| s + step * v).collect();
            let new_loss = total_loss(y, &candidate, rho);
            if new_loss <= loss {
                accepted = Some((candidate, new_loss));
                break;
            }
            scale *= 0.5;
        }
        if let Some((candidate, new_loss)) = accepted {
            if scale != 1.0 {
                for node in &mut tree.nodes {
                    if let TreeNode::Leaf { value, .. } = node {
                        *value *= scale;
                    }
                }
            }
            score = candidate;
            loss = new_loss;
            trees.push(tree);
        }
        train_loss.push(loss);
    }

    Ok(GbdtModel {
        schema: GBDT_SCHEMA.to_string(),
        params: params.clone(),
        n_features,
        base_score,
        trees,
        train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn step_data(n: usize, seed: u64) -> (RowMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = RowMatrix::with_cols(3);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let row = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            y.push(if row[0] < 0.5 { 1.0 } else { 3.0 });
            x.push_row(&row);
        }
        (x, y)
    }

    fn rmse(a: &[f64], b: &[f64]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    fn step_params() -> GbdtParams {
        GbdtParams {
            learning_rate: 0.1,
            feature_fraction: 1.0,
            num_rounds: 100,
            ..GbdtParams::default()
        }
    }

    #[test]
    fn constant_target_is_base_only() {
        let (x, _) = step_data(200, 1);
        let y = vec![4.5; 200];
        let m = gbdt_train(&x, &y, &step_params()).unwrap();
        assert!(m.trees.is_empty());
        for p in m.predict(&x).unwrap() {
            assert!((p - 4.5).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_features_and_targets() {
        let x = RowMatrix::new(50, 2, vec![1.0; 100]);
        let m = gbdt_train(&x, &[2.0; 50], &GbdtParams::default()).unwrap();
        assert!(m.trees.is_empty());
        assert!((m.predict_row(&[1.0, 1.0]).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn learns_step_function() {
        let (x, y) = step_data(1000, 2);
        let m = gbdt_train(&x, &y, &step_params()).unwrap();
        let pred = m.predict(&x).unwrap();
        let err = rmse(&pred, &y);
        assert!(err < 0.05, "rmse {err}");
        // oracle: group means by the true threshold
        let lo: Vec<f64> = (0..x.rows()).filter(|&r| x.get(r, 0) < 0.5).map(|r| pred[r]).collect();
        let lo_mean = lo.iter().sum::<f64>() / lo.len() as f64;
        assert!((lo_mean - 1.0).abs() < 0.05);
        for w in m.train_loss.windows(2) {
            assert!(w[1] <= w[0], "loss increased: {} -> {}", w[0], w[1]);
        }
        assert_eq!(m.train_loss.len(), 101);
        for tree in &m.trees {
            assert!(tree.n_leaves() <= 31);
            assert!(tree.leaves().all(|(_, c)| c >= 20));
        }
    }

    #[test]
    fn deterministic_under_seed_and_thread_count() {
        let (x, y) = step_data(500, 3);
        let params = GbdtParams {
            feature_fraction: 0.7,
            num_rounds: 20,
            seed: 9,
            ..GbdtParams::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| gbdt_train(&x, &y, &params).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let other = gbdt_train(&x, &y, &GbdtParams { seed: 10, ..params.clone() }).unwrap();
        assert_ne!(a.trees, other.trees);
    }

    #[test]
    fn empty_ensemble_predicts_mean() {
        let (x, y) = step_data(100, 4);
        let m = gbdt_train(&x, &y, &GbdtParams { num_rounds: 0, ..GbdtParams::default() }).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let p = m.predict_row(x.row(0)).unwrap();
        assert!((p - (mean + BASE_SCORE_EPS)).abs() < 1e-12);
    }

    #[test]
    fn prediction_is_row_order_invariant() {
        let (x, y) = step_data(300, 5);
        let m = gbdt_train(&x, &y, &GbdtParams { num_rounds: 10, ..GbdtParams::default() }).unwrap();
        let p = m.predict(&x).unwrap();
        let rev_rows: Vec<&[f64]> = (0..x.rows()).rev().map(|r| x.row(r)).collect();
        let mut p_rev = m.predict(&RowMatrix::from_rows(&rev_rows)).unwrap();
        p_rev.reverse();
        assert_eq!(p, p_rev);
        assert!(p.iter().all(|v| *v > 0.0));
        assert!(m.predict(&RowMatrix::new(1, 2, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn json_roundtrip_preserves_predictions() {
        let (x, y) = step_data(200, 6);
        let m = gbdt_train(&x, &y, &GbdtParams { num_rounds: 5, ..GbdtParams::default() }).unwrap();
        let back = GbdtModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        let tampered = m.to_json().unwrap().replace(GBDT_SCHEMA, "other.v9");
        assert!(GbdtModel::from_json(&tampered).is_err());
    }

    #[test]
    fn invalid_params_and_data() {
        let (x, y) = step_data(100, 7);
        for p in [
            GbdtParams { learning_rate: 0.0, ..GbdtParams::default() },
            GbdtParams { max_leaves: 1, ..GbdtParams::default() },
            GbdtParams { tweedie_power: 2.0, ..GbdtParams::default() },
            GbdtParams { feature_fraction: 0.0, ..GbdtParams::default() },
            GbdtParams { min_leaf_samples: 60, ..GbdtParams::default() },
        ] {
            assert!(gbdt_train(&x, &y, &p).is_err(), "{p:?}");
        }
        let mut neg = y.clone();
        neg[0] = -1.0;
        assert!(gbdt_train(&x, &neg, &GbdtParams::default()).is_err());
    }

    #[test]
    fn binning_thresholds() {
        let b = FeatureBins::fit(&[3.0, 1.0, 2.0, 2.0], 255);
        assert_eq!(b.thresholds, vec![1.5, 2.5]);
        assert_eq!((b.bin_of(1.0), b.bin_of(1.5), b.bin_of(2.0), b.bin_of(9.0)), (0, 0, 1, 2));
        let many: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        let b = FeatureBins::fit(&many, 255);
        assert_eq!(b.n_bins(), 255);
        let mut counts = vec![0usize; 255];
        for v in &many {
            counts[b.bin_of(*v) as usize] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 2, "unbalanced bins {lo}..{hi}");
    }

    /// Exhaustive split search over raw values: for each threshold between
    /// consecutive distinct values, sum gradients of rows on each side.
    fn exhaustive_best(x: &RowMatrix, g: &[f64], h: &[f64], rules: &SplitRules) -> Option<(usize, f64, f64)> {
        let (gt, ht): (f64, f64) = (g.iter().sum(), h.iter().sum());
        let mut best: Option<(usize, f64, f64)> = None;
        for f in 0..x.cols() {
            let mut vals: Vec<f64> = (0..x.rows()).map(|r| x.get(r, f)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = w[0] + (w[1] - w[0]) / 2.0;
                let left: Vec<usize> = (0..x.rows()).filter(|&r| x.get(r, f) <= thr).collect();
                let nl = left.len();
                let nr = x.rows() - nl;
                if nl < rules.min_leaf_samples || nr < rules.min_leaf_samples {
                    continue;
                }
                let gl: f64 = left.iter().map(|&r| g[r]).sum();
                let hl: f64 = left.iter().map(|&r| h[r]).sum();
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < rules.min_child_hessian || hr < rules.min_child_hessian {
                    continue;
                }
                let gain = split_gain(gl, hl, gr, hr, gt, ht, rules.l2_lambda);
                if gain > MIN_SPLIT_GAIN && best.is_none_or(|b| gain > b.2) {
                    best = Some((f, thr, gain));
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn histogram_split_matches_exhaustive(
            cells in prop::collection::vec((0u8..12, 0u8..12, 0u8..12, -64i32..64, 1i32..32), 40..120),
            lambda in prop::sample::select(vec![0.0, 1.0]),
        ) {
            // Dyadic gradients/hessians keep every partial sum exact, so the
            // two routes must agree bit for bit.
            let rows: Vec<[f64; 3]> = cells.iter().map(|c| [c.0 as f64, c.1 as f64 * 0.5, c.2 as f64 - 3.0]).collect();
            let x = RowMatrix::from_rows(&rows);
            let g: Vec<f64> = cells.iter().map(|c| c.3 as f64 / 8.0).collect();
            let h: Vec<f64> = cells.iter().map(|c| c.4 as f64 / 8.0).collect();
            let rules = SplitRules { l2_lambda: lambda, min_leaf_samples: 5, min_child_hessian: MIN_CHILD_HESSIAN };
            let binned = BinnedMatrix::new(&x, 255);
            let all: Vec<u32> = (0..x.rows() as u32).collect();
            let features = [0usize, 1, 2];
            let hists = build_hists(&binned, &features, &all, &g, &h);
            let total = (g.iter().sum::<f64>(), h.iter().sum::<f64>(), x.rows());
            let hist_best = best_split(&features, &hists, &binned, total, &rules).map(|c| (c.feature, c.threshold, c.gain));
            prop_assert_eq!(hist_best, exhaustive_best(&x, &g, &h, &rules));
        }
    }
}
