//! Axis-aligned regression trees with constant leaves, fitted greedily by
//! squared-error reduction. Trees read only the newest observation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, ObservationWindow, Policy};

pub const DEFAULT_MAX_DEPTH: usize = 6;
pub const DEFAULT_MIN_LEAF: usize = 8;

/// Splits whose error reduction falls below this are not taken.
const MIN_GAIN: f64 = 1e-12;

/// Node visits allowed to the exact search before it gives up.
const EXACT_BUDGET: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: Vec<f64>,
    },
}

impl TreeNode {
    fn route(&self, x: &[f64]) -> &[f64] {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub root: TreeNode,
}

/// Checkpoint wrapper: `{"format": "tree", ...RegressionTree}`.
#[derive(Serialize, Deserialize)]
struct TreeCheckpoint {
    format: String,
    #[serde(flatten)]
    tree: RegressionTree,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> &[f64] {
        self.root.route(x)
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaves(&self) -> usize {
        self.root.leaves()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TreeCheckpoint { format: "tree".into(), tree: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: TreeCheckpoint = serde_json::from_str(text)?;
        if ck.format != "tree" {
            return Err(Error::Checkpoint(format!("expected format \"tree\", found {:?}", ck.format)));
        }
        ck.tree.validate()?;
        Ok(ck.tree)
    }

    fn validate(&self) -> Result<()> {
        fn walk(node: &TreeNode, t: &RegressionTree) -> Result<()> {
            match node {
                TreeNode::Leaf { value } => {
                    if value.len() != t.action_dim || !value.iter().all(|v| v.is_finite()) {
                        return Err(Error::Checkpoint("leaf value has wrong dimension or is not finite".into()));
                    }
                    Ok(())
                }
                TreeNode::Split { feature, threshold, left, right } => {
                    if *feature >= t.obs_dim || !threshold.is_finite() {
                        return Err(Error::Checkpoint(format!("invalid split on feature {feature}")));
                    }
                    walk(left, t)?;
                    walk(right, t)
                }
            }
        }
        walk(&self.root, self)
    }
}

impl Policy for RegressionTree {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn act(&self, w: &ObservationWindow) -> Result<Action> {
        Ok(Action(self.predict(w.newest()).to_vec()))
    }
}

/// Fits a tree to `(features, target)` rows.
///
/// Splits are searched over every feature and every midpoint between
/// consecutive distinct values; ties go to the lowest feature index, then the
/// lowest threshold. When there are few distinct targets, a depth-first
/// search looks for a zero-error tree shallower than the greedy one (or
/// within `max_depth` if the greedy tree misfits) and takes it if found.
pub fn fit_tree(features: &[&[f64]], targets: &[&[f64]], max_depth: usize, min_leaf: usize) -> Result<RegressionTree> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != targets.len() {
        return Err(Error::Dimension { expected: features.len(), got: targets.len() });
    }
    let min_leaf = min_leaf.max(1);
    if features.len() < min_leaf {
        return Err(Error::Config(format!(
            "tree fit needs at least {min_leaf} samples, got {}",
            features.len()
        )));
    }
    let obs_dim = features[0].len();
    let action_dim = targets[0].len();
    let fitter = Fitter { x: features, y: targets, obs_dim, action_dim, max_depth, min_leaf };
    let idx: Vec<usize> = (0..features.len()).collect();
    let mut root = fitter.grow(idx.clone(), 0);
    let limit = if fits_exactly(&root, features, targets) { root.depth().checked_sub(1) } else { Some(max_depth) };
    if let Some(exact) = limit.and_then(|limit| fitter.exact(&idx, limit)) {
        root = exact;
    }
    Ok(RegressionTree { obs_dim, action_dim, max_depth, min_leaf, root })
}

fn fits_exactly(root: &TreeNode, features: &[&[f64]], targets: &[&[f64]]) -> bool {
    features.iter().zip(targets).all(|(x, y)| root.route(x) == *y)
}

struct Fitter<'a> {
    x: &'a [&'a [f64]],
    y: &'a [&'a [f64]],
    obs_dim: usize,
    action_dim: usize,
    max_depth: usize,
    min_leaf: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Fitter<'_> {
    fn mean(&self, idx: &[usize]) -> Vec<f64> {
        // Offsetting by the first target makes constant leaves exact.
        let first = self.y[idx[0]];
        let mut m = vec![0.0; self.action_dim];
        for &i in idx {
            for ((a, v), f) in m.iter_mut().zip(self.y[i]).zip(first) {
                *a += v - f;
            }
        }
        let n = idx.len() as f64;
        m.iter_mut().zip(first).for_each(|(a, f)| *a = f + *a / n);
        m
    }

    fn grow(&self, idx: Vec<usize>, depth: usize) -> TreeNode {
        let mean = self.mean(&idx);
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return TreeNode::Leaf { value: mean };
        }
        let Some(best) = self.best_split(&idx, &mean) else {
            return TreeNode::Leaf { value: mean };
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.x[i][best.feature] < best.threshold);
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.grow(left, depth + 1)),
            right: Box::new(self.grow(right, depth + 1)),
        }
    }

    fn best_split(&self, idx: &[usize], mean: &[f64]) -> Option<BestSplit> {
        let n = idx.len();
        let d = self.action_dim;
        // Targets centred on the node mean keep the running sums well conditioned.
        let centred: Vec<f64> = idx
            .iter()
            .flat_map(|&i| self.y[i].iter().zip(mean).map(|(v, m)| v - m))
            .collect();
        let total_sq: f64 = centred.iter().map(|v| v * v).sum();
        let total_sum: Vec<f64> = (0..d).map(|k| centred.iter().skip(k).step_by(d).sum()).collect();
        let parent_sse = sse(&total_sum, total_sq, n);

        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = (0..n).collect();
        for feature in 0..self.obs_dim {
            let value = |j: usize| self.x[idx[j]][feature];
            order.sort_by(|&a, &b| value(a).total_cmp(&value(b)).then(a.cmp(&b)));
            let mut left_sum = vec![0.0; d];
            let mut left_sq = 0.0;
            for pos in 0..n - 1 {
                let j = order[pos];
                for k in 0..d {
                    let v = centred[j * d + k];
                    left_sum[k] += v;
                    left_sq += v * v;
                }
                let n_left = pos + 1;
                let n_right = n - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let (lo, hi) = (value(j), value(order[pos + 1]));
                if lo >= hi {
                    continue;
                }
                let right_sum: Vec<f64> = total_sum.iter().zip(&left_sum).map(|(t, l)| t - l).collect();
                let split_sse = sse(&left_sum, left_sq, n_left) + sse(&right_sum, total_sq - left_sq, n_right);
                let gain = parent_sse - split_sse;
                if gain < MIN_GAIN {
                    continue;
                }
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold <= lo {
                        threshold = hi;
                    }
                    best = Some(BestSplit { feature, threshold, gain });
                }
            }
        }
        best
    }
}

impl Fitter<'_> {
    /// Shallowest zero-error tree of depth at most `limit`, if the search
    /// finds one within budget.
    fn exact(&self, idx: &[usize], limit: usize) -> Option<TreeNode> {
        let mut ids: HashMap<Vec<u64>, u32> = HashMap::new();
        let labels: Vec<u32> = self
            .y
            .iter()
            .map(|y| {
                let next = ids.len() as u32;
                *ids.entry(y.iter().map(|v| v.to_bits()).collect()).or_insert(next)
            })
            .collect();
        if ids.len() > 1usize.checked_shl(limit as u32).unwrap_or(usize::MAX) {
            return None;
        }
        let mut search = ExactSearch { f: self, labels, kinds: ids.len(), budget: EXACT_BUDGET };
        (0..=limit).find_map(|depth| search.node(idx, depth))
    }
}

struct ExactSearch<'a, 'b> {
    f: &'a Fitter<'b>,
    labels: Vec<u32>,
    kinds: usize,
    budget: usize,
}

impl ExactSearch<'_, '_> {
    fn distinct(&self, idx: &[usize]) -> usize {
        let mut seen = vec![false; self.kinds];
        idx.iter().filter(|&&i| !std::mem::replace(&mut seen[self.labels[i] as usize], true)).count()
    }

    fn node(&mut self, idx: &[usize], depth: usize) -> Option<TreeNode> {
        let distinct = self.distinct(idx);
        if distinct == 1 {
            return Some(TreeNode::Leaf { value: self.f.mean(idx) });
        }
        let room = 1usize.checked_shl(depth as u32).unwrap_or(usize::MAX);
        if depth == 0 || distinct > room || idx.len() < 2 * self.f.min_leaf || self.budget == 0 {
            return None;
        }
        self.budget -= 1;
        let half = room / 2;
        // Candidate splits whose sides could still be fitted, fewest labels first.
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        let mut order = idx.to_vec();
        for feature in 0..self.f.obs_dim {
            let x = |i: usize| self.f.x[i][feature];
            order.sort_by(|&a, &b| x(a).total_cmp(&x(b)).then(a.cmp(&b)));
            let mut right = vec![0usize; order.len() + 1];
            let mut seen = vec![false; self.kinds];
            for p in (0..order.len()).rev() {
                let new = !std::mem::replace(&mut seen[self.labels[order[p]] as usize], true);
                right[p] = right[p + 1] + new as usize;
            }
            seen.iter_mut().for_each(|s| *s = false);
            let mut left = 0;
            for p in 0..order.len() - 1 {
                left += !std::mem::replace(&mut seen[self.labels[order[p]] as usize], true) as usize;
                let n_left = p + 1;
                let (lo, hi) = (x(order[p]), x(order[p + 1]));
                if lo >= hi || n_left < self.f.min_leaf || order.len() - n_left < self.f.min_leaf {
                    continue;
                }
                if left <= half && right[p + 1] <= half {
                    let t = 0.5 * (lo + hi);
                    cands.push((left + right[p + 1], feature, if t <= lo { hi } else { t }));
                }
            }
        }
        cands.sort_by_key(|c| c.0);
        for (_, feature, threshold) in cands {
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.f.x[i][feature] < threshold);
            let Some(left) = self.node(&l, depth - 1) else { continue };
            let Some(right) = self.node(&r, depth - 1) else { continue };
            return Some(TreeNode::Split { feature, threshold, left: Box::new(left), right: Box::new(right) });
        }
        None
    }
}

fn sse(sum: &[f64], sq: f64, n: usize) -> f64 {
    let n = n as f64;
    (sq - sum.iter().map(|s| s * s).sum::<f64>() / n).max(0.0)
}

/// Mean squared error of the tree on `(features, target)` rows, summed over
/// action components.
pub fn tree_mse(tree: &RegressionTree, features: &[&[f64]], targets: &[&[f64]]) -> f64 {
    let total: f64 = features
        .iter()
        .zip(targets)
        .map(|(x, y)| tree.predict(x).iter().zip(y.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>())
        .sum();
    total / features.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(xs: &[Vec<f64>]) -> Vec<&[f64]> {
        xs.iter().map(Vec::as_slice).collect()
    }

    fn sign_data(n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![-1.0 + 2.0 * (i as f64 + 0.5) / n as f64]).collect();
        let y = x.iter().map(|v| vec![if v[0] < 0.0 { -1.0 } else { 1.0 }]).collect();
        (x, y)
    }

    /// Best single split by exhaustive search over all midpoints.
    fn brute_force_split(x: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, f64) {
        let mut vals: Vec<f64> = x.iter().map(|v| v[0]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut best = (f64::INFINITY, f64::NAN);
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<f64>, Vec<f64>) = {
                let l = x.iter().zip(y).filter(|(a, _)| a[0] < t).map(|(_, b)| b[0]).collect();
                let r = x.iter().zip(y).filter(|(a, _)| a[0] >= t).map(|(_, b)| b[0]).collect();
                (l, r)
            };
            let cost = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| (a - m).powi(2)).sum::<f64>()
            };
            let c = cost(&l) + cost(&r);
            if c < best.0 {
                best = (c, t);
            }
        }
        best
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, (i * 7 % 13) as f64]).collect();
        let y: Vec<Vec<f64>> = vec![vec![0.3]; 50];
        let tree = fit_tree(&rows(&x), &rows(&y), 6, 8).unwrap();
        assert_eq!(tree.root, TreeNode::Leaf { value: vec![0.3] });
    }

    #[test]
    fn sign_function_is_split_at_zero() {
        let (x, y) = sign_data(200);
        let (_, t_star) = brute_force_split(&x, &y);
        let tree = fit_tree(&rows(&x), &rows(&y), 1, 8).unwrap();
        match &tree.root {
            TreeNode::Split { feature: 0, threshold, left, right } => {
                assert_eq!(*threshold, t_star);
                assert!(threshold.abs() < 0.01);
                assert_eq!(**left, TreeNode::Leaf { value: vec![-1.0] });
                assert_eq!(**right, TreeNode::Leaf { value: vec![1.0] });
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(tree_mse(&tree, &rows(&x), &rows(&y)), 0.0);
    }

    #[test]
    fn predict_uses_strict_less() {
        let tree = RegressionTree {
            obs_dim: 1,
            action_dim: 1,
            max_depth: 1,
            min_leaf: 1,
            root: TreeNode::Split {
                feature: 0,
                threshold: 0.0,
                left: Box::new(TreeNode::Leaf { value: vec![-1.0] }),
                right: Box::new(TreeNode::Leaf { value: vec![1.0] }),
            },
        };
        assert_eq!(tree.predict(&[-0.2]), &[-1.0]);
        assert_eq!(tree.predict(&[0.0]), &[1.0]);
    }

    #[test]
    fn tree_beats_constant_predictor() {
        let x: Vec<Vec<f64>> = (0..300).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![v[0] * v[1] + 0.5 * v[0]]).collect();
        let tree = fit_tree(&rows(&x), &rows(&y), 4, 8).unwrap();
        let mean = y.iter().map(|v| v[0]).sum::<f64>() / y.len() as f64;
        let const_mse = y.iter().map(|v| (v[0] - mean).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(tree_mse(&tree, &rows(&x), &rows(&y)) <= const_mse);
        assert!(tree.depth() <= 4);
    }

    #[test]
    fn min_leaf_is_respected() {
        let (x, y) = sign_data(20);
        let tree = fit_tree(&rows(&x), &rows(&y), 6, 15).unwrap();
        assert_eq!(tree.leaves(), 1);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(fit_tree(&[], &[], 3, 1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn json_checkpoint_round_trip() {
        let (x, y) = sign_data(64);
        let tree = fit_tree(&rows(&x), &rows(&y), 2, 4).unwrap();
        let text = tree.to_json().unwrap();
        assert!(text.contains("\"format\": \"tree\""));
        assert_eq!(RegressionTree::from_json(&text).unwrap(), tree);
        assert!(RegressionTree::from_json(&text.replace("\"tree\"", "\"mlp\"")).is_err());
    }
}
