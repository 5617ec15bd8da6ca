//! Regression trees grown leaf-wise with exact greedy split search.

use super::{FeatureMatrix, GbdtError};

/// L2 penalty on leaf values.
pub const LEAF_L2: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_leaves: usize,
    /// Minimum number of training rows per leaf, counted with row weights.
    pub min_data_in_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_leaves: 255,
            min_data_in_leaf: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// A binary tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match self.nodes[idx] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => idx = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.len() - self.n_leaves()
    }
}

/// Row indices sorted by each column, and the columns themselves, computed
/// once per training run.
#[derive(Debug, Clone)]
pub struct Presorted {
    order: Vec<Vec<u32>>,
    /// `values[f][r]`: column-major copy of the matrix.
    values: Vec<Vec<f64>>,
}

impl Presorted {
    pub fn new(matrix: &FeatureMatrix) -> Self {
        let values: Vec<Vec<f64>> = (0..matrix.n_cols())
            .map(|f| (0..matrix.n_rows()).map(|r| matrix.get(r, f)).collect())
            .collect();
        let order = values
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted { order, values }
    }

    fn n_rows(&self) -> usize {
        self.order.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// A leaf awaiting a split. Its rows occupy `start..end` of every
/// per-feature index array, sorted by that feature.
#[derive(Debug, Clone, Copy)]
struct OpenLeaf {
    node: usize,
    start: usize,
    end: usize,
    grad: f64,
    hess: f64,
    count: f64,
    best: Option<SplitChoice>,
}

fn leaf_score(g: f64, h: f64) -> f64 {
    g * g / (h + LEAF_L2)
}

/// Midpoint between two consecutive distinct values, never equal to `hi`.
fn threshold_between(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid < hi {
        mid
    } else {
        lo
    }
}

/// Per-row `(gradient, hessian, weight)`.
type RowStats = [f64; 3];

fn best_split(
    presorted: &Presorted,
    order: &[Vec<u32>],
    leaf: &OpenLeaf,
    stats: &[RowStats],
    min_data: f64,
) -> Option<SplitChoice> {
    let parent = leaf_score(leaf.grad, leaf.hess);
    let mut best: Option<SplitChoice> = None;
    for (f, idx) in order.iter().enumerate() {
        let rows = &idx[leaf.start..leaf.end];
        let col = &presorted.values[f];
        let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0.0);
        let mut v = col[rows[0] as usize];
        for k in 0..rows.len() - 1 {
            let [g, h, w] = stats[rows[k] as usize];
            gl += g;
            hl += h;
            cl += w;
            let next = col[rows[k + 1] as usize];
            let same = v == next;
            let lo = v;
            v = next;
            if same || cl < min_data || leaf.count - cl < min_data {
                continue;
            }
            let gain = leaf_score(gl, hl) + leaf_score(leaf.grad - gl, leaf.hess - hl) - parent;
            if gain > 0.0 && best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: threshold_between(lo, next),
                    gain,
                });
            }
        }
    }
    best
}

/// Fit one tree to per-row gradients and hessians, every row weighing 1.
///
/// Leaves are grown best-first: the open leaf with the largest gain
/// `G_L²/(H_L+1) + G_R²/(H_R+1) − G²/(H+1)` is split until `max_leaves` is
/// reached or no split has positive gain. Leaf values are `−G/(H+1)`.
pub fn fit_tree(
    matrix: &FeatureMatrix,
    gradients: &[f64],
    hessians: &[f64],
    params: &TreeParams,
) -> Result<Tree, GbdtError> {
    let weights = vec![1.0; matrix.n_rows()];
    let presorted = Presorted::new(matrix);
    fit_tree_weighted(matrix, &presorted, gradients, hessians, &weights, params)
}

/// As [`fit_tree`], where row `r` stands for `weights[r]` identical training
/// rows whose gradients and hessians have been summed. Split gains and leaf
/// values equal those of fitting the expanded rows.
pub fn fit_tree_weighted(
    matrix: &FeatureMatrix,
    presorted: &Presorted,
    gradients: &[f64],
    hessians: &[f64],
    weights: &[f64],
    params: &TreeParams,
) -> Result<Tree, GbdtError> {
    let n = matrix.n_rows();
    if n == 0 {
        return Err(GbdtError::EmptyInput);
    }
    if gradients.len() != n || hessians.len() != n || weights.len() != n || presorted.n_rows() != n {
        return Err(GbdtError::LengthMismatch(format!(
            "{} rows, {} gradients, {} hessians, {} weights",
            n,
            gradients.len(),
            hessians.len(),
            weights.len()
        )));
    }
    if hessians.iter().any(|&h| h < 0.0) {
        return Err(GbdtError::InvalidParams("hessians must be non-negative".into()));
    }
    let min_data = params.min_data_in_leaf as f64;
    let stats: Vec<RowStats> = (0..n).map(|r| [gradients[r], hessians[r], weights[r]]).collect();

    let mut order = presorted.order.clone();
    let (mut g, mut h, mut c) = (0.0, 0.0, 0.0);
    if let Some(first) = order.first() {
        for &r in first {
            let [gr, hr, wr] = stats[r as usize];
            g += gr;
            h += hr;
            c += wr;
        }
    }
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let mut root = OpenLeaf {
        node: 0,
        start: 0,
        end: n,
        grad: g,
        hess: h,
        count: c,
        best: None,
    };
    if !order.is_empty() {
        root.best = best_split(presorted, &order, &root, &stats, min_data);
    }
    // Kept in creation order so equal gains resolve to the earliest leaf.
    let mut open = vec![root];
    let mut n_leaves = 1;
    let mut go_left = vec![false; n];
    let mut scratch: Vec<u32> = Vec::with_capacity(n);

    while n_leaves < params.max_leaves.max(1) {
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.best.map(|b| (i, b.gain)))
            .fold(None, |acc: Option<(usize, f64)>, (i, gain)| match acc {
                Some((_, best)) if best >= gain => acc,
                _ => Some((i, gain)),
            });
        let Some((pick, _)) = pick else { break };
        let leaf = open.remove(pick);
        let split = leaf.best.expect("picked leaf has a split");

        let col = &presorted.values[split.feature];
        let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0.0);
        let (mut gr, mut hr, mut cr) = (0.0, 0.0, 0.0);
        let mut n_left = 0;
        for &r in &order[split.feature][leaf.start..leaf.end] {
            let left = col[r as usize] <= split.threshold;
            go_left[r as usize] = left;
            let [g, h, w] = stats[r as usize];
            if left {
                gl += g;
                hl += h;
                cl += w;
                n_left += 1;
            } else {
                gr += g;
                hr += h;
                cr += w;
            }
        }
        // Stable partition of every feature's slice: left rows first.
        for idx in order.iter_mut() {
            let slice = &mut idx[leaf.start..leaf.end];
            scratch.clear();
            let mut w = 0;
            for k in 0..slice.len() {
                let r = slice[k];
                if go_left[r as usize] {
                    slice[w] = r;
                    w += 1;
                } else {
                    scratch.push(r);
                }
            }
            slice[w..].copy_from_slice(&scratch);
        }
        let mid = leaf.start + n_left;

        let left_node = nodes.len();
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes[leaf.node] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_node,
            right: left_node + 1,
        };
        for (node, start, end, g, h, c) in [
            (left_node, leaf.start, mid, gl, hl, cl),
            (left_node + 1, mid, leaf.end, gr, hr, cr),
        ] {
            let mut child = OpenLeaf {
                node,
                start,
                end,
                grad: g,
                hess: h,
                count: c,
                best: None,
            };
            child.best = best_split(presorted, &order, &child, &stats, min_data);
            open.push(child);
        }
        n_leaves += 1;
    }

    for leaf in open {
        nodes[leaf.node] = TreeNode::Leaf {
            value: -leaf.grad / (leaf.hess + LEAF_L2),
        };
    }
    Ok(Tree { nodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn constant_gradients_give_single_leaf() {
        let m = column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let tree = fit_tree(&m, &[0.5; 6], &[1.0; 6], &TreeParams::default()).unwrap();
        assert_eq!(tree.n_leaves(), 1);
        assert_eq!(tree.predict(&[0.0]), -3.0 / 7.0);
    }

    #[test]
    fn binary_feature_split_matches_hand_computation() {
        let m = column(&[0.0, 0.0, 1.0, 1.0]);
        let g = [-1.0, -1.0, 1.0, 1.0];
        let tree = fit_tree(&m, &g, &[1.0; 4], &TreeParams::default()).unwrap();
        assert_eq!(tree.n_splits(), 1);
        // G_L = -2, H_L = 2: value 2/3; G_R = 2: value -2/3.
        assert!((tree.predict(&[0.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert!((tree.predict(&[1.0]) + 2.0 / 3.0).abs() < 1e-15);
        match tree.nodes[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(threshold, 0.5),
            _ => panic!("root should split"),
        }
    }

    #[test]
    fn min_data_in_leaf_limits_splits() {
        let m = column(&[0.0, 1.0, 2.0]);
        let tree = fit_tree(&m, &[-1.0, 0.0, 1.0], &[1.0; 3], &TreeParams::default()).unwrap();
        assert!(tree.n_splits() <= 1);
    }

    #[test]
    fn weighted_rows_match_expanded_rows() {
        let x = [0.1, 0.4, 0.4, 0.9, 0.7];
        let g = [-0.3, 0.2, 0.5, -0.8, 0.1];
        let h = [0.2, 0.1, 0.4, 0.3, 0.25];
        let w = [3.0, 1.0, 2.0, 2.0, 1.0];
        let m = column(&x);
        let weighted = fit_tree_weighted(&m, &Presorted::new(&m), &g, &h, &w, &TreeParams::default()).unwrap();

        let mut xs = Vec::new();
        let mut gs = Vec::new();
        let mut hs = Vec::new();
        for i in 0..x.len() {
            let k = w[i] as usize;
            for _ in 0..k {
                xs.push(x[i]);
                gs.push(g[i] / k as f64);
                hs.push(h[i] / k as f64);
            }
        }
        let expanded = fit_tree(&column(&xs), &gs, &hs, &TreeParams::default()).unwrap();
        for &v in &x {
            assert!((weighted.predict(&[v]) - expanded.predict(&[v])).abs() < 1e-12);
        }
    }

    #[test]
    fn leaf_budget_is_respected() {
        let vals: Vec<f64> = (0..64).map(f64::from).collect();
        let g: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let m = column(&vals);
        let params = TreeParams {
            max_leaves: 5,
            min_data_in_leaf: 1,
        };
        let tree = fit_tree(&m, &g, &vec![1.0; 64], &params).unwrap();
        assert!(tree.n_leaves() <= 5);
    }

    #[test]
    fn errors() {
        let empty = FeatureMatrix::new(1);
        assert_eq!(
            fit_tree(&empty, &[], &[], &TreeParams::default()),
            Err(GbdtError::EmptyInput)
        );
        let m = column(&[1.0, 2.0]);
        assert!(fit_tree(&m, &[1.0], &[1.0, 1.0], &TreeParams::default()).is_err());
        assert!(fit_tree(&m, &[1.0, 1.0], &[1.0, -1.0], &TreeParams::default()).is_err());
    }
}
