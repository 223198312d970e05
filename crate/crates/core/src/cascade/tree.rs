//! Depth-limited decision trees fitted greedily on binned features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binned::{BinnedFeatures, N_BINS};
use crate::error::{McfError, Result};
use crate::features::FeatureSpec;
use crate::layers::ChannelSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    /// Samples with `value <= threshold` go left.
    Split {
        feature: FeatureSpec,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub depth: usize,
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, channels: &impl ChannelSource) -> Result<f64> {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return Ok(*value),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let layer = channels.layer(feature.layer)?;
                    let v = feature.evaluate_on(&layer);
                    idx = if v <= *threshold { *left } else { *right } as usize;
                }
            }
        }
    }

    pub fn scale_leaves(&mut self, alpha: f64) {
        for node in &mut self.nodes {
            if let Node::Leaf { value } = node {
                *value *= alpha;
            }
        }
    }

    pub fn features(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(feature),
            Node::Leaf { .. } => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len() as u32;
        for node in &self.nodes {
            match node {
                Node::Split {
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    if !threshold.is_finite() || *left >= n || *right >= n {
                        return Err(McfError::Data("malformed tree split".into()));
                    }
                }
                Node::Leaf { value } => {
                    if !value.is_finite() {
                        return Err(McfError::Data("non-finite leaf value".into()));
                    }
                }
            }
        }
        if self.nodes.is_empty() {
            return Err(McfError::Data("empty tree".into()));
        }
        Ok(())
    }
}

/// A fitted tree with ±1 leaves, its weighted training error and the leaf
/// sign each training sample lands in.
#[derive(Clone, Debug)]
pub struct TreeFit {
    pub tree: DecisionTree,
    pub error: f64,
    pub outputs: Vec<i8>,
}

#[derive(Clone, Copy, Debug)]
struct SplitChoice {
    feature: usize,
    bin: usize,
    error: f64,
}

/// Greedy top-down fit minimizing weighted classification error at every
/// node. Nodes holding a single class, or with no threshold that separates
/// their samples, become leaves early. Ties go to the lowest pool index, then
/// the lowest threshold.
pub fn train_tree(
    data: &BinnedFeatures,
    labels: &[i8],
    weights: &[f64],
    depth: usize,
) -> Result<TreeFit> {
    let n = data.n_samples();
    if labels.len() != n || weights.len() != n {
        return Err(McfError::InvalidInput(format!(
            "{} labels and {} weights for {n} samples",
            labels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(McfError::InvalidInput("weights must be finite and non-negative".into()));
    }
    if !labels.iter().any(|&y| y > 0) || !labels.iter().any(|&y| y < 0) {
        return Err(McfError::InvalidInput("need at least one sample of each class".into()));
    }
    if depth == 0 {
        return Err(McfError::Config("tree depth must be at least 1".into()));
    }
    let signed: Vec<f64> = labels
        .iter()
        .zip(weights)
        .map(|(&y, &w)| if y > 0 { w } else { -w })
        .collect();

    let mut nodes = Vec::new();
    let mut outputs = vec![0i8; n];
    let mut error = 0.0;
    // (node index, samples, level)
    let mut frontier: Vec<(usize, Vec<u32>, usize)> = vec![(0, (0..n as u32).collect(), 0)];
    nodes.push(Node::Leaf { value: 0.0 });
    while let Some((node_idx, samples, level)) = frontier.pop() {
        let (wp, wn) = class_weights(&signed, &samples);
        let pure = samples.iter().all(|&s| labels[s as usize] > 0)
            || samples.iter().all(|&s| labels[s as usize] < 0);
        let split = if level < depth && !pure {
            best_split(data, &signed, &samples)
        } else {
            None
        };
        match split {
            None => {
                let sign: i8 = if wp >= wn { 1 } else { -1 };
                nodes[node_idx] = Node::Leaf { value: sign as f64 };
                error += wp.min(wn);
                for &s in &samples {
                    outputs[s as usize] = sign;
                }
            }
            Some(choice) => {
                let column = data.column(choice.feature);
                let (left, right): (Vec<u32>, Vec<u32>) = samples
                    .iter()
                    .partition(|&&s| column[s as usize] as usize <= choice.bin);
                let (li, ri) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[node_idx] = Node::Split {
                    feature: *data.pool().get(choice.feature),
                    threshold: data.thresholds(choice.feature)[choice.bin],
                    left: li as u32,
                    right: ri as u32,
                };
                // Pushed right first so the left subtree is expanded first.
                frontier.push((ri, right, level + 1));
                frontier.push((li, left, level + 1));
            }
        }
    }
    Ok(TreeFit {
        tree: DecisionTree { depth, nodes },
        error,
        outputs,
    })
}

fn class_weights(signed: &[f64], samples: &[u32]) -> (f64, f64) {
    let (mut wp, mut wn) = (0.0, 0.0);
    for &s in samples {
        let w = signed[s as usize];
        if w >= 0.0 {
            wp += w;
        } else {
            wn -= w;
        }
    }
    (wp, wn)
}

fn best_split(data: &BinnedFeatures, signed: &[f64], samples: &[u32]) -> Option<SplitChoice> {
    let total_count = samples.len() as u32;
    let (tp, tn) = class_weights(signed, samples);
    let candidates: Vec<Option<SplitChoice>> = (0..data.n_features())
        .into_par_iter()
        .map(|f| {
            let n_thresholds = data.thresholds(f).len();
            if n_thresholds == 0 {
                return None;
            }
            let column = data.column(f);
            let mut hp = [0.0f64; N_BINS];
            let mut hn = [0.0f64; N_BINS];
            let mut count = [0u32; N_BINS];
            for &s in samples {
                let b = column[s as usize] as usize;
                let w = signed[s as usize];
                if w >= 0.0 {
                    hp[b] += w;
                } else {
                    hn[b] -= w;
                }
                count[b] += 1;
            }
            let (mut lp, mut ln, mut lc) = (0.0f64, 0.0f64, 0u32);
            let mut best: Option<SplitChoice> = None;
            for b in 0..n_thresholds {
                lp += hp[b];
                ln += hn[b];
                lc += count[b];
                if lc == 0 || lc == total_count {
                    continue;
                }
                let err = lp.min(ln) + (tp - lp).max(0.0).min((tn - ln).max(0.0));
                if best.map_or(true, |c| err < c.error) {
                    best = Some(SplitChoice {
                        feature: f,
                        bin: b,
                        error: err,
                    });
                }
            }
            best
        })
        .collect();
    candidates
        .into_iter()
        .flatten()
        .fold(None, |best: Option<SplitChoice>, c| match best {
            Some(b) if b.error <= c.error => Some(b),
            _ => Some(c),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::ChannelStack;
    use crate::features::{FeaturePool, FeatureSpec};
    use crate::layers::{LayerData, MultiLayerChannels};

    fn two_feature_pool() -> FeaturePool {
        FeaturePool::new(1, vec![FeatureSpec::zero(1, 0, 0, 0), FeatureSpec::zero(1, 1, 0, 0)]).unwrap()
    }

    fn sample(a: f32, b: f32) -> MultiLayerChannels {
        MultiLayerChannels::new(0, LayerData::whole(ChannelStack::new(1, 2, 1, 1, vec![a, b]).unwrap()), 1)
    }

    #[test]
    fn separable_pair_gives_zero_error_stump() {
        let values = vec![vec![0.0, 1.0], vec![5.0, 5.0]];
        let data = BinnedFeatures::from_values(two_feature_pool(), &values).unwrap();
        let fit = train_tree(&data, &[-1, 1], &[0.5, 0.5], 2).unwrap();
        assert_eq!(fit.error, 0.0);
        assert_eq!(fit.outputs, vec![-1, 1]);
        // Pure children stop early: one split and two leaves.
        assert_eq!(fit.tree.nodes.len(), 3);
        assert_eq!(fit.tree.predict(&sample(0.0, 5.0)).unwrap(), -1.0);
        assert_eq!(fit.tree.predict(&sample(1.0, 5.0)).unwrap(), 1.0);
    }

    /// Exhaustive check that some depth-2 tree over the two features' cut
    /// points classifies XOR perfectly.
    fn xor_zero_error_tree_exists(points: &[(f32, f32, i8)]) -> bool {
        let cuts = [0.5f32];
        for root_f in 0..2 {
            for &rc in &cuts {
                for lf in 0..2 {
                    for &lc in &cuts {
                        for rf in 0..2 {
                            for &rcut in &cuts {
                                for leaves in 0..16u8 {
                                    let ok = points.iter().all(|&(a, b, y)| {
                                        let v = [a, b];
                                        let leaf = if v[root_f] <= rc {
                                            if v[lf] <= lc { 0 } else { 1 }
                                        } else if v[rf] <= rcut {
                                            2
                                        } else {
                                            3
                                        };
                                        let sign = if leaves >> leaf & 1 == 1 { 1 } else { -1 };
                                        sign == y
                                    });
                                    if ok {
                                        return true;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        false
    }

    #[test]
    fn xor_is_solved_at_depth_two() {
        let points = [(0.0, 0.0, -1), (1.0, 1.0, -1), (0.0, 1.0, 1), (1.0, 0.0, 1)];
        assert!(xor_zero_error_tree_exists(&points));
        let values = vec![
            points.iter().map(|p| p.0).collect(),
            points.iter().map(|p| p.1).collect(),
        ];
        let labels: Vec<i8> = points.iter().map(|p| p.2).collect();
        let data = BinnedFeatures::from_values(two_feature_pool(), &values).unwrap();
        let fit = train_tree(&data, &labels, &[0.25; 4], 2).unwrap();
        assert_eq!(fit.error, 0.0);
        assert_eq!(fit.outputs, labels);
        for p in &points {
            assert_eq!(fit.tree.predict(&sample(p.0, p.1)).unwrap(), p.2 as f64);
        }
        // Depth one cannot do better than chance on XOR.
        let stump = train_tree(&data, &labels, &[0.25; 4], 1).unwrap();
        assert_eq!(stump.error, 0.5);
    }

    #[test]
    fn identical_values_give_majority_leaf() {
        let values = vec![vec![3.0; 3], vec![1.0; 3]];
        let data = BinnedFeatures::from_values(two_feature_pool(), &values).unwrap();
        let fit = train_tree(&data, &[1, -1, -1], &[0.2, 0.3, 0.5], 2).unwrap();
        assert_eq!(fit.tree.nodes, vec![Node::Leaf { value: -1.0 }]);
        assert!((fit.error - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_lowest_feature_then_threshold() {
        // Both features separate the classes identically.
        let values = vec![vec![0.0, 1.0], vec![0.0, 1.0]];
        let data = BinnedFeatures::from_values(two_feature_pool(), &values).unwrap();
        let fit = train_tree(&data, &[-1, 1], &[0.5, 0.5], 1).unwrap();
        match &fit.tree.nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature.channel, 0);
                assert_eq!(*threshold, data.thresholds(0)[0]);
            }
            other => panic!("expected split, got {other:?}"),
        }
    }

    #[test]
    fn single_class_is_refused() {
        let data = BinnedFeatures::from_values(two_feature_pool(), &[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(train_tree(&data, &[1, 1], &[0.5, 0.5], 2).is_err());
    }
}
