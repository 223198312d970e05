use serde::{Deserialize, Serialize};

use crate::error::{McfError, Result};

/// Weak-classifier budget per stage: half of the total goes to the first
/// stage and the rest is split evenly across the remaining stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub n_all: usize,
    pub n_stages: usize,
    pub k: Vec<usize>,
}

impl StagePlan {
    /// Trees actually allocated; flooring can leave up to `n_stages - 2` unused.
    pub fn total(&self) -> usize {
        self.k.iter().sum()
    }

    /// Single-stage plan used for first-layer-only models.
    pub fn single(n_trees: usize) -> Self {
        StagePlan {
            n_all: n_trees,
            n_stages: 1,
            k: vec![n_trees],
        }
    }
}

/// `k_1 = floor(n_all / 2)`, `k_i = floor(n_all / (2 (n_stages - 1)))` for `i >= 2`.
pub fn plan_stages(n_all: usize, n_stages: usize) -> Result<StagePlan> {
    if n_stages < 2 {
        return Err(McfError::Config(format!(
            "a multi-stage cascade needs at least 2 stages, got {n_stages}"
        )));
    }
    if n_all < 2 * (n_stages - 1) {
        return Err(McfError::Config(format!(
            "{n_all} trees cannot give every one of {n_stages} stages at least one tree"
        )));
    }
    let first = n_all / 2;
    let rest = n_all / (2 * (n_stages - 1));
    let mut k = vec![rest; n_stages];
    k[0] = first;
    Ok(StagePlan {
        n_all,
        n_stages,
        k,
    })
}
