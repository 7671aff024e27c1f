use serde::{Deserialize, Serialize};

use super::shape::{NodeId, Token, TreeShape};
use crate::error::{usage, Result};

/// Token-wise reward `r(s, a)` stored per edge (indexed by child node id).
///
/// Root entries and edges below an EoS-terminated prefix are zero: absorbing
/// states yield no reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    values: Vec<f64>,
}

impl RewardTable {
    pub fn zeros(shape: &TreeShape) -> Self {
        RewardTable { values: vec![0.0; shape.num_nodes()] }
    }

    /// Tabulates `f(prompt, prefix, action)` over every reachable edge.
    pub fn from_fn(shape: &TreeShape, mut f: impl FnMut(usize, &[Token], Token) -> f64) -> Self {
        let mut values = vec![0.0; shape.num_nodes()];
        for node in shape.decision_nodes() {
            let prefix = shape.tokens_of(node);
            let prompt = shape.prompt_of(node);
            for (a, child) in shape.children(node).enumerate() {
                values[child] = f(prompt, &prefix, a);
            }
        }
        RewardTable { values }
    }

    /// Tabulates a function of the edge id over every reachable edge.
    pub fn from_edge_fn(shape: &TreeShape, mut f: impl FnMut(NodeId) -> f64) -> Self {
        let mut values = vec![0.0; shape.num_nodes()];
        for node in shape.decision_nodes() {
            for child in shape.children(node) {
                values[child] = f(child);
            }
        }
        RewardTable { values }
    }

    pub fn from_values(shape: &TreeShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.num_nodes() {
            return Err(usage(format!(
                "reward table has {} entries, tree has {} nodes",
                values.len(),
                shape.num_nodes()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(usage("reward table contains non-finite values"));
        }
        let mut table = RewardTable { values };
        for node in 0..shape.num_nodes() {
            let parent_acts = shape.parent(node).is_some_and(|p| shape.is_decision_node(p));
            if !parent_acts {
                table.values[node] = 0.0;
            }
        }
        Ok(table)
    }

    #[inline]
    pub fn edge(&self, child: NodeId) -> f64 {
        self.values[child]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum of token rewards along the path to `node`.
    pub fn path_sum(&self, shape: &TreeShape, node: NodeId) -> f64 {
        shape.path_edges(node).iter().map(|&e| self.values[e]).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RewardTable { values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Largest minus smallest reward over the given shape's reachable edges.
    pub fn range(&self, shape: &TreeShape) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for node in shape.decision_nodes() {
            for c in shape.children(node) {
                lo = lo.min(self.values[c]);
                hi = hi.max(self.values[c]);
            }
        }
        if lo.is_finite() { hi - lo } else { 0.0 }
    }
}
