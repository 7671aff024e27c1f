//! Feature maps `φ(s, a)` over the edges of a prefix tree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::mdp::{NodeId, TreeShape};

/// Serializable description of a feature map; the table is rebuilt from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    /// Indicator of the edge, `d = #edges`.
    OneHot,
    /// Fixed i.i.d. Gaussian directions rescaled to `‖φ‖₂ = norm`.
    Gaussian { dim: usize, norm: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct FeatureTable {
    spec: FeatureSpec,
    shape: TreeShape,
    dim: usize,
    dense: Option<Vec<f64>>,
}

impl FeatureTable {
    pub fn build(spec: &FeatureSpec, shape: &TreeShape) -> Result<Self> {
        match *spec {
            FeatureSpec::OneHot => Ok(FeatureTable {
                spec: spec.clone(),
                shape: shape.clone(),
                dim: shape.num_edges(),
                dense: None,
            }),
            FeatureSpec::Gaussian { dim, norm, seed } => {
                if dim == 0 || !(norm > 0.0) {
                    return Err(usage("gaussian features need dim >= 1 and norm > 0"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut data = vec![0.0; shape.num_nodes() * dim];
                for node in 0..shape.num_nodes() {
                    if shape.parent(node).is_none() {
                        continue;
                    }
                    let row = &mut data[node * dim..(node + 1) * dim];
                    let mut sq: f64 = 0.0;
                    for x in row.iter_mut() {
                        *x = StandardNormal.sample(&mut rng);
                        sq += *x * *x;
                    }
                    let scale = norm / sq.sqrt().max(f64::MIN_POSITIVE);
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                Ok(FeatureTable { spec: spec.clone(), shape: shape.clone(), dim, dense: Some(data) })
            }
        }
    }

    pub fn spec(&self) -> &FeatureSpec {
        &self.spec
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `φ(edge)ᵀ v`.
    pub fn dot(&self, edge: NodeId, v: &[f64]) -> f64 {
        match &self.dense {
            None => v[self.shape.edge_ordinal(edge)],
            Some(data) => data[edge * self.dim..(edge + 1) * self.dim]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum(),
        }
    }

    /// `out += scale · φ(edge)`.
    pub fn add_scaled(&self, edge: NodeId, scale: f64, out: &mut [f64]) {
        match &self.dense {
            None => out[self.shape.edge_ordinal(edge)] += scale,
            Some(data) => {
                for (o, x) in out.iter_mut().zip(&data[edge * self.dim..(edge + 1) * self.dim]) {
                    *o += scale * x;
                }
            }
        }
    }

    pub fn vector(&self, edge: NodeId) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_scaled(edge, 1.0, &mut out);
        out
    }

    /// `Σ_h φ(s_h, a_h)` along the path to `node`.
    pub fn path_sum(&self, node: NodeId) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for e in self.shape.path_edges(node) {
            self.add_scaled(e, 1.0, &mut out);
        }
        out
    }

    /// Largest feature norm over reachable edges.
    pub fn max_norm(&self) -> f64 {
        let mut best: f64 = 0.0;
        for node in self.shape.decision_nodes() {
            for c in self.shape.children(node) {
                let v = self.vector(c);
                best = best.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_rows_have_requested_norm() {
        let shape = TreeShape::new(2, 3, 1, None).unwrap();
        let table = FeatureTable::build(&FeatureSpec::Gaussian { dim: 4, norm: 0.7, seed: 3 }, &shape).unwrap();
        for node in 1..shape.num_nodes() {
            let v = table.vector(node);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_indexes_edges_densely() {
        let shape = TreeShape::new(2, 2, 2, None).unwrap();
        let table = FeatureTable::build(&FeatureSpec::OneHot, &shape).unwrap();
        assert_eq!(table.dim(), 12);
        let mut seen = vec![false; 12];
        for node in 0..shape.num_nodes() {
            if shape.parent(node).is_some() {
                let v = table.vector(node);
                let i = v.iter().position(|&x| x == 1.0).unwrap();
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
