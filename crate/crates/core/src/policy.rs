//! Autoregressive policies over a prefix tree.
//!
//! A policy is stored as per-edge logits, materialized into conditionals
//! `π(a | s)` at every internal node. The trajectory law factorizes as
//! `π(y_{1:h} | x) = Π π(y_i | x, y_{1:i-1})` by construction.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::features::{FeatureSpec, FeatureTable};
use crate::mdp::{NodeId, Token, Trajectory, TreeShape};

#[derive(Debug, Clone)]
pub enum Parameterization {
    Tabular,
    LinearSoftmax { features: Arc<FeatureTable>, weights: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct AutoregressivePolicy {
    shape: TreeShape,
    param: Parameterization,
    logits: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl AutoregressivePolicy {
    pub fn uniform(shape: &TreeShape) -> Self {
        Self::from_logits(shape, vec![0.0; shape.num_nodes()]).expect("zero logits are valid")
    }

    /// Tabular policy from per-edge logits (indexed by child node id).
    pub fn from_logits(shape: &TreeShape, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != shape.num_nodes() {
            return Err(usage(format!("expected {} logits, got {}", shape.num_nodes(), logits.len())));
        }
        let mut policy = AutoregressivePolicy {
            shape: shape.clone(),
            param: Parameterization::Tabular,
            logits,
            probs: Vec::new(),
            log_probs: Vec::new(),
        };
        policy.materialize()?;
        Ok(policy)
    }

    /// Tabular policy from explicit conditionals; `f(node)` returns `π(· | node)`.
    /// Zero entries are allowed and give zero-probability actions.
    pub fn from_conditionals(shape: &TreeShape, mut f: impl FnMut(NodeId) -> Vec<f64>) -> Result<Self> {
        let mut logits = vec![0.0; shape.num_nodes()];
        for node in 0..shape.num_nodes() {
            if shape.depth(node) == shape.horizon() {
                continue;
            }
            let p = f(node);
            if p.len() != shape.vocab_size() {
                return Err(usage("conditional has wrong length"));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|&x| x < 0.0 || !x.is_finite()) || (total - 1.0).abs() > 1e-9 {
                return Err(usage(format!("conditional at node {node} is not a distribution: {p:?}")));
            }
            for (c, &x) in shape.children(node).zip(&p) {
                logits[c] = x.ln();
            }
        }
        Self::from_logits(shape, logits)
    }

    pub fn linear_softmax(features: Arc<FeatureTable>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != features.dim() {
            return Err(usage(format!("expected {} weights, got {}", features.dim(), weights.len())));
        }
        let shape = features.shape().clone();
        let mut policy = AutoregressivePolicy {
            logits: vec![0.0; shape.num_nodes()],
            shape,
            param: Parameterization::LinearSoftmax { features, weights },
            probs: Vec::new(),
            log_probs: Vec::new(),
        };
        policy.materialize()?;
        Ok(policy)
    }

    fn materialize(&mut self) -> Result<()> {
        if let Parameterization::LinearSoftmax { features, weights } = &self.param {
            for node in 1..self.shape.num_nodes() {
                if self.shape.parent(node).is_some() {
                    self.logits[node] = features.dot(node, weights);
                }
            }
        }
        let n = self.shape.num_nodes();
        self.probs.resize(n, 0.0);
        self.log_probs.resize(n, 0.0);
        for node in 0..n {
            if self.shape.depth(node) == self.shape.horizon() {
                continue;
            }
            let range = self.shape.children(node);
            let logits = &self.logits[range.clone()];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Numerical(format!("no finite logit at node {node}")));
            }
            let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            for c in range {
                let lp = self.logits[c] - lse;
                self.log_probs[c] = lp;
                self.probs[c] = lp.exp();
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn parameterization(&self) -> &Parameterization {
        &self.param
    }

    #[inline]
    pub fn prob(&self, child: NodeId) -> f64 {
        self.probs[child]
    }

    #[inline]
    pub fn log_prob(&self, child: NodeId) -> f64 {
        self.log_probs[child]
    }

    /// `π(· | node)` as a slice over the node's children.
    pub fn probs_at(&self, node: NodeId) -> &[f64] {
        &self.probs[self.shape.children(node)]
    }

    pub fn log_probs_at(&self, node: NodeId) -> &[f64] {
        &self.log_probs[self.shape.children(node)]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// `log π(y_{1:h} | x)` for the prefix ending at `node`.
    pub fn path_log_prob(&self, node: NodeId) -> f64 {
        self.shape.path_edges(node).iter().map(|&e| self.log_probs[e]).sum()
    }

    /// `KL(π(·|s) ‖ other(·|s))`; infinite when `other` has no mass where `π` does.
    pub fn kl_at(&self, node: NodeId, other: &AutoregressivePolicy) -> f64 {
        self.shape
            .children(node)
            .filter(|&c| self.probs[c] > 0.0)
            .map(|c| self.probs[c] * (self.log_probs[c] - other.log_probs[c]))
            .sum()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, node: NodeId, rng: &mut R) -> Token {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let probs = self.probs_at(node);
        for (a, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // rounding left u above the cumulative mass; take the last action with mass
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
    }

    /// Samples a complete response for `prompt`, returning the terminal node.
    pub fn sample_leaf<R: Rng + ?Sized>(&self, prompt: usize, rng: &mut R) -> NodeId {
        let mut node = self.shape.root(prompt);
        while !self.shape.is_terminal(node) {
            let a = self.sample_action(node, rng);
            node = self.shape.child(node, a);
        }
        node
    }

    pub fn sample<R: Rng + ?Sized>(&self, prompt: usize, rng: &mut R) -> Trajectory {
        let leaf = self.sample_leaf(prompt, rng);
        Trajectory::new(prompt, self.shape.tokens_of(leaf))
    }

    pub fn num_params(&self) -> usize {
        match &self.param {
            Parameterization::Tabular => self.logits.len(),
            Parameterization::LinearSoftmax { weights, .. } => weights.len(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match &self.param {
            Parameterization::Tabular => self.logits.clone(),
            Parameterization::LinearSoftmax { weights, .. } => weights.clone(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(usage("parameter vector has wrong length"));
        }
        match &mut self.param {
            Parameterization::Tabular => self.logits.copy_from_slice(params),
            Parameterization::LinearSoftmax { weights, .. } => weights.copy_from_slice(params),
        }
        self.materialize()
    }

    /// Converts per-edge coefficients `g(s, a)` of `Σ g(s,a) ∇log π(a|s)` into the
    /// gradient with respect to the per-edge logits.
    pub fn logit_gradient(&self, edge_coeffs: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.shape.num_nodes()];
        for node in 0..self.shape.num_nodes() {
            if self.shape.depth(node) == self.shape.horizon() {
                continue;
            }
            let range = self.shape.children(node);
            let total: f64 = edge_coeffs[range.clone()].iter().sum();
            if total == 0.0 && edge_coeffs[range.clone()].iter().all(|&g| g == 0.0) {
                continue;
            }
            for c in range {
                grad[c] = edge_coeffs[c] - self.probs[c] * total;
            }
        }
        grad
    }

    /// Chain rule from per-edge logit gradients to the parameter vector.
    pub fn param_gradient(&self, logit_grad: &[f64]) -> Vec<f64> {
        match &self.param {
            Parameterization::Tabular => logit_grad.to_vec(),
            Parameterization::LinearSoftmax { features, weights } => {
                let mut out = vec![0.0; weights.len()];
                for (node, &g) in logit_grad.iter().enumerate() {
                    if g != 0.0 && self.shape.parent(node).is_some() {
                        features.add_scaled(node, g, &mut out);
                    }
                }
                out
            }
        }
    }

    /// Re-centers each state's logits so that the largest is zero; conditionals are unchanged.
    pub fn normalized_logits(&self) -> Vec<f64> {
        let mut out = self.log_probs.clone();
        for node in 0..self.shape.num_nodes() {
            if self.shape.parent(node).is_none() {
                out[node] = 0.0;
            }
        }
        out
    }

    pub fn to_file(&self) -> PolicyFile {
        let parameterization = match &self.param {
            Parameterization::Tabular => ParamFile::Tabular { logits: self.logits.clone() },
            Parameterization::LinearSoftmax { features, weights } => ParamFile::LinearSoftmax {
                features: features.spec().clone(),
                weights: weights.clone(),
            },
        };
        PolicyFile { shape: self.shape.spec(), parameterization }
    }

    pub fn from_file(file: &PolicyFile) -> Result<Self> {
        let shape = TreeShape::try_from(file.shape.clone())?;
        match &file.parameterization {
            ParamFile::Tabular { logits } => Self::from_logits(&shape, logits.clone()),
            ParamFile::LinearSoftmax { features, weights } => {
                let table = FeatureTable::build(features, &shape)?;
                Self::linear_softmax(Arc::new(table), weights.clone())
            }
        }
    }
}

/// Structured-text form of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    #[serde(flatten)]
    pub shape: crate::mdp::ShapeSpec,
    pub parameterization: ParamFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamFile {
    Tabular { logits: Vec<f64> },
    LinearSoftmax { features: FeatureSpec, weights: Vec<f64> },
}
