//! Per-step reward assembly for sparse, dense, and redistributed signals.
//!
//! Every sequence has length `H`. Steps past an EoS token are absorbing and
//! carry zero; "the last step" is the step that emitted EoS, or step `H`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::mdp::{NodeId, RewardTable, Token, TreeShape};
use crate::policy::AutoregressivePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtoCoefficients {
    /// Scale of the DPO implicit reward.
    pub beta1: f64,
    /// KL coefficient against `π_ref`.
    pub beta2: f64,
    /// Scale of the sentence-level reward.
    pub beta3: f64,
}

impl Default for RtoCoefficients {
    fn default() -> Self {
        RtoCoefficients { beta1: 0.05, beta2: 0.01, beta3: 1.0 }
    }
}

/// Everything needed to assemble the dense token-wise reward.
#[derive(Debug, Clone, Copy)]
pub struct RtoRewardSpec<'a> {
    pub coeffs: RtoCoefficients,
    pub dpo: Option<&'a AutoregressivePolicy>,
    pub reference: &'a AutoregressivePolicy,
    /// Token table whose path sum is the sentence reward `r_MLE(x, y)`.
    pub sentence: Option<&'a RewardTable>,
}

impl RtoRewardSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        let c = self.coeffs;
        if !(c.beta1 >= 0.0 && c.beta2 >= 0.0 && c.beta3 >= 0.0) {
            return Err(usage("β₁, β₂, β₃ must be non-negative"));
        }
        if c.beta3 > 0.0 && self.sentence.is_none() {
            return Err(usage("β₃ > 0 needs a sentence-level reward"));
        }
        if c.beta1 > 0.0 && self.dpo.is_none() {
            return Err(usage("β₁ > 0 needs a DPO policy"));
        }
        Ok(())
    }
}

fn log_ratio(pi: &AutoregressivePolicy, reference: &AutoregressivePolicy, e: NodeId) -> Result<f64> {
    let (p, q) = (pi.log_prob(e), reference.log_prob(e));
    if !p.is_finite() || !q.is_finite() {
        return Err(usage(format!("zero-probability token on edge {e}")));
    }
    Ok(p - q)
}

fn check_edges(shape: &TreeShape, edges: &[NodeId]) -> Result<()> {
    if edges.is_empty() || edges.len() > shape.horizon() {
        return Err(usage("trajectory must have between 1 and H steps"));
    }
    Ok(())
}

/// Sparse PPO reward: `−β log(π/π_ref)` at every step plus `r_MLE` at the last one.
pub fn sparse_reward(
    r_sentence: f64,
    pi: &AutoregressivePolicy,
    reference: &AutoregressivePolicy,
    beta: f64,
    edges: &[NodeId],
) -> Result<Vec<f64>> {
    let shape = pi.shape();
    check_edges(shape, edges)?;
    let mut out = vec![0.0; shape.horizon()];
    for (h, &e) in edges.iter().enumerate() {
        if beta != 0.0 {
            out[h] = -beta * log_ratio(pi, reference, e)?;
        }
    }
    out[edges.len() - 1] += r_sentence;
    Ok(out)
}

/// The three additive parts of the dense reward, each of length `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardComponents {
    pub dpo: Vec<f64>,
    pub kl: Vec<f64>,
    pub sentence: Vec<f64>,
}

impl RewardComponents {
    pub fn total(&self) -> Vec<f64> {
        (0..self.dpo.len()).map(|h| self.dpo[h] + self.kl[h] + self.sentence[h]).collect()
    }
}

pub fn rto_components(spec: &RtoRewardSpec, pi: &AutoregressivePolicy, edges: &[NodeId]) -> Result<RewardComponents> {
    spec.validate()?;
    let shape = pi.shape();
    check_edges(shape, edges)?;
    let hz = shape.horizon();
    let c = spec.coeffs;
    let mut parts = RewardComponents { dpo: vec![0.0; hz], kl: vec![0.0; hz], sentence: vec![0.0; hz] };
    for (h, &e) in edges.iter().enumerate() {
        if let (true, Some(dpo)) = (c.beta1 != 0.0, spec.dpo) {
            parts.dpo[h] = c.beta1 * log_ratio(dpo, spec.reference, e)?;
        }
        if c.beta2 != 0.0 {
            parts.kl[h] = -c.beta2 * log_ratio(pi, spec.reference, e)?;
        }
    }
    if let (true, Some(table)) = (c.beta3 != 0.0, spec.sentence) {
        let last = *edges.last().expect("nonempty");
        parts.sentence[edges.len() - 1] = c.beta3 * table.path_sum(shape, last);
    }
    Ok(parts)
}

/// Dense reward `β₁ log(π_dpo/π_ref) − β₂ log(π/π_ref)` per step plus `β₃ r_MLE` at the end.
pub fn rto_reward(spec: &RtoRewardSpec, pi: &AutoregressivePolicy, edges: &[NodeId]) -> Result<Vec<f64>> {
    Ok(rto_components(spec, pi, edges)?.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Every token keeps its own reward.
    Rto,
    /// Rewards are pooled onto the next delimiter token (or the last step).
    SemiRto,
    /// Everything is delayed to the last step.
    Ddpo,
    /// Dense rewards with the DPO total removed at the last step.
    RsPpo,
}

impl FromStr for RewardVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rto" => Ok(RewardVariant::Rto),
            "semi_rto" => Ok(RewardVariant::SemiRto),
            "ddpo" => Ok(RewardVariant::Ddpo),
            "rs_ppo" => Ok(RewardVariant::RsPpo),
            other => Err(usage(format!("unknown reward variant `{other}`"))),
        }
    }
}

/// Moves rewards between the first `tokens.len()` steps of `rewards`.
/// `dpo_sum` is the trajectory's total DPO reward, required by `rs_ppo`.
pub fn redistribute(
    variant: RewardVariant,
    rewards: &[f64],
    tokens: &[Token],
    delimiters: &[Token],
    dpo_sum: Option<f64>,
) -> Result<Vec<f64>> {
    let len = tokens.len();
    if len == 0 || len > rewards.len() {
        return Err(usage("token sequence does not fit the reward sequence"));
    }
    let mut out = vec![0.0; rewards.len()];
    match variant {
        RewardVariant::Rto => out[..len].copy_from_slice(&rewards[..len]),
        RewardVariant::Ddpo => out[len - 1] = rewards[..len].iter().sum(),
        RewardVariant::SemiRto => {
            if delimiters.is_empty() {
                return Err(usage("semi_rto needs at least one delimiter token"));
            }
            let mut acc = 0.0;
            for h in 0..len {
                acc += rewards[h];
                if delimiters.contains(&tokens[h]) || h == len - 1 {
                    out[h] = acc;
                    acc = 0.0;
                }
            }
        }
        RewardVariant::RsPpo => {
            let d = dpo_sum.ok_or_else(|| usage("rs_ppo needs the trajectory's DPO reward total"))?;
            out[..len].copy_from_slice(&rewards[..len]);
            out[len - 1] -= d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn policy(shape: &TreeShape, seed: u64) -> AutoregressivePolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..shape.num_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        AutoregressivePolicy::from_logits(shape, logits).unwrap()
    }

    #[test]
    fn sparse_reward_examples() {
        let shape = TreeShape::new(2, 3, 1, None).unwrap();
        let reference = policy(&shape, 1);
        let leaf = shape.node_of(0, &[1, 0, 1]).unwrap();
        let edges = shape.path_edges(leaf);
        assert_eq!(sparse_reward(2.0, &reference, &reference, 0.7, &edges).unwrap(), vec![0.0, 0.0, 2.0]);
        let pi = policy(&shape, 2);
        let r = sparse_reward(2.0, &pi, &reference, 0.0, &edges).unwrap();
        assert_eq!(&r[..2], &[0.0, 0.0]);
        let r = sparse_reward(2.0, &pi, &reference, 0.3, &edges).unwrap();
        let expect = 2.0 - 0.3 * (pi.path_log_prob(leaf) - reference.path_log_prob(leaf));
        assert!((r.iter().sum::<f64>() - expect).abs() < 1e-12);
    }

    #[test]
    fn rto_reduces_to_sparse() {
        let shape = TreeShape::new(3, 3, 1, Some(0)).unwrap();
        let (pi, reference, dpo) = (policy(&shape, 3), policy(&shape, 4), policy(&shape, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = RewardTable::from_edge_fn(&shape, |_| rng.random_range(-1.0..1.0));
        for leaf in shape.leaves(0) {
            let edges = shape.path_edges(leaf);
            let spec = RtoRewardSpec {
                coeffs: RtoCoefficients { beta1: 0.0, beta2: 0.4, beta3: 1.0 },
                dpo: Some(&dpo),
                reference: &reference,
                sentence: Some(&table),
            };
            let a = rto_reward(&spec, &pi, &edges).unwrap();
            let b = sparse_reward(table.path_sum(&shape, leaf), &pi, &reference, 0.4, &edges).unwrap();
            assert_eq!(a, b);
            let full = RtoRewardSpec { coeffs: RtoCoefficients::default(), ..spec };
            let total: f64 = rto_reward(&full, &pi, &edges).unwrap().iter().sum();
            let expect = 0.05 * (dpo.path_log_prob(leaf) - reference.path_log_prob(leaf))
                - 0.01 * (pi.path_log_prob(leaf) - reference.path_log_prob(leaf))
                + table.path_sum(&shape, leaf);
            assert!((total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn all_reference_leaves_only_sentence_reward() {
        let shape = TreeShape::new(2, 2, 1, None).unwrap();
        let reference = policy(&shape, 7);
        let table = RewardTable::from_edge_fn(&shape, |e| e as f64);
        let spec = RtoRewardSpec {
            coeffs: RtoCoefficients::default(),
            dpo: Some(&reference),
            reference: &reference,
            sentence: Some(&table),
        };
        let leaf = shape.node_of(0, &[1, 1]).unwrap();
        let r = rto_reward(&spec, &reference, &shape.path_edges(leaf)).unwrap();
        assert_eq!(r, vec![0.0, table.path_sum(&shape, leaf)]);
    }

    #[test]
    fn redistribution_examples() {
        let r = [1.0, 2.0, 3.0];
        let tokens = [0, 5, 0];
        assert_eq!(redistribute(RewardVariant::Ddpo, &r, &tokens, &[], None).unwrap(), vec![0.0, 0.0, 6.0]);
        assert_eq!(redistribute(RewardVariant::SemiRto, &r, &tokens, &[5], None).unwrap(), vec![0.0, 3.0, 3.0]);
        assert_eq!(redistribute(RewardVariant::Rto, &r, &tokens, &[], None).unwrap(), r.to_vec());
        assert_eq!(redistribute(RewardVariant::RsPpo, &r, &tokens, &[], Some(1.5)).unwrap(), vec![1.0, 2.0, 1.5]);
        assert!(redistribute(RewardVariant::RsPpo, &r, &tokens, &[], None).is_err());
        assert!("dense".parse::<RewardVariant>().is_err());
        // EoS after two steps: padding stays zero
        let short = redistribute(RewardVariant::Ddpo, &r, &tokens[..2], &[], None).unwrap();
        assert_eq!(short, vec![0.0, 3.0, 0.0]);
    }
}
