//! Exact KL-regularized planning and policy evaluation on prefix trees.
//!
//! With `r_β(s, a) = r(s, a) + β log π_ref(a|s)` the soft Bellman recursion is
//! `Q(s, a) = r_β(s, a) + V(s ⊕ a)` and `V(s) = β log Σ_a exp(Q(s, a) / β)`,
//! solved bottom-up. Children always have larger ids than their parent, so a
//! reverse sweep over decision nodes is a valid backward induction.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{numerical, usage, Result};
use crate::mdp::{check_shape, NodeId, RewardTable, TokenMdp};
use crate::policy::AutoregressivePolicy;

/// `log Σ exp(x_i)` with max subtraction. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-edge `Q` (indexed by child id) and per-node `V`; entries outside the
/// reachable tree are zero.
#[derive(Debug, Clone)]
pub struct SoftValueTables {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub beta: f64,
}

impl SoftValueTables {
    /// `V(ρ) = Σ_x ρ(x) V(x)`.
    pub fn initial_value(&self, mdp: &TokenMdp) -> f64 {
        let shape = mdp.shape();
        (0..shape.num_prompts()).map(|p| mdp.initial_dist()[p] * self.v[shape.root(p)]).sum()
    }

    /// CSV with one row per reachable edge: `node,prompt,prefix,action,q,v`, where `v`
    /// is the value of the state the action is taken in.
    pub fn to_csv(&self, mdp: &TokenMdp) -> String {
        let shape = mdp.shape();
        let mut out = String::from("node,prompt,prefix,action,q,v\n");
        for s in shape.decision_nodes() {
            let prefix: Vec<String> = shape.tokens_of(s).iter().map(|t| t.to_string()).collect();
            for (a, c) in shape.children(s).enumerate() {
                let _ = writeln!(
                    out,
                    "{s},{},{},{a},{},{}",
                    shape.prompt_of(s),
                    prefix.join(" "),
                    self.q[c],
                    self.v[s]
                );
            }
        }
        out
    }
}

fn check_reference(mdp: &TokenMdp, reference: &AutoregressivePolicy) -> Result<()> {
    check_shape(mdp.shape(), reference.shape())?;
    for s in mdp.shape().decision_nodes() {
        if reference.probs_at(s).iter().any(|&p| p <= 0.0) {
            return Err(usage(format!("reference policy has zero mass at node {s}; log π_ref is undefined")));
        }
    }
    Ok(())
}

/// Optimal soft values `Q*_β`, `V*_β` and the policy `π*_β = exp((Q* − V*) / β)`.
pub fn soft_backward_induction(
    mdp: &TokenMdp,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<(SoftValueTables, AutoregressivePolicy)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(usage(format!("soft planning needs a finite β > 0, got {beta}")));
    }
    check_reference(mdp, reference)?;
    let shape = mdp.shape();
    let n = shape.num_nodes();
    let mut q = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut logits = vec![0.0; n];
    let mut scaled = Vec::with_capacity(shape.vocab_size());
    for s in shape.decision_nodes().rev() {
        scaled.clear();
        for c in shape.children(s) {
            q[c] = reward.edge(c) + beta * reference.log_prob(c) + v[c];
            scaled.push(q[c] / beta);
        }
        let lse = log_sum_exp(&scaled);
        if !lse.is_finite() {
            return Err(numerical(format!("soft value at node {s} is not finite")));
        }
        v[s] = beta * lse;
        for (c, &x) in shape.children(s).zip(&scaled) {
            logits[c] = x - lse;
        }
    }
    let policy = AutoregressivePolicy::from_logits(shape, logits)?;
    Ok((SoftValueTables { q, v, beta }, policy))
}

/// Regularized value tables `Q^π_β`, `V^π_β` of an arbitrary policy. `β = 0`
/// gives the unregularized values.
pub fn policy_values(
    mdp: &TokenMdp,
    policy: &AutoregressivePolicy,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<SoftValueTables> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(usage(format!("β must be finite and non-negative, got {beta}")));
    }
    let shape = mdp.shape();
    check_shape(shape, policy.shape())?;
    check_shape(shape, reference.shape())?;
    let n = shape.num_nodes();
    let mut q = vec![0.0; n];
    let mut v = vec![0.0; n];
    for s in shape.decision_nodes().rev() {
        let mut value = 0.0;
        for c in shape.children(s) {
            let p = policy.prob(c);
            let log_ref = if beta > 0.0 { beta * reference.log_prob(c) } else { 0.0 };
            q[c] = reward.edge(c) + log_ref + v[c];
            if p > 0.0 {
                if beta > 0.0 && reference.prob(c) <= 0.0 {
                    return Err(usage(format!("policy puts mass on edge {c} where the reference has none")));
                }
                let ent = if beta > 0.0 { beta * policy.log_prob(c) } else { 0.0 };
                value += p * (q[c] - ent);
            }
        }
        v[s] = value;
    }
    Ok(SoftValueTables { q, v, beta })
}

/// `V^π_β(ρ)`, exactly.
pub fn evaluate_policy(
    mdp: &TokenMdp,
    policy: &AutoregressivePolicy,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<f64> {
    Ok(policy_values(mdp, policy, reward, reference, beta)?.initial_value(mdp))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `V^π_β(ρ)` from `samples` rollouts.
pub fn evaluate_policy_mc<R: Rng + ?Sized>(
    mdp: &TokenMdp,
    policy: &AutoregressivePolicy,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
    beta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    if samples < 2 {
        return Err(usage("Monte-Carlo evaluation needs at least two samples"));
    }
    let shape = mdp.shape();
    check_shape(shape, policy.shape())?;
    check_shape(shape, reference.shape())?;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let prompt = mdp.sample_prompt(rng);
        let leaf = policy.sample_leaf(prompt, rng);
        let mut ret = 0.0;
        for e in shape.path_edges(leaf) {
            ret += reward.edge(e);
            if beta > 0.0 {
                ret -= beta * (policy.log_prob(e) - reference.log_prob(e));
            }
        }
        if !ret.is_finite() {
            return Err(usage("sampled a token outside the reference support"));
        }
        sum += ret;
        sq += ret * ret;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(MonteCarloEstimate { mean, stderr: (var / n).sqrt(), samples })
}

/// `V*_β(ρ)`. At `β = 0` this is the best expected sum of rewards, with no
/// reference involved.
pub fn optimal_value(mdp: &TokenMdp, reward: &RewardTable, reference: &AutoregressivePolicy, beta: f64) -> Result<f64> {
    if beta > 0.0 {
        return Ok(soft_backward_induction(mdp, reward, reference, beta)?.0.initial_value(mdp));
    }
    if beta != 0.0 {
        return Err(usage(format!("β must be non-negative, got {beta}")));
    }
    let shape = mdp.shape();
    let mut v = vec![0.0; shape.num_nodes()];
    for s in shape.decision_nodes().rev() {
        v[s] = shape.children(s).map(|c| reward.edge(c) + v[c]).fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(mdp.initial_dist().iter().enumerate().map(|(p, &w)| w * v[shape.root(p)]).sum())
}

/// `V*_β(ρ) − V^π̂_β(ρ)`.
pub fn suboptimality(
    mdp: &TokenMdp,
    policy: &AutoregressivePolicy,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<f64> {
    Ok(optimal_value(mdp, reward, reference, beta)? - evaluate_policy(mdp, policy, reward, reference, beta)?)
}

/// Both sides of the regularized performance-difference identity,
/// `V^π(ρ) − V^π'(ρ)` and `E_{d^π}[Q^π'(s,a) − V^π'(s) − β log π(a|s)]`.
pub fn performance_difference(
    mdp: &TokenMdp,
    pi: &AutoregressivePolicy,
    pi_prime: &AutoregressivePolicy,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<(f64, f64)> {
    let vp = policy_values(mdp, pi, reward, reference, beta)?;
    let vq = policy_values(mdp, pi_prime, reward, reference, beta)?;
    let lhs = vp.initial_value(mdp) - vq.initial_value(mdp);
    let shape = mdp.shape();
    let d = mdp.visitation(pi)?;
    let rhs = d.expect_edges(|e| {
        let s = shape.parent(e).expect("edges have parents");
        let ent = if beta > 0.0 { beta * pi.log_prob(e) } else { 0.0 };
        vq.q[e] - vq.v[s] - ent
    });
    Ok((lhs, rhs))
}

/// `E_{s ~ d^π}[KL(π(·|s) ‖ other(·|s))]`.
pub fn expected_kl(mdp: &TokenMdp, pi: &AutoregressivePolicy, other: &AutoregressivePolicy) -> Result<f64> {
    check_shape(mdp.shape(), other.shape())?;
    let d = mdp.visitation(pi)?;
    Ok(d.expect_states(|s| pi.kl_at(s, other)))
}

/// `E_{s ~ d^π}[KL(a(·|s) ‖ b(·|s))]` where the state distribution comes from `pi`.
pub fn expected_kl_under(
    mdp: &TokenMdp,
    pi: &AutoregressivePolicy,
    a: &AutoregressivePolicy,
    b: &AutoregressivePolicy,
) -> Result<f64> {
    check_shape(mdp.shape(), a.shape())?;
    check_shape(mdp.shape(), b.shape())?;
    let d = mdp.visitation(pi)?;
    Ok(d.expect_states(|s| a.kl_at(s, b)))
}

/// Largest violation of the soft Bellman equations by `tables`.
pub fn bellman_residual(
    mdp: &TokenMdp,
    tables: &SoftValueTables,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
) -> f64 {
    let shape = mdp.shape();
    let beta = tables.beta;
    let mut worst: f64 = 0.0;
    for s in shape.decision_nodes() {
        let mut scaled = Vec::with_capacity(shape.vocab_size());
        for c in shape.children(s) {
            let target = reward.edge(c) + beta * reference.log_prob(c) + tables.v[c];
            worst = worst.max((tables.q[c] - target).abs());
            scaled.push(tables.q[c] / beta);
        }
        worst = worst.max((tables.v[s] - beta * log_sum_exp(&scaled)).abs());
    }
    for node in shape.reachable_nodes() {
        if shape.is_terminal(node) {
            worst = worst.max(tables.v[node].abs());
        }
    }
    worst
}

/// Regularized trajectory return `Σ_h r − β log(π/π_ref)` along the path to `leaf`.
pub fn regularized_return(
    leaf: NodeId,
    mdp: &TokenMdp,
    policy: &AutoregressivePolicy,
    reward: &RewardTable,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> f64 {
    mdp.shape()
        .path_edges(leaf)
        .iter()
        .map(|&e| reward.edge(e) - if beta > 0.0 { beta * (policy.log_prob(e) - reference.log_prob(e)) } else { 0.0 })
        .sum()
}
