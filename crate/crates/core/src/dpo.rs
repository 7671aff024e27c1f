//! Direct preference optimization and its implicit token-wise reward.
//!
//! The loss is `−Σ w log σ(β Σ_h log(π/π_ref)(τ^w) − β Σ_h log(π/π_ref)(τ^l)) / Σ w`;
//! by the autoregressive factorization the per-token sums equal sentence
//! log-ratios, so token-level and sentence-level DPO coincide.

use serde::{Deserialize, Serialize};

use crate::error::{numerical, usage, Result};
use crate::optim::Adam;
use crate::mdp::{check_shape, NodeId, RewardTable, TreeShape};
use crate::policy::{AutoregressivePolicy, Parameterization};
use crate::preference::{log_sigmoid, sigmoid, PreferenceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    /// Adam step size; `None` picks 0.1 for tabular and 0.01 for linear-softmax policies.
    pub lr: Option<f64>,
    pub max_iters: usize,
    /// Stop once the sup-norm of the parameter gradient falls below this.
    pub tol: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1, lr: None, max_iters: 20_000, tol: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct DpoFit {
    pub policy: AutoregressivePolicy,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct PairPaths {
    weight: f64,
    winner: Vec<NodeId>,
    loser: Vec<NodeId>,
}

fn pair_paths(dataset: &PreferenceDataset, shape: &TreeShape) -> Result<(Vec<PairPaths>, f64)> {
    let paths: Vec<PairPaths> = dataset
        .resolved(shape)?
        .into_iter()
        .map(|(weight, w, l)| PairPaths { weight, winner: shape.path_edges(w), loser: shape.path_edges(l) })
        .collect();
    let total: f64 = paths.iter().map(|p| p.weight).sum();
    if !(total > 0.0) {
        return Err(usage("DPO needs a dataset with positive total weight"));
    }
    Ok((paths, total))
}

fn log_ratio(edges: &[NodeId], pi: &AutoregressivePolicy, reference: &AutoregressivePolicy) -> Result<f64> {
    let mut s = 0.0;
    for &e in edges {
        let (lp, lr) = (pi.log_prob(e), reference.log_prob(e));
        if !lp.is_finite() || !lr.is_finite() {
            return Err(usage(format!("zero probability on dataset edge {e}")));
        }
        s += lp - lr;
    }
    Ok(s)
}

fn check(pi: &AutoregressivePolicy, reference: &AutoregressivePolicy, beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(usage(format!("DPO needs β > 0, got {beta}")));
    }
    check_shape(pi.shape(), reference.shape())
}

/// Token-wise DPO loss (weighted mean over pairs).
pub fn dpo_loss(
    pi: &AutoregressivePolicy,
    reference: &AutoregressivePolicy,
    dataset: &PreferenceDataset,
    beta: f64,
) -> Result<f64> {
    check(pi, reference, beta)?;
    let (paths, total) = pair_paths(dataset, pi.shape())?;
    let mut loss = 0.0;
    for p in &paths {
        let z = beta * (log_ratio(&p.winner, pi, reference)? - log_ratio(&p.loser, pi, reference)?);
        loss -= p.weight * log_sigmoid(z);
    }
    Ok(loss / total)
}

/// Sentence-level DPO loss from whole-response probabilities `π(y|x)`, each
/// computed as a product of conditionals.
pub fn dpo_loss_sentence(
    pi: &AutoregressivePolicy,
    reference: &AutoregressivePolicy,
    dataset: &PreferenceDataset,
    beta: f64,
) -> Result<f64> {
    check(pi, reference, beta)?;
    let shape = pi.shape();
    let seq_prob = |policy: &AutoregressivePolicy, leaf: NodeId| -> f64 {
        shape.path_edges(leaf).iter().map(|&e| policy.prob(e)).product()
    };
    let mut loss = 0.0;
    let mut total = 0.0;
    for (w, win, lose) in dataset.resolved(shape)? {
        let ratio = |leaf| {
            let (p, q) = (seq_prob(pi, leaf), seq_prob(reference, leaf));
            if p > 0.0 && q > 0.0 {
                Ok(p.ln() - q.ln())
            } else {
                Err(usage("zero probability on a dataset response"))
            }
        };
        let z = beta * (ratio(win)? - ratio(lose)?);
        loss -= w * log_sigmoid(z);
        total += w;
    }
    if !(total > 0.0) {
        return Err(usage("DPO needs a dataset with positive total weight"));
    }
    Ok(loss / total)
}

/// Loss and gradient with respect to the policy's parameter vector.
pub fn dpo_loss_and_grad(
    pi: &AutoregressivePolicy,
    reference: &AutoregressivePolicy,
    dataset: &PreferenceDataset,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check(pi, reference, beta)?;
    let (paths, total) = pair_paths(dataset, pi.shape())?;
    loss_and_grad(pi, reference, &paths, total, beta)
}

fn loss_and_grad(
    pi: &AutoregressivePolicy,
    reference: &AutoregressivePolicy,
    paths: &[PairPaths],
    total: f64,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut coeffs = vec![0.0; pi.shape().num_nodes()];
    let mut loss = 0.0;
    for p in paths {
        let z = beta * (log_ratio(&p.winner, pi, reference)? - log_ratio(&p.loser, pi, reference)?);
        loss -= p.weight * log_sigmoid(z);
        // d(−log σ(z))/dz = −σ(−z)
        let c = -p.weight * sigmoid(-z) * beta / total;
        for &e in &p.winner {
            coeffs[e] += c;
        }
        for &e in &p.loser {
            coeffs[e] -= c;
        }
    }
    let grad = pi.param_gradient(&pi.logit_gradient(&coeffs));
    Ok((loss / total, grad))
}

/// Full-batch Adam on the DPO loss, starting from `init` (or from `π_ref`).
/// A step that increases the loss is rejected, the step size halved, and the
/// moment estimates restarted.
pub fn dpo_fit(
    dataset: &PreferenceDataset,
    reference: &AutoregressivePolicy,
    init: Option<&AutoregressivePolicy>,
    cfg: &DpoConfig,
) -> Result<DpoFit> {
    if dataset.is_empty() {
        return Err(usage("DPO needs a nonempty dataset"));
    }
    let mut pi = init.unwrap_or(reference).clone();
    check(&pi, reference, cfg.beta)?;
    let (paths, total) = pair_paths(dataset, pi.shape())?;
    let lr = cfg.lr.unwrap_or(match pi.parameterization() {
        Parameterization::Tabular => 0.1,
        Parameterization::LinearSoftmax { .. } => 0.01,
    });
    let mut params = pi.params();
    let mut adam = Adam::new(params.len(), lr).with_eps(1e-12);
    let (mut loss, mut grad) = loss_and_grad(&pi, reference, &paths, total, cfg.beta)?;
    let mut iterations = 0;
    let mut grad_norm = sup(&grad);
    while iterations < cfg.max_iters && grad_norm > cfg.tol && adam.lr > 1e-14 {
        iterations += 1;
        let mut cand = params.clone();
        adam.step(&mut cand, &grad, true);
        pi.set_params(&cand)?;
        let (new_loss, new_grad) = loss_and_grad(&pi, reference, &paths, total, cfg.beta)?;
        if !new_loss.is_finite() {
            return Err(numerical(format!(
                "DPO loss diverged at iteration {iterations} (lr {}, previous loss {loss})",
                adam.lr
            )));
        }
        if new_loss > loss {
            // reject, shrink the step and restart the moment estimates
            adam.lr *= 0.5;
            adam.reset();
            pi.set_params(&params)?;
            continue;
        }
        params = cand;
        loss = new_loss;
        grad = new_grad;
        grad_norm = sup(&grad);
    }
    Ok(DpoFit { policy: pi, loss, grad_norm, iterations, converged: grad_norm <= cfg.tol })
}

fn sup(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// `β log(π_dpo(a|s) / π_ref(a|s))` for the edge into `child`.
pub fn implicit_token_reward(
    dpo: &AutoregressivePolicy,
    reference: &AutoregressivePolicy,
    beta: f64,
    child: NodeId,
) -> Result<f64> {
    let (p, q) = (dpo.log_prob(child), reference.log_prob(child));
    if !q.is_finite() {
        return Err(usage(format!("reference has zero probability on edge {child}")));
    }
    if !p.is_finite() {
        return Err(usage(format!("DPO policy has zero probability on edge {child}")));
    }
    Ok(beta * (p - q))
}

/// Implicit token reward on every reachable edge.
pub fn implicit_reward_table(
    dpo: &AutoregressivePolicy,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<RewardTable> {
    check_shape(dpo.shape(), reference.shape())?;
    let shape = dpo.shape();
    let mut values = vec![0.0; shape.num_nodes()];
    for s in shape.decision_nodes() {
        for c in shape.children(s) {
            values[c] = implicit_token_reward(dpo, reference, beta, c)?;
        }
    }
    RewardTable::from_values(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TokenMdp;
    use crate::preference::{population_dataset, sample_dataset, PreferencePair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(shape: &TreeShape, seed: u64) -> AutoregressivePolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..shape.num_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
        AutoregressivePolicy::from_logits(shape, logits).unwrap()
    }

    fn dataset(shape: &TreeShape, n: usize, seed: u64) -> PreferenceDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reward = RewardTable::from_edge_fn(shape, |_| rng.random_range(-1.0..1.0));
        let mdp = TokenMdp::with_uniform_prompts(shape.clone(), reward).unwrap();
        sample_dataset(&mdp, mdp.reward(), &AutoregressivePolicy::uniform(shape), n, &mut rng).unwrap()
    }

    #[test]
    fn reference_loss_is_ln2() {
        let shape = TreeShape::new(3, 2, 1, Some(0)).unwrap();
        let reference = random_policy(&shape, 1);
        let data = dataset(&shape, 25, 2);
        let l = dpo_loss(&reference, &reference, &data, 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bandit_closed_form() {
        let shape = TreeShape::new(2, 1, 1, None).unwrap();
        let reference = AutoregressivePolicy::uniform(&shape);
        let beta = 0.5;
        // winner/loser probability ratio exp(1/β) relative to the reference
        let pi = AutoregressivePolicy::from_logits(&shape, vec![0.0, 1.0 / beta, 0.0]).unwrap();
        let data = PreferenceDataset::new(vec![PreferencePair { prompt: 0, winner: vec![0], loser: vec![1] }]);
        let l = dpo_loss(&pi, &reference, &data, beta).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = TreeShape::new(2, 3, 1, None).unwrap();
        let reference = random_policy(&shape, 3);
        let data = dataset(&shape, 30, 4);
        let pi = random_policy(&shape, 5);
        let (_, grad) = dpo_loss_and_grad(&pi, &reference, &data, 0.7).unwrap();
        let params = pi.params();
        for i in 0..params.len() {
            let h = 1e-5;
            let mut p = pi.clone();
            let mut up = params.clone();
            up[i] += h;
            p.set_params(&up).unwrap();
            let lp = dpo_loss(&p, &reference, &data, 0.7).unwrap();
            up[i] -= 2.0 * h;
            p.set_params(&up).unwrap();
            let lm = dpo_loss(&p, &reference, &data, 0.7).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1e-4), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn token_and_sentence_losses_agree() {
        let shape = TreeShape::new(3, 3, 2, Some(1)).unwrap();
        let data = dataset(&shape, 40, 6);
        let (pi, reference) = (random_policy(&shape, 7), random_policy(&shape, 8));
        let a = dpo_loss(&pi, &reference, &data, 0.3).unwrap();
        let b = dpo_loss_sentence(&pi, &reference, &data, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mirrored_dataset_keeps_reference() {
        let shape = TreeShape::new(2, 2, 1, None).unwrap();
        let reference = random_policy(&shape, 9);
        let data = dataset(&shape, 20, 10).with_mirrors();
        let fit = dpo_fit(&data, &reference, None, &DpoConfig::default()).unwrap();
        assert_eq!(fit.iterations, 0);
        assert!(fit.converged);
        let r = implicit_reward_table(&fit.policy, &reference, 0.1).unwrap();
        assert!(r.values().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn population_bandit_recovers_gap() {
        let shape = TreeShape::new(2, 1, 1, None).unwrap();
        let gap = 0.7;
        let reward = RewardTable::from_fn(&shape, |_, _, a| if a == 0 { gap } else { 0.0 });
        let mdp = TokenMdp::with_uniform_prompts(shape.clone(), reward).unwrap();
        let reference = AutoregressivePolicy::uniform(&shape);
        let data = population_dataset(&mdp, mdp.reward(), &reference).unwrap();
        let cfg = DpoConfig::default();
        let fit = dpo_fit(&data, &reference, None, &cfg).unwrap();
        let r0 = implicit_token_reward(&fit.policy, &reference, cfg.beta, 1).unwrap();
        let r1 = implicit_token_reward(&fit.policy, &reference, cfg.beta, 2).unwrap();
        assert!((r0 - r1 - gap).abs() < 1e-3, "{} vs {gap}: {} {} {}", r0 - r1, fit.iterations, fit.grad_norm, fit.loss);
    }

    #[test]
    fn implicit_reward_telescopes() {
        let shape = TreeShape::new(2, 3, 1, None).unwrap();
        let (pi, reference) = (random_policy(&shape, 11), random_policy(&shape, 12));
        let r = implicit_reward_table(&pi, &reference, 0.4).unwrap();
        for leaf in shape.leaves(0) {
            let direct = 0.4 * (pi.path_log_prob(leaf) - reference.path_log_prob(leaf));
            assert!((r.path_sum(&shape, leaf) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_invariant_to_logit_shifts() {
        let shape = TreeShape::new(2, 2, 1, None).unwrap();
        let data = dataset(&shape, 15, 13);
        let reference = random_policy(&shape, 14);
        let pi = random_policy(&shape, 15);
        let mut shifted = pi.logits().to_vec();
        for s in shape.decision_nodes() {
            for c in shape.children(s) {
                shifted[c] += 3.0 - s as f64;
            }
        }
        let pj = AutoregressivePolicy::from_logits(&shape, shifted).unwrap();
        let a = dpo_loss(&pi, &reference, &data, 0.2).unwrap();
        let b = dpo_loss(&pj, &reference, &data, 0.2).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}
