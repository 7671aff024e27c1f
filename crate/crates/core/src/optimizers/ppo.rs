//! Clipped policy-gradient updates, advantage estimation and a tabular critic.

use serde::{Deserialize, Serialize};

use crate::error::{numerical, usage, Result};
use crate::mdp::NodeId;
use crate::optim::Adam;
use crate::policy::AutoregressivePolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gae_lambda: f64,
    pub update_epochs: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub value_clip: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gae_lambda: 0.95,
            update_epochs: 4,
            batch_size: 16,
            actor_lr: 0.05,
            critic_lr: 0.1,
            value_clip: 0.2,
            normalize_advantages: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(usage("clip must be positive and λ in [0, 1]"));
        }
        if self.update_epochs == 0 || self.batch_size == 0 {
            return Err(usage("update_epochs and batch_size must be positive"));
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr >= 0.0) || !(self.value_clip > 0.0) {
            return Err(usage("learning rates and value clip must be positive"));
        }
        Ok(())
    }
}

/// Generalized advantage estimates with `γ = 1`. `values` has one more entry
/// than `rewards`; the final one is the value after the last step (0 at a leaf).
pub fn gae(rewards: &[f64], values: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(usage("gae needs exactly one more value than rewards"));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for h in (0..rewards.len()).rev() {
        let delta = rewards[h] + values[h + 1] - values[h];
        acc = delta + lambda * acc;
        adv[h] = acc;
    }
    Ok(adv)
}

/// Undiscounted reward-to-go at every step.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for h in (0..rewards.len()).rev() {
        acc += rewards[h];
        out[h] = acc;
    }
    out
}

/// One action taken during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSample {
    pub edge: NodeId,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateStats {
    pub objective: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Clipped surrogate `mean(min(ρA, clip(ρ, 1±ε)A))` and its parameter gradient.
pub fn surrogate(policy: &AutoregressivePolicy, samples: &[StepSample], clip: f64) -> Result<(SurrogateStats, Vec<f64>)> {
    if samples.is_empty() {
        return Err(usage("surrogate needs at least one sample"));
    }
    let n = samples.len() as f64;
    let mut coeffs = vec![0.0; policy.shape().num_nodes()];
    let (mut obj, mut clipped) = (0.0, 0usize);
    for s in samples {
        let ratio = (policy.log_prob(s.edge) - s.old_log_prob).exp();
        let a = s.advantage;
        let unclipped = ratio * a;
        let bounded = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        if !unclipped.is_finite() {
            return Err(numerical(format!("importance ratio {ratio} with advantage {a} is not finite")));
        }
        if unclipped <= bounded {
            obj += unclipped;
            coeffs[s.edge] += unclipped / n;
        } else {
            obj += bounded;
            clipped += 1;
        }
    }
    let grad = policy.param_gradient(&policy.logit_gradient(&coeffs));
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(numerical("policy gradient is not finite"));
    }
    Ok((SurrogateStats { objective: obj / n, clip_fraction: clipped as f64 / n, grad_norm }, grad))
}

/// One ascent step on the clipped surrogate.
pub fn ppo_update(
    policy: &mut AutoregressivePolicy,
    samples: &[StepSample],
    clip: f64,
    adam: &mut Adam,
) -> Result<SurrogateStats> {
    let (stats, grad) = surrogate(policy, samples, clip)?;
    let mut params = policy.params();
    adam.step(&mut params, &grad, false);
    policy.set_params(&params)?;
    Ok(stats)
}

/// State-value table indexed by node id. Terminal nodes are pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCritic {
    values: Vec<f64>,
}

/// A critic regression target for one visited state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueTarget {
    pub node: NodeId,
    pub target: f64,
    pub old_value: f64,
}

impl TabularCritic {
    pub fn new(num_nodes: usize) -> Self {
        TabularCritic { values: vec![0.0; num_nodes] }
    }

    pub fn value(&self, node: NodeId) -> f64 {
        self.values[node]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Gradient step on the clipped value loss `½ max((V−R)², (V_clip−R)²)`,
    /// averaging the gradient over the visits of each node.
    pub fn update(&mut self, targets: &[ValueTarget], lr: f64, value_clip: f64) {
        let mut grad = vec![0.0; self.values.len()];
        let mut count = vec![0usize; self.values.len()];
        for t in targets {
            let v = self.values[t.node];
            let vc = t.old_value + (v - t.old_value).clamp(-value_clip, value_clip);
            let g = if (v - t.target).powi(2) >= (vc - t.target).powi(2) {
                v - t.target
            } else if (v - t.old_value).abs() < value_clip {
                vc - t.target
            } else {
                0.0
            };
            grad[t.node] += g;
            count[t.node] += 1;
        }
        for (i, &c) in count.iter().enumerate() {
            if c > 0 {
                self.values[i] -= lr * grad[i] / c as f64;
            }
        }
    }
}

/// Shifts and scales advantages in place to zero mean and unit variance.
pub fn normalize(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    advantages.iter_mut().for_each(|a| *a = (*a - mean) / sd);
}
