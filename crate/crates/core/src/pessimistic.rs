//! Pessimistic planning: the max-min value problem over a confidence set of
//! linear rewards, the reward-pessimism pipeline (MLE, pessimistic reward,
//! soft planning), and exact evaluators of their suboptimality bounds.

use nalgebra::DVector;

use crate::error::{usage, Result};
use crate::features::FeatureTable;
use crate::mdp::{RewardTable, TokenMdp};
use crate::planner::{expected_kl, expected_kl_under, policy_values, soft_backward_induction};
use crate::policy::AutoregressivePolicy;
use crate::preference::PreferenceDataset;
use crate::reward_model::{
    covariance, mle_fit, norm2, pessimistic_reward, plug_in_reward, CovarianceMatrix, MleConfig, MleFit,
    PessimismConfig,
};

/// `Θ = {‖θ‖₂ ≤ B : ‖θ − θ_MLE‖_{Σ_D} ≤ ϱ}`.
#[derive(Debug, Clone)]
pub struct ConfidenceSet {
    pub theta_mle: Vec<f64>,
    pub sigma: CovarianceMatrix,
    pub rho: f64,
    pub b_bound: f64,
}

impl ConfidenceSet {
    pub fn new(theta_mle: Vec<f64>, sigma: CovarianceMatrix, rho: f64, b_bound: f64) -> Result<Self> {
        if theta_mle.len() != sigma.dim() {
            return Err(usage("θ_MLE and Σ_D disagree on the dimension"));
        }
        if !(rho >= 0.0) || !(b_bound > 0.0) {
            return Err(usage("ϱ must be non-negative and B positive"));
        }
        if norm2(&theta_mle) > b_bound * (1.0 + 1e-12) {
            return Err(usage("θ_MLE lies outside the ball ‖θ‖ ≤ B, so the set is empty"));
        }
        Ok(ConfidenceSet { theta_mle, sigma, rho, b_bound })
    }

    pub fn dim(&self) -> usize {
        self.theta_mle.len()
    }

    /// Distance `‖θ − θ_MLE‖_{Σ_D}`.
    pub fn distance(&self, theta: &[f64]) -> f64 {
        let diff: Vec<f64> = theta.iter().zip(&self.theta_mle).map(|(a, b)| a - b).collect();
        self.sigma.norm(&diff)
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.distance(theta) <= self.rho * (1.0 + 1e-9) + 1e-12 && norm2(theta) <= self.b_bound * (1.0 + 1e-12)
    }
}

/// `μ_π = E_{(s,a)~d^π}[φ(s, a)]`.
pub fn feature_expectation(mdp: &TokenMdp, pi: &AutoregressivePolicy, features: &FeatureTable) -> Result<Vec<f64>> {
    let d = mdp.visitation(pi)?;
    let mut mu = vec![0.0; features.dim()];
    for (e, w) in d.edges() {
        if w != 0.0 {
            features.add_scaled(e, w, &mut mu);
        }
    }
    Ok(mu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerMin {
    /// `min_θ μᵀθ − β·E_{d^π}[KL(π‖π_ref)]`.
    pub value: f64,
    pub theta: Vec<f64>,
    /// Whether the norm ball cut off the ellipsoid minimizer.
    pub ball_active: bool,
}

/// `argmin_{θ∈Θ} μᵀθ`. The ellipsoid minimizer is `θ_MLE − ϱ Σ⁻¹μ / ‖μ‖_{Σ⁻¹}`;
/// when that leaves the ball the two-constraint dual is solved by nested bisection.
pub fn minimize_linear(mu: &[f64], set: &ConfidenceSet) -> Result<(Vec<f64>, bool)> {
    if mu.len() != set.dim() {
        return Err(usage("μ has the wrong dimension"));
    }
    let mu_norm = set.sigma.inv_norm(mu);
    if mu_norm == 0.0 || set.rho == 0.0 {
        return Ok((set.theta_mle.clone(), false));
    }
    let dir = set.sigma.solve(mu);
    let theta: Vec<f64> = set.theta_mle.iter().zip(&dir).map(|(t, g)| t - set.rho * g / mu_norm).collect();
    if norm2(&theta) <= set.b_bound * (1.0 + 1e-12) {
        return Ok((theta, false));
    }
    Ok((ball_constrained_min(mu, set), true))
}

/// KKT point of `min μᵀθ` over both constraints: `θ(a, b) = (aΣ + bI)⁻¹(aΣθ₀ − μ)`,
/// with `a(b)` making the ellipsoid tight (or zero) and `b` making the ball tight.
/// Works in the eigenbasis of `Σ`, where every solve is diagonal.
fn ball_constrained_min(mu: &[f64], set: &ConfidenceSet) -> Vec<f64> {
    let eig = set.sigma.matrix().clone().symmetric_eigen();
    let (u, lam) = (&eig.eigenvectors, &eig.eigenvalues);
    let t0 = u.transpose() * DVector::from_column_slice(&set.theta_mle);
    let m = u.transpose() * DVector::from_column_slice(mu);
    let solve = |a: f64, b: f64| -> DVector<f64> {
        DVector::from_fn(lam.len(), |i, _| (a * lam[i] * t0[i] - m[i]) / (a * lam[i] + b))
    };
    let ellipsoid_gap = |t: &DVector<f64>| {
        let q: f64 = (0..lam.len()).map(|i| lam[i] * (t[i] - t0[i]).powi(2)).sum();
        q.sqrt() - set.rho
    };
    let inner = |b: f64| -> DVector<f64> {
        let at_zero = solve(0.0, b);
        if ellipsoid_gap(&at_zero) <= 0.0 {
            return at_zero;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        while ellipsoid_gap(&solve(hi, b)) > 0.0 {
            lo = hi;
            hi *= 2.0;
        }
        hi = bisect(lo, hi, |a| ellipsoid_gap(&solve(a, b)) > 0.0);
        solve(hi, b)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while inner(hi).norm() > set.b_bound {
        lo = hi;
        hi *= 2.0;
    }
    hi = bisect(lo, hi, |b| inner(b).norm() > set.b_bound);
    (u * inner(hi)).as_slice().to_vec()
}

/// Smallest `x` in `(lo, hi]` with `!too_small(x)`, to float resolution.
fn bisect(mut lo: f64, mut hi: f64, too_small: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if too_small(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Pessimistic value `min_{θ∈Θ} μ_πᵀθ − β·E_{d^π}[KL(π‖π_ref)]`.
pub fn inner_min_value(
    mdp: &TokenMdp,
    pi: &AutoregressivePolicy,
    features: &FeatureTable,
    set: &ConfidenceSet,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<InnerMin> {
    let mu = feature_expectation(mdp, pi, features)?;
    let (theta, ball_active) = minimize_linear(&mu, set)?;
    let kl = if beta > 0.0 { expected_kl(mdp, pi, reference)? } else { 0.0 };
    let lin: f64 = mu.iter().zip(&theta).map(|(m, t)| m * t).sum();
    Ok(InnerMin { value: lin - beta * kl, theta, ball_active })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxminConfig {
    pub iters: usize,
    /// Natural-gradient step; `None` uses `1/β`, a full soft policy-iteration step.
    pub step: Option<f64>,
    /// Stop after this many iterations without improving the best value.
    pub patience: usize,
}

impl Default for MaxminConfig {
    fn default() -> Self {
        MaxminConfig { iters: 500, step: None, patience: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct MaxminResult {
    pub policy: AutoregressivePolicy,
    pub value: f64,
    pub theta: Vec<f64>,
    pub iterations: usize,
    /// Best value after each iteration; non-decreasing.
    pub history: Vec<f64>,
    /// True when the patience limit stopped the ascent.
    pub stalled: bool,
}

/// Natural-gradient ascent on tabular logits against the pessimistic value.
/// The gradient at `π` is that of `V^π_β` under the reward `φᵀθ̂(π)`, where
/// `θ̂(π)` is the inner minimizer. Steps that lower the objective are halved.
pub fn maxmin_plan(
    mdp: &TokenMdp,
    features: &FeatureTable,
    set: &ConfidenceSet,
    reference: &AutoregressivePolicy,
    beta: f64,
    cfg: &MaxminConfig,
) -> Result<MaxminResult> {
    if !(beta > 0.0) {
        return Err(usage("max-min planning needs β > 0"));
    }
    let shape = mdp.shape();
    let base_step = cfg.step.unwrap_or(1.0 / beta);
    if !(base_step > 0.0) {
        return Err(usage("step must be positive"));
    }
    let mut pi = reference.clone();
    let mut cur = inner_min_value(mdp, &pi, features, set, reference, beta)?;
    let mut best = (pi.clone(), cur.clone());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stalled = false;
    let mut iterations = 0;
    while iterations < cfg.iters {
        iterations += 1;
        let reward = plug_in_reward(features, &cur.theta);
        let vals = policy_values(mdp, &pi, &reward, reference, beta)?;
        let log_pi = pi.normalized_logits();
        let mut direction = vec![0.0; shape.num_nodes()];
        for s in shape.decision_nodes() {
            for c in shape.children(s) {
                direction[c] = vals.q[c] - beta * pi.log_prob(c) - vals.v[s];
            }
        }
        let mut step = base_step;
        let mut moved = false;
        while step > base_step * 1e-12 {
            let logits: Vec<f64> = log_pi.iter().zip(&direction).map(|(z, g)| z + step * g).collect();
            let cand = AutoregressivePolicy::from_logits(shape, logits)?;
            let val = inner_min_value(mdp, &cand, features, set, reference, beta)?;
            if val.value >= cur.value {
                pi = cand;
                cur = val;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if cur.value > best.1.value {
            best = (pi.clone(), cur.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(best.1.value);
        if !moved || direction.iter().all(|g| g.abs() < 1e-13) {
            break;
        }
        if since_best >= cfg.patience {
            log::warn!("max-min ascent made no progress for {} iterations; returning best iterate", cfg.patience);
            stalled = true;
            break;
        }
    }
    let (policy, val) = best;
    Ok(MaxminResult { policy, value: val.value, theta: val.theta, iterations, history, stalled })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Algorithm1Config {
    pub beta: f64,
    pub lambda: f64,
    pub b_bound: f64,
    pub pessimism: PessimismConfig,
    pub mle: MleConfig,
}

#[derive(Debug, Clone)]
pub struct Algorithm1Output {
    pub policy: AutoregressivePolicy,
    pub reward: RewardTable,
    pub fit: MleFit,
    pub sigma: CovarianceMatrix,
}

/// Pessimistic reward `r̂ = φᵀθ − ϱ‖φ‖_{Σ⁻¹}` and its soft-optimal policy.
pub fn plan_pessimistic(
    mdp: &TokenMdp,
    features: &FeatureTable,
    theta: &[f64],
    sigma: &CovarianceMatrix,
    pessimism: &PessimismConfig,
    reference: &AutoregressivePolicy,
    beta: f64,
) -> Result<(RewardTable, AutoregressivePolicy)> {
    let reward = pessimistic_reward(features, theta, sigma, pessimism)?;
    let (_, policy) = soft_backward_induction(mdp, &reward, reference, beta)?;
    Ok((reward, policy))
}

/// MLE, then pessimistic reward, then exact soft planning.
pub fn algorithm1(
    mdp: &TokenMdp,
    dataset: &PreferenceDataset,
    features: &FeatureTable,
    reference: &AutoregressivePolicy,
    cfg: &Algorithm1Config,
) -> Result<Algorithm1Output> {
    let fit = mle_fit(dataset, features, cfg.b_bound, &cfg.mle)?;
    let sigma = covariance(dataset, features, cfg.lambda)?;
    let (reward, policy) = plan_pessimistic(mdp, features, &fit.theta, &sigma, &cfg.pessimism, reference, cfg.beta)?;
    Ok(Algorithm1Output { policy, reward, fit, sigma })
}

/// `2ϱ·E_{d*}[‖φ‖_{Σ⁻¹}] − β·E_{d*}[KL(π*_β‖π̂)]`, with `d*` the visitation of `pi_star`.
pub fn reward_pessimism_bound(
    mdp: &TokenMdp,
    features: &FeatureTable,
    sigma: &CovarianceMatrix,
    rho: f64,
    pi_star: &AutoregressivePolicy,
    pi_hat: &AutoregressivePolicy,
    beta: f64,
) -> Result<f64> {
    let d = mdp.visitation(pi_star)?;
    let spread = d.expect_edges(|e| sigma.inv_norm(&features.vector(e)));
    let kl = expected_kl_under(mdp, pi_star, pi_star, pi_hat)?;
    Ok(2.0 * rho * spread - beta * kl)
}

/// `2ϱ‖E_{d*}[φ]‖_{Σ⁻¹}`.
pub fn value_pessimism_bound(
    mdp: &TokenMdp,
    features: &FeatureTable,
    sigma: &CovarianceMatrix,
    rho: f64,
    pi_star: &AutoregressivePolicy,
) -> Result<f64> {
    Ok(2.0 * rho * sigma.inv_norm(&feature_expectation(mdp, pi_star, features)?))
}
