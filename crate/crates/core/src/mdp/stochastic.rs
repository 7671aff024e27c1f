//! Finite-horizon MDPs with an explicit tabular stochastic kernel.
//!
//! Only needed where the deterministic prefix tree cannot express the
//! dynamics, e.g. the three-state construction separating Markov policies
//! from predetermined action sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::planner::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial_dist: Vec<f64>,
    /// `transitions[s][a]` lists `(s', P(s' | s, a))`.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
}

/// Time-dependent Markov policy `π_h(a | s)`, indexed `[h][s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct StochasticValues {
    /// `q[h][s][a]`, including the `β log π_ref` term.
    pub q: Vec<Vec<Vec<f64>>>,
    /// `v[h][s]`; `v[H]` is identically zero.
    pub v: Vec<Vec<f64>>,
}

impl StochasticPolicy {
    pub fn uniform(mdp: &StochasticMdp) -> Self {
        let p = 1.0 / mdp.num_actions as f64;
        StochasticPolicy { probs: vec![vec![vec![p; mdp.num_actions]; mdp.num_states]; mdp.horizon] }
    }

    pub fn from_fn(mdp: &StochasticMdp, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Result<Self> {
        let mut probs = Vec::with_capacity(mdp.horizon);
        for h in 0..mdp.horizon {
            let mut layer = Vec::with_capacity(mdp.num_states);
            for s in 0..mdp.num_states {
                let p = f(h, s);
                let total: f64 = p.iter().sum();
                if p.len() != mdp.num_actions || p.iter().any(|&x| x < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(usage(format!("invalid conditional at step {h}, state {s}")));
                }
                layer.push(p);
            }
            probs.push(layer);
        }
        Ok(StochasticPolicy { probs })
    }
}

impl StochasticMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 || self.horizon == 0 {
            return Err(usage("stochastic MDP needs states, actions and a positive horizon"));
        }
        if self.initial_dist.len() != ns || (self.initial_dist.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(usage("initial distribution must be a probability vector over states"));
        }
        if self.transitions.len() != ns || self.rewards.len() != ns {
            return Err(usage("transition and reward tables need one row per state"));
        }
        for s in 0..ns {
            if self.transitions[s].len() != na || self.rewards[s].len() != na {
                return Err(usage(format!("state {s} needs one entry per action")));
            }
            for a in 0..na {
                let row = &self.transitions[s][a];
                let total: f64 = row.iter().map(|&(_, p)| p).sum();
                if row.iter().any(|&(t, p)| t >= ns || p < 0.0) || (total - 1.0).abs() > 1e-12 {
                    return Err(usage(format!("P(· | {s}, {a}) is not a distribution")));
                }
            }
        }
        Ok(())
    }

    /// States `{s0, s1, s2}`, actions `{a1, a2}`, `H = 2`, start at `s0`,
    /// `r(s_i, a_j) = 1{i = j}`, and both actions at `s0` move to `s1` or `s2`
    /// with probability 1/2. States `s1`, `s2` loop to themselves.
    pub fn markov_vs_predetermined() -> Self {
        let half = vec![(1, 0.5), (2, 0.5)];
        StochasticMdp {
            num_states: 3,
            num_actions: 2,
            horizon: 2,
            initial_dist: vec![1.0, 0.0, 0.0],
            transitions: vec![
                vec![half.clone(), half],
                vec![vec![(1, 1.0)], vec![(1, 1.0)]],
                vec![vec![(2, 1.0)], vec![(2, 1.0)]],
            ],
            rewards: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, state: usize, action: usize, rng: &mut R) -> Result<(usize, f64)> {
        if state >= self.num_states || action >= self.num_actions {
            return Err(usage("state or action out of range"));
        }
        let u: f64 = rng.random();
        let row = &self.transitions[state][action];
        let mut acc = 0.0;
        let mut next = row.last().map(|&(t, _)| t).unwrap_or(state);
        for &(t, p) in row {
            acc += p;
            if u < acc {
                next = t;
                break;
            }
        }
        Ok((next, self.rewards[state][action]))
    }

    fn expected_next(&self, v: &[f64], s: usize, a: usize) -> f64 {
        self.transitions[s][a].iter().map(|&(t, p)| p * v[t]).sum()
    }

    /// Optimal regularized values and policy. `β = 0` gives hard-max planning
    /// with a deterministic greedy policy (first maximizer).
    pub fn plan(&self, reference: &StochasticPolicy, beta: f64) -> Result<(StochasticValues, StochasticPolicy)> {
        if !(beta >= 0.0) {
            return Err(usage("beta must be non-negative"));
        }
        let (ns, na, hz) = (self.num_states, self.num_actions, self.horizon);
        let mut v = vec![vec![0.0; ns]; hz + 1];
        let mut q = vec![vec![vec![0.0; na]; ns]; hz];
        let mut probs = vec![vec![vec![0.0; na]; ns]; hz];
        for h in (0..hz).rev() {
            for s in 0..ns {
                for a in 0..na {
                    let log_ref = if beta > 0.0 { beta * reference.probs[h][s][a].ln() } else { 0.0 };
                    q[h][s][a] = self.rewards[s][a] + log_ref + self.expected_next(&v[h + 1], s, a);
                }
                if beta > 0.0 {
                    let scaled: Vec<f64> = q[h][s].iter().map(|x| x / beta).collect();
                    let lse = log_sum_exp(&scaled);
                    v[h][s] = beta * lse;
                    for a in 0..na {
                        probs[h][s][a] = (scaled[a] - lse).exp();
                    }
                } else {
                    let (best, val) = q[h][s]
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (a, &x)| if x > acc.1 { (a, x) } else { acc });
                    v[h][s] = val;
                    probs[h][s][best] = 1.0;
                }
            }
        }
        Ok((StochasticValues { q, v }, StochasticPolicy { probs }))
    }

    /// Regularized value tables of `policy`.
    pub fn evaluate(&self, policy: &StochasticPolicy, reference: &StochasticPolicy, beta: f64) -> StochasticValues {
        let (ns, na, hz) = (self.num_states, self.num_actions, self.horizon);
        let mut v = vec![vec![0.0; ns]; hz + 1];
        let mut q = vec![vec![vec![0.0; na]; ns]; hz];
        for h in (0..hz).rev() {
            for s in 0..ns {
                let mut value = 0.0;
                for a in 0..na {
                    let log_ref = if beta > 0.0 { beta * reference.probs[h][s][a].ln() } else { 0.0 };
                    q[h][s][a] = self.rewards[s][a] + log_ref + self.expected_next(&v[h + 1], s, a);
                    let p = policy.probs[h][s][a];
                    if p > 0.0 {
                        let ent = if beta > 0.0 { beta * p.ln() } else { 0.0 };
                        value += p * (q[h][s][a] - ent);
                    }
                }
                v[h][s] = value;
            }
        }
        StochasticValues { q, v }
    }

    pub fn initial_value(&self, values: &StochasticValues) -> f64 {
        self.initial_dist.iter().zip(&values.v[0]).map(|(p, v)| p * v).sum()
    }

    /// Per-step state-action occupancy `d_h(s, a)`.
    pub fn visitation(&self, policy: &StochasticPolicy) -> Vec<Vec<Vec<f64>>> {
        let (ns, na, hz) = (self.num_states, self.num_actions, self.horizon);
        let mut state = self.initial_dist.clone();
        let mut out = Vec::with_capacity(hz);
        for h in 0..hz {
            let mut layer = vec![vec![0.0; na]; ns];
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    let w = state[s] * policy.probs[h][s][a];
                    layer[s][a] = w;
                    for &(t, p) in &self.transitions[s][a] {
                        next[t] += w * p;
                    }
                }
            }
            out.push(layer);
            state = next;
        }
        out
    }

    /// Both sides of the regularized performance-difference identity:
    /// `V^π(ρ) − V^π'(ρ)` and `E_{d^π}[Q^π'(s,a) − V^π'(s) − β log π(a|s)]`.
    pub fn performance_difference(
        &self,
        pi: &StochasticPolicy,
        pi_prime: &StochasticPolicy,
        reference: &StochasticPolicy,
        beta: f64,
    ) -> (f64, f64) {
        let vp = self.evaluate(pi, reference, beta);
        let vq = self.evaluate(pi_prime, reference, beta);
        let lhs = self.initial_value(&vp) - self.initial_value(&vq);
        let d = self.visitation(pi);
        let mut rhs = 0.0;
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let w = d[h][s][a];
                    if w == 0.0 {
                        continue;
                    }
                    let ent = if beta > 0.0 { beta * pi.probs[h][s][a].ln() } else { 0.0 };
                    rhs += w * (vq.q[h][s][a] - vq.v[h][s] - ent);
                }
            }
        }
        (lhs, rhs)
    }

    /// Unregularized value of a fixed action sequence chosen from the start,
    /// ignoring the states actually visited.
    pub fn predetermined_value(&self, actions: &[usize]) -> Result<f64> {
        if actions.len() != self.horizon || actions.iter().any(|&a| a >= self.num_actions) {
            return Err(usage("action sequence must have one valid action per step"));
        }
        let mut state = self.initial_dist.clone();
        let mut value = 0.0;
        for &a in actions {
            let mut next = vec![0.0; self.num_states];
            for s in 0..self.num_states {
                if state[s] == 0.0 {
                    continue;
                }
                value += state[s] * self.rewards[s][a];
                for &(t, p) in &self.transitions[s][a] {
                    next[t] += state[s] * p;
                }
            }
            state = next;
        }
        Ok(value)
    }

    /// Best value over all `A^H` predetermined action sequences.
    pub fn best_predetermined_value(&self) -> Result<f64> {
        let total = (self.num_actions as u64)
            .checked_pow(self.horizon as u32)
            .filter(|&n| n <= 1 << 20)
            .ok_or_else(|| crate::error::Error::Unsupported("too many action sequences".into()))?;
        let mut best = f64::NEG_INFINITY;
        let mut seq = vec![0; self.horizon];
        for mut code in 0..total {
            for slot in seq.iter_mut().rev() {
                *slot = (code % self.num_actions as u64) as usize;
                code /= self.num_actions as u64;
            }
            best = best.max(self.predetermined_value(&seq)?);
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_splits_evenly() {
        let mdp = StochasticMdp::markov_vs_predetermined();
        mdp.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut to_s1 = 0;
        for _ in 0..n {
            let (next, r) = mdp.step(0, 0, &mut rng).unwrap();
            assert_eq!(r, 0.0);
            assert!(next == 1 || next == 2);
            to_s1 += (next == 1) as usize;
        }
        let frac = to_s1 as f64 / n as f64;
        assert!((frac - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn markov_beats_predetermined_by_half() {
        let mdp = StochasticMdp::markov_vs_predetermined();
        let reference = StochasticPolicy::uniform(&mdp);
        let (values, _) = mdp.plan(&reference, 0.0).unwrap();
        assert_eq!(mdp.initial_value(&values), 1.0);
        assert_eq!(mdp.best_predetermined_value().unwrap(), 0.5);
    }
}
