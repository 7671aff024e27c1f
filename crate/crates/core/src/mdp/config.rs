use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RewardTable, StochasticMdp, TokenMdp, TreeShape, DEFAULT_EXACT_CAP};
use crate::error::{usage, Error, Result};
use crate::features::{FeatureSpec, FeatureTable};

/// Structured-text description of an MDP instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpConfig {
    pub vocab_size: usize,
    pub horizon: usize,
    #[serde(default)]
    pub eos_token: Option<usize>,
    #[serde(default)]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub initial_dist: Vec<f64>,
    pub transition: TransitionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_cap: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionConfig {
    Deterministic,
    Tabular(TabularKernel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularKernel {
    pub num_states: usize,
    pub initial_dist: Vec<f64>,
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub rewards: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardConfig {
    Zero,
    /// Per-edge values indexed by child node id.
    Tabular { values: Vec<f64> },
    Linear { features: FeatureSpec, theta: Vec<f64> },
    /// I.i.d. `N(0, scale²)` token rewards.
    Random { seed: u64, scale: f64 },
}

#[derive(Debug, Clone)]
pub enum Instance {
    Token(TokenMdp),
    Stochastic(StochasticMdp),
}

impl Instance {
    pub fn from_config(cfg: &MdpConfig) -> Result<Self> {
        match &cfg.transition {
            TransitionConfig::Deterministic => Ok(Instance::Token(cfg.build_token_mdp()?)),
            TransitionConfig::Tabular(kernel) => {
                if cfg.reward.is_some() {
                    return Err(Error::Config("tabular kernels carry their own reward table".into()));
                }
                let mdp = StochasticMdp {
                    num_states: kernel.num_states,
                    num_actions: cfg.vocab_size,
                    horizon: cfg.horizon,
                    initial_dist: kernel.initial_dist.clone(),
                    transitions: kernel.transitions.clone(),
                    rewards: kernel.rewards.clone(),
                };
                mdp.validate()?;
                Ok(Instance::Stochastic(mdp))
            }
        }
    }

    pub fn token(&self) -> Result<&TokenMdp> {
        match self {
            Instance::Token(m) => Ok(m),
            Instance::Stochastic(_) => Err(Error::Unsupported(
                "operation needs a deterministic prefix-tree MDP".into(),
            )),
        }
    }

    pub fn enumerate_trajectories(&self, prompt: usize) -> Result<Vec<super::Trajectory>> {
        Ok(self.token()?.enumerate_trajectories(prompt)?.collect())
    }
}

impl MdpConfig {
    pub fn build_token_mdp(&self) -> Result<TokenMdp> {
        if !matches!(self.transition, TransitionConfig::Deterministic) {
            return Err(Error::Unsupported("expected a deterministic transition".into()));
        }
        let num_prompts = self.prompts.len().max(self.initial_dist.len()).max(1);
        let shape = TreeShape::with_cap(
            self.vocab_size,
            self.horizon,
            num_prompts,
            self.eos_token,
            self.exact_cap.unwrap_or(DEFAULT_EXACT_CAP),
        )?;
        let prompts = if self.prompts.is_empty() {
            (0..num_prompts).map(|p| format!("x{p}")).collect()
        } else {
            self.prompts.clone()
        };
        let initial = if self.initial_dist.is_empty() {
            vec![1.0 / num_prompts as f64; num_prompts]
        } else {
            self.initial_dist.clone()
        };
        let reward = match self.reward.as_ref().unwrap_or(&RewardConfig::Zero) {
            RewardConfig::Zero => RewardTable::zeros(&shape),
            RewardConfig::Tabular { values } => RewardTable::from_values(&shape, values.clone())?,
            RewardConfig::Linear { features, theta } => {
                let table = FeatureTable::build(features, &shape)?;
                if theta.len() != table.dim() {
                    return Err(usage(format!("theta has {} entries, features have dim {}", theta.len(), table.dim())));
                }
                RewardTable::from_edge_fn(&shape, |e| table.dot(e, theta))
            }
            RewardConfig::Random { seed, scale } => {
                let normal = Normal::new(0.0, *scale).map_err(|e| usage(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let draws: Vec<f64> = (0..shape.num_nodes()).map(|_| normal.sample(&mut rng)).collect();
                RewardTable::from_edge_fn(&shape, |e| draws[e])
            }
        };
        TokenMdp::new(shape, prompts, initial, reward)
    }
}

impl TokenMdp {
    /// Config with the reward written out as a per-edge table.
    pub fn to_config(&self) -> MdpConfig {
        let shape = self.shape();
        MdpConfig {
            vocab_size: shape.vocab_size(),
            horizon: shape.horizon(),
            eos_token: shape.eos(),
            prompts: self.prompts().to_vec(),
            initial_dist: self.initial_dist().to_vec(),
            transition: TransitionConfig::Deterministic,
            reward: Some(RewardConfig::Tabular { values: self.reward().values().to_vec() }),
            exact_cap: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_deterministic_config() {
        let text = r#"{"vocab_size": 2, "horizon": 3, "eos_token": null, "prompts": ["a", "b"],
            "initial_dist": [0.25, 0.75], "transition": "deterministic",
            "reward": {"kind": "random", "seed": 1, "scale": 1.0}}"#;
        let cfg: MdpConfig = serde_json::from_str(text).unwrap();
        let mdp = cfg.build_token_mdp().unwrap();
        assert_eq!(mdp.shape().num_prompts(), 2);
        let back: MdpConfig = serde_json::from_str(&serde_json::to_string(&mdp.to_config()).unwrap()).unwrap();
        let again = back.build_token_mdp().unwrap();
        assert_eq!(again.reward(), mdp.reward());
    }

    #[test]
    fn stochastic_kernel_cannot_enumerate() {
        let text = r#"{"vocab_size": 2, "horizon": 2, "transition": {"tabular": {
            "num_states": 3, "initial_dist": [1, 0, 0],
            "transitions": [[[[1, 0.5], [2, 0.5]], [[1, 0.5], [2, 0.5]]], [[[1, 1.0]], [[1, 1.0]]], [[[2, 1.0]], [[2, 1.0]]]],
            "rewards": [[0, 0], [1, 0], [0, 1]]}}}"#;
        let cfg: MdpConfig = serde_json::from_str(text).unwrap();
        let inst = Instance::from_config(&cfg).unwrap();
        assert!(matches!(inst.enumerate_trajectories(0), Err(Error::Unsupported(_))));
        match inst {
            Instance::Stochastic(m) => assert_eq!(m, StochasticMdp::markov_vs_predetermined()),
            _ => panic!("expected stochastic instance"),
        }
    }

    #[test]
    fn rejects_unknown_fields_and_bad_rho() {
        assert!(serde_json::from_str::<MdpConfig>(r#"{"vocab_size":2,"horizon":1,"transition":"deterministic","bogus":1}"#).is_err());
        let cfg: MdpConfig = serde_json::from_str(
            r#"{"vocab_size":2,"horizon":1,"initial_dist":[0.5,0.6],"transition":"deterministic"}"#,
        )
        .unwrap();
        assert!(cfg.build_token_mdp().is_err());
    }
}
