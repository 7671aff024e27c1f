//! Seeded generators for linear-reward token MDPs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::features::{FeatureSpec, FeatureTable};
use crate::mdp::{Token, TokenMdp, TreeShape};
use crate::reward_model::plug_in_reward;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearInstanceSpec {
    pub vocab_size: usize,
    pub horizon: usize,
    #[serde(default)]
    pub eos_token: Option<Token>,
    #[serde(default = "one")]
    pub num_prompts: usize,
    pub dim: usize,
    /// `‖φ(s, a)‖₂` for every edge.
    #[serde(default = "one_f")]
    pub feature_norm: f64,
    /// `‖θ*‖₂`.
    #[serde(default = "one_f")]
    pub theta_norm: f64,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct LinearInstance {
    pub mdp: TokenMdp,
    pub features: Arc<FeatureTable>,
    pub theta_star: Vec<f64>,
}

impl LinearInstanceSpec {
    pub fn shape(&self) -> Result<TreeShape> {
        TreeShape::new(self.vocab_size, self.horizon, self.num_prompts, self.eos_token)
    }

    /// Gaussian features and a Gaussian direction for `θ*`, both derived from `seed`.
    pub fn generate(&self, seed: u64) -> Result<LinearInstance> {
        if !(self.theta_norm > 0.0) {
            return Err(usage("theta_norm must be positive"));
        }
        let shape = self.shape()?;
        let spec = FeatureSpec::Gaussian { dim: self.dim, norm: self.feature_norm, seed };
        let features = Arc::new(FeatureTable::build(&spec, &shape)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let theta_star: Vec<f64> = raw.iter().map(|x| x * self.theta_norm / n).collect();
        let mdp = TokenMdp::with_uniform_prompts(shape, plug_in_reward(&features, &theta_star))?;
        Ok(LinearInstance { mdp, features, theta_star })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = LinearInstanceSpec {
            vocab_size: 3,
            horizon: 3,
            eos_token: None,
            num_prompts: 2,
            dim: 4,
            feature_norm: 1.0,
            theta_norm: 2.0,
        };
        let (a, b) = (spec.generate(7).unwrap(), spec.generate(7).unwrap());
        assert_eq!(a.theta_star, b.theta_star);
        assert_eq!(a.mdp.reward().values(), b.mdp.reward().values());
        assert!((a.theta_star.iter().map(|x| x * x).sum::<f64>().sqrt() - 2.0).abs() < 1e-12);
        assert_ne!(spec.generate(8).unwrap().theta_star, a.theta_star);
    }
}
