//! Policy optimization against learned rewards: sparse PPO, dense
//! token-wise PPO, critic-free REINFORCE variants, and reward-redistribution
//! baselines, all sharing one training loop.

mod ppo;
mod rewards;

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::mdp::{RewardTable, Token, TokenMdp};
use crate::optim::Adam;
use crate::planner::{evaluate_policy, expected_kl, optimal_value};
use crate::policy::AutoregressivePolicy;

pub use ppo::{
    gae, normalize, ppo_update, returns_to_go, surrogate, PpoConfig, StepSample, SurrogateStats, TabularCritic,
    ValueTarget,
};
pub use rewards::{
    redistribute, rto_components, rto_reward, sparse_reward, RewardComponents, RewardVariant, RtoCoefficients,
    RtoRewardSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    PpoSparse,
    Rto,
    RppSparse,
    RtoRpp,
    SemiRto,
    Ddpo,
    RsPpo,
}

impl Algo {
    pub const ALL: [Algo; 7] =
        [Algo::PpoSparse, Algo::Rto, Algo::RppSparse, Algo::RtoRpp, Algo::SemiRto, Algo::Ddpo, Algo::RsPpo];

    pub fn name(self) -> &'static str {
        match self {
            Algo::PpoSparse => "ppo_sparse",
            Algo::Rto => "rto",
            Algo::RppSparse => "rpp_sparse",
            Algo::RtoRpp => "rto_rpp",
            Algo::SemiRto => "semi_rto",
            Algo::Ddpo => "ddpo",
            Algo::RsPpo => "rs_ppo",
        }
    }

    /// Whether advantages come from a learned critic (GAE) or raw returns-to-go.
    pub fn uses_critic(self) -> bool {
        !matches!(self, Algo::RppSparse | Algo::RtoRpp)
    }

    fn is_sparse(self) -> bool {
        matches!(self, Algo::PpoSparse | Algo::RppSparse)
    }

    fn variant(self) -> RewardVariant {
        match self {
            Algo::SemiRto => RewardVariant::SemiRto,
            Algo::Ddpo => RewardVariant::Ddpo,
            Algo::RsPpo => RewardVariant::RsPpo,
            _ => RewardVariant::Rto,
        }
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| usage(format!("unknown algorithm `{s}`")))
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything fixed during training. `mdp.reward()` is the true token reward,
/// used only for logging.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub mdp: &'a TokenMdp,
    pub reference: &'a AutoregressivePolicy,
    /// Learned token table whose path sum is `r_MLE`.
    pub r_mle: &'a RewardTable,
    pub dpo: Option<&'a AutoregressivePolicy>,
    pub coeffs: RtoCoefficients,
    pub delimiters: &'a [Token],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub episodes: usize,
    pub mean_return_rmle: f64,
    pub mean_return_true: f64,
    /// `V*_β₂(ρ) − V^π_β₂(ρ)` under the true reward.
    pub subopt_exact: f64,
    pub kl_to_ref: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,mean_return_rmle,mean_return_true,subopt_exact,kl_to_ref\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.iter, r.mean_return_rmle, r.mean_return_true, r.subopt_exact, r.kl_to_ref
            );
        }
        out
    }

    /// Episodes consumed when suboptimality first drops to `threshold`.
    pub fn episodes_to_reach(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.subopt_exact <= threshold).map(|r| r.episodes)
    }
}

struct Rollout {
    samples: Vec<StepSample>,
    targets: Vec<ValueTarget>,
}

/// Runs `iters` iterations of `algo`, each collecting `cfg.batch_size`
/// episodes and applying `cfg.update_epochs` clipped updates.
pub fn train<R: Rng + ?Sized>(
    setup: &TrainSetup,
    algo: Algo,
    init: &AutoregressivePolicy,
    cfg: &PpoConfig,
    iters: usize,
    rng: &mut R,
) -> Result<(AutoregressivePolicy, TrainLog)> {
    cfg.validate()?;
    let mdp = setup.mdp;
    let shape = mdp.shape();
    if init.shape() != shape || setup.reference.shape() != shape {
        return Err(usage("policy shapes do not match the MDP"));
    }
    let dense_spec = RtoRewardSpec {
        coeffs: setup.coeffs,
        dpo: setup.dpo,
        reference: setup.reference,
        sentence: Some(setup.r_mle),
    };
    if !algo.is_sparse() {
        dense_spec.validate()?;
    }
    if algo == Algo::SemiRto && setup.delimiters.is_empty() {
        return Err(usage("semi_rto needs at least one delimiter token"));
    }
    let beta = setup.coeffs.beta2;
    let v_star = optimal_value(mdp, mdp.reward(), setup.reference, beta)?;

    let mut pi = init.clone();
    let mut adam = Adam::new(pi.num_params(), cfg.actor_lr);
    let mut critic = TabularCritic::new(shape.num_nodes());
    let mut log = TrainLog::default();

    for iter in 1..=iters {
        let mut batch = Rollout { samples: Vec::new(), targets: Vec::new() };
        let (mut ret_mle, mut ret_true) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let prompt = mdp.sample_prompt(rng);
            let leaf = pi.sample_leaf(prompt, rng);
            let edges = shape.path_edges(leaf);
            let tokens = shape.tokens_of(leaf);
            ret_mle += setup.r_mle.path_sum(shape, leaf);
            ret_true += mdp.reward().path_sum(shape, leaf);
            let rewards = if algo.is_sparse() {
                sparse_reward(setup.r_mle.path_sum(shape, leaf), &pi, setup.reference, beta, &edges)?
            } else {
                let parts = rto_components(&dense_spec, &pi, &edges)?;
                let dpo_sum = parts.dpo.iter().sum::<f64>();
                redistribute(algo.variant(), &parts.total(), &tokens, setup.delimiters, Some(dpo_sum))?
            };
            let rewards = &rewards[..edges.len()];
            let states: Vec<_> = edges.iter().map(|&e| shape.parent(e).expect("edge has a parent")).collect();
            let advantages = if algo.uses_critic() {
                let mut values: Vec<f64> = states.iter().map(|&s| critic.value(s)).collect();
                values.push(0.0);
                let adv = gae(rewards, &values, cfg.gae_lambda)?;
                for (h, &s) in states.iter().enumerate() {
                    batch.targets.push(ValueTarget { node: s, target: adv[h] + values[h], old_value: values[h] });
                }
                adv
            } else {
                returns_to_go(rewards)
            };
            for (h, &e) in edges.iter().enumerate() {
                batch.samples.push(StepSample { edge: e, old_log_prob: pi.log_prob(e), advantage: advantages[h] });
            }
        }
        if cfg.normalize_advantages {
            let mut adv: Vec<f64> = batch.samples.iter().map(|s| s.advantage).collect();
            normalize(&mut adv);
            batch.samples.iter_mut().zip(adv).for_each(|(s, a)| s.advantage = a);
        }
        for _ in 0..cfg.update_epochs {
            ppo_update(&mut pi, &batch.samples, cfg.clip, &mut adam)?;
            if algo.uses_critic() {
                critic.update(&batch.targets, cfg.critic_lr, cfg.value_clip);
            }
        }
        let n = cfg.batch_size as f64;
        let subopt = v_star - evaluate_policy(mdp, &pi, mdp.reward(), setup.reference, beta)?;
        log.records.push(TrainRecord {
            iter,
            episodes: iter * cfg.batch_size,
            mean_return_rmle: ret_mle / n,
            mean_return_true: ret_true / n,
            subopt_exact: subopt,
            kl_to_ref: expected_kl(mdp, &pi, setup.reference)?,
        });
    }
    Ok((pi, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TreeShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (TokenMdp, AutoregressivePolicy) {
        let shape = TreeShape::new(3, 3, 1, Some(0)).unwrap();
        let reward = RewardTable::from_fn(&shape, |_, prefix, a| if a == 2 { 1.0 } else { -0.2 * prefix.len() as f64 });
        let mdp = TokenMdp::with_uniform_prompts(shape.clone(), reward).unwrap();
        (mdp, AutoregressivePolicy::uniform(&shape))
    }

    fn setup<'a>(mdp: &'a TokenMdp, reference: &'a AutoregressivePolicy) -> TrainSetup<'a> {
        TrainSetup {
            mdp,
            reference,
            r_mle: mdp.reward(),
            dpo: Some(reference),
            coeffs: RtoCoefficients::default(),
            delimiters: &[1],
        }
    }

    #[test]
    fn zero_budget_gives_empty_log() {
        let (mdp, reference) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pi, log) = train(&setup(&mdp, &reference), Algo::Rto, &reference, &PpoConfig::default(), 0, &mut rng).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(pi.params(), reference.params());
        assert_eq!(log.to_csv().lines().count(), 1);
    }

    #[test]
    fn same_seed_same_log() {
        let (mdp, reference) = toy();
        let s = setup(&mdp, &reference);
        for algo in Algo::ALL {
            let run = |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                train(&s, algo, &reference, &PpoConfig::default(), 5, &mut rng).unwrap().1.to_csv()
            };
            assert_eq!(run(3), run(3), "{algo}");
        }
    }

    #[test]
    fn every_algorithm_improves_the_toy() {
        let (mdp, reference) = toy();
        let s = setup(&mdp, &reference);
        for algo in Algo::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let (_, log) = train(&s, algo, &reference, &PpoConfig::default(), 60, &mut rng).unwrap();
            let first = log.records[0].subopt_exact;
            let last = log.records.last().unwrap().subopt_exact;
            assert!(last < 0.5 * first, "{algo}: {first} -> {last}");
            assert!(log.records.iter().all(|r| r.subopt_exact >= -1e-9 && r.kl_to_ref >= -1e-12));
        }
    }

    #[test]
    fn algo_names_round_trip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.name()));
        }
        assert!("ppo".parse::<Algo>().is_err());
    }
}
