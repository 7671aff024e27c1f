//! Bradley–Terry preference simulation and offline preference datasets.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::mdp::{check_shape, NodeId, RewardTable, Token, TokenMdp, TreeShape};
use crate::policy::AutoregressivePolicy;

/// Attempts at drawing two distinct responses before giving up.
pub const MAX_TIE_RESAMPLES: usize = 100;

/// `σ(x)`, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = −log(1 + e^{−x})`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability that a response with total reward `r1` beats one with `r2`.
pub fn bt_prob(r1: f64, r2: f64) -> Result<f64> {
    if !r1.is_finite() || !r2.is_finite() {
        return Err(usage(format!("Bradley-Terry needs finite rewards, got {r1} and {r2}")));
    }
    Ok(sigmoid(r1 - r2))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: usize,
    #[serde(rename = "winner_tokens")]
    pub winner: Vec<Token>,
    #[serde(rename = "loser_tokens")]
    pub loser: Vec<Token>,
}

impl PreferencePair {
    /// Terminal nodes of the winner and loser responses.
    pub fn nodes(&self, shape: &TreeShape) -> Result<(NodeId, NodeId)> {
        let w = complete_node(shape, self.prompt, &self.winner)?;
        let l = complete_node(shape, self.prompt, &self.loser)?;
        Ok((w, l))
    }

    pub fn mirrored(&self) -> Self {
        PreferencePair { prompt: self.prompt, winner: self.loser.clone(), loser: self.winner.clone() }
    }
}

fn complete_node(shape: &TreeShape, prompt: usize, tokens: &[Token]) -> Result<NodeId> {
    let node = shape.node_of(prompt, tokens)?;
    if !shape.is_reachable(node) || !shape.is_terminal(node) {
        return Err(usage(format!("response {tokens:?} is not a complete response")));
    }
    Ok(node)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub reward: String,
    #[serde(default)]
    pub sampler: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    /// Per-pair weights; `None` means every pair counts once.
    pub weights: Option<Vec<f64>>,
    pub metadata: DatasetMetadata,
}

#[derive(Serialize, Deserialize)]
struct Record {
    prompt: usize,
    winner_tokens: Vec<Token>,
    loser_tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

impl PreferenceDataset {
    pub fn new(pairs: Vec<PreferencePair>) -> Self {
        PreferenceDataset { pairs, weights: None, metadata: DatasetMetadata::default() }
    }

    pub fn weighted(pairs: Vec<PreferencePair>, weights: Vec<f64>) -> Result<Self> {
        if pairs.len() != weights.len() {
            return Err(usage("one weight per pair is required"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(usage("pair weights must be finite and non-negative"));
        }
        Ok(PreferenceDataset { pairs, weights: Some(weights), metadata: DatasetMetadata::default() })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.as_ref().map_or(self.pairs.len() as f64, |w| w.iter().sum())
    }

    /// Iterates `(weight, winner node, loser node)`.
    pub fn resolved(&self, shape: &TreeShape) -> Result<Vec<(f64, NodeId, NodeId)>> {
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, p)| p.nodes(shape).map(|(w, l)| (self.weight(i), w, l)))
            .collect()
    }

    /// Checks that every response is complete and pairs share their prompt.
    pub fn validate(&self, shape: &TreeShape) -> Result<()> {
        self.resolved(shape).map(|_| ())
    }

    /// Dataset extended with every pair's label-flipped mirror.
    pub fn with_mirrors(&self) -> Self {
        let mut pairs = self.pairs.clone();
        pairs.extend(self.pairs.iter().map(PreferencePair::mirrored));
        let weights = self.weights.as_ref().map(|w| w.iter().chain(w.iter()).cloned().collect());
        PreferenceDataset { pairs, weights, metadata: self.metadata.clone() }
    }

    /// Merges identical pairs into weights; pair order becomes sorted.
    pub fn compact(&self) -> Self {
        let mut merged: BTreeMap<&PreferencePair, f64> = BTreeMap::new();
        for (i, p) in self.pairs.iter().enumerate() {
            *merged.entry(p).or_insert(0.0) += self.weight(i);
        }
        let (pairs, weights) = merged.into_iter().map(|(p, w)| (p.clone(), w)).unzip();
        PreferenceDataset { pairs, weights: Some(weights), metadata: self.metadata.clone() }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            let record = Record {
                prompt: p.prompt,
                winner_tokens: p.winner.clone(),
                loser_tokens: p.loser.clone(),
                weight: self.weights.as_ref().map(|w| w[i]),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut weights = Vec::new();
        let mut any_weight = false;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("dataset line {}: {e}", lineno + 1)))?;
            any_weight |= record.weight.is_some();
            weights.push(record.weight.unwrap_or(1.0));
            pairs.push(PreferencePair { prompt: record.prompt, winner: record.winner_tokens, loser: record.loser_tokens });
        }
        if any_weight {
            Self::weighted(pairs, weights)
        } else {
            Ok(Self::new(pairs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

/// Two independent responses to one prompt and the simulated label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPair {
    pub prompt: usize,
    pub first: NodeId,
    pub second: NodeId,
    pub first_wins: bool,
}

impl SampledPair {
    pub fn to_pair(&self, shape: &TreeShape) -> PreferencePair {
        let (w, l) = if self.first_wins { (self.first, self.second) } else { (self.second, self.first) };
        PreferencePair { prompt: self.prompt, winner: shape.tokens_of(w), loser: shape.tokens_of(l) }
    }
}

/// Draws a prompt from `ρ`, two distinct responses from `sampler`, and a BT label
/// from the summed token rewards.
pub fn sample_pair<R: Rng + ?Sized>(
    mdp: &TokenMdp,
    reward: &RewardTable,
    sampler: &AutoregressivePolicy,
    rng: &mut R,
) -> Result<SampledPair> {
    let shape = mdp.shape();
    let prompt = mdp.sample_prompt(rng);
    let first = sampler.sample_leaf(prompt, rng);
    let mut second = sampler.sample_leaf(prompt, rng);
    let mut attempts = 1;
    while second == first {
        if attempts >= MAX_TIE_RESAMPLES {
            return Err(Error::Config(format!(
                "sampler produced identical responses {MAX_TIE_RESAMPLES} times for prompt {prompt}"
            )));
        }
        second = sampler.sample_leaf(prompt, rng);
        attempts += 1;
    }
    let p = bt_prob(reward.path_sum(shape, first), reward.path_sum(shape, second))?;
    let first_wins = rng.random::<f64>() < p;
    Ok(SampledPair { prompt, first, second, first_wins })
}

/// `n` labelled pairs under the trajectory-level BT model.
pub fn sample_dataset<R: Rng + ?Sized>(
    mdp: &TokenMdp,
    reward: &RewardTable,
    sampler: &AutoregressivePolicy,
    n: usize,
    rng: &mut R,
) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(usage("dataset size must be at least 1"));
    }
    check_shape(mdp.shape(), sampler.shape())?;
    let pairs = (0..n)
        .map(|_| sample_pair(mdp, reward, sampler, rng).map(|s| s.to_pair(mdp.shape())))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreferenceDataset::new(pairs))
}

/// Exact pair distribution of [`sample_dataset`]: every ordered pair of distinct
/// responses `(y, y')` gets weight `2 ρ(x) π(y|x) π(y'|x) σ(r(y) − r(y'))`,
/// normalized over non-tied draws.
pub fn population_dataset(
    mdp: &TokenMdp,
    reward: &RewardTable,
    sampler: &AutoregressivePolicy,
) -> Result<PreferenceDataset> {
    let shape = mdp.shape();
    check_shape(shape, sampler.shape())?;
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for prompt in 0..shape.num_prompts() {
        let rho = mdp.initial_dist()[prompt];
        if rho == 0.0 {
            continue;
        }
        let leaves = shape.leaves(prompt);
        let probs: Vec<f64> = leaves.iter().map(|&l| sampler.path_log_prob(l).exp()).collect();
        let tie: f64 = probs.iter().map(|p| p * p).sum();
        if tie >= 1.0 - 1e-15 {
            return Err(Error::Config(format!("sampler is deterministic at prompt {prompt}; no distinct pairs")));
        }
        let sums: Vec<f64> = leaves.iter().map(|&l| reward.path_sum(shape, l)).collect();
        for i in 0..leaves.len() {
            for j in 0..leaves.len() {
                if i == j {
                    continue;
                }
                let w = 2.0 * rho * probs[i] * probs[j] * bt_prob(sums[i], sums[j])? / (1.0 - tie);
                if w > 0.0 {
                    pairs.push(PreferencePair {
                        prompt,
                        winner: shape.tokens_of(leaves[i]),
                        loser: shape.tokens_of(leaves[j]),
                    });
                    weights.push(w);
                }
            }
        }
    }
    PreferenceDataset::weighted(pairs, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bandit(gap: f64) -> TokenMdp {
        let shape = TreeShape::new(2, 1, 1, None).unwrap();
        let reward = RewardTable::from_fn(&shape, |_, _, a| if a == 0 { gap } else { 0.0 });
        TokenMdp::with_uniform_prompts(shape, reward).unwrap()
    }

    #[test]
    fn bt_prob_examples() {
        assert_eq!(bt_prob(1.0, 1.0).unwrap(), 0.5);
        assert!((bt_prob(3f64.ln(), 0.0).unwrap() - 0.75).abs() < 1e-15);
        assert!((bt_prob(0.0, 3f64.ln()).unwrap() - 0.25).abs() < 1e-15);
        assert!(bt_prob(f64::NAN, 0.0).is_err());
        assert!(bt_prob(800.0, -800.0).unwrap() <= 1.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn zero_reward_is_a_coin_flip() {
        let mdp = bandit(0.0);
        let zero = RewardTable::zeros(mdp.shape());
        let sampler = AutoregressivePolicy::uniform(mdp.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let wins = (0..n).filter(|_| sample_pair(&mdp, &zero, &sampler, &mut rng).unwrap().first_wins).count();
        let rate = wins as f64 / n as f64;
        assert!((rate - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn better_response_wins_three_quarters() {
        let mdp = bandit(3f64.ln());
        let sampler = AutoregressivePolicy::uniform(mdp.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 20_000;
        let data = sample_dataset(&mdp, mdp.reward(), &sampler, n, &mut rng).unwrap();
        let better = data.pairs.iter().filter(|p| p.winner == vec![0]).count();
        let rate = better as f64 / n as f64;
        assert!((rate - 0.75).abs() < 3.0 * (0.75 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn deterministic_sampler_is_rejected() {
        let mdp = bandit(1.0);
        let sampler = AutoregressivePolicy::from_conditionals(mdp.shape(), |_| vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(matches!(sample_dataset(&mdp, mdp.reward(), &sampler, 1, &mut rng), Err(Error::Config(_))));
        assert!(population_dataset(&mdp, mdp.reward(), &sampler).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let shape = TreeShape::new(3, 3, 2, Some(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let reward = RewardTable::from_edge_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let mdp = TokenMdp::with_uniform_prompts(shape.clone(), reward).unwrap();
        let sampler = AutoregressivePolicy::uniform(&shape);
        let data = sample_dataset(&mdp, mdp.reward(), &sampler, 200, &mut rng).unwrap();
        let text = data.to_jsonl();
        let back = PreferenceDataset::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back.pairs, data.pairs);
        assert_eq!(back.to_jsonl(), text);
        let pop = population_dataset(&mdp, mdp.reward(), &sampler).unwrap();
        let ptext = pop.to_jsonl();
        assert_eq!(PreferenceDataset::read_jsonl(ptext.as_bytes()).unwrap(), pop);
        assert!((pop.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_dataset() {
        let mdp = bandit(0.4);
        let sampler = AutoregressivePolicy::uniform(mdp.shape());
        let a = sample_dataset(&mdp, mdp.reward(), &sampler, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_dataset(&mdp, mdp.reward(), &sampler, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn compaction_preserves_weight() {
        let mdp = bandit(0.4);
        let sampler = AutoregressivePolicy::uniform(mdp.shape());
        let data = sample_dataset(&mdp, mdp.reward(), &sampler, 500, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = data.compact();
        assert!(c.len() <= 2);
        assert_eq!(c.total_weight(), 500.0);
    }
}
