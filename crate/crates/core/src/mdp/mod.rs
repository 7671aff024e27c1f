//! Token-level MDPs: states are a prompt plus the tokens generated so far,
//! actions are tokens, and the deterministic transition appends the token.

mod config;
mod reward;
mod shape;
mod stochastic;

pub use config::{Instance, MdpConfig, RewardConfig, TransitionConfig};
pub use reward::RewardTable;
pub use shape::{NodeId, ShapeSpec, Token, TreeShape, DEFAULT_EXACT_CAP};
pub use stochastic::{StochasticMdp, StochasticPolicy, StochasticValues};

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::policy::AutoregressivePolicy;

/// A prompt id together with the response tokens produced so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State {
    pub prompt: usize,
    pub tokens: Vec<Token>,
}

/// A complete (or partial) response. Per-step rewards, when filled, always
/// have length `H`; steps after EoS carry zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: usize,
    pub tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step_rewards: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(prompt: usize, tokens: Vec<Token>) -> Self {
        Trajectory { prompt, tokens, per_step_rewards: None }
    }

    /// Node reached after the last token.
    pub fn node(&self, shape: &TreeShape) -> Result<NodeId> {
        let node = shape.node_of(self.prompt, &self.tokens)?;
        if !shape.is_reachable(node) {
            return Err(usage("trajectory continues past an EoS token"));
        }
        Ok(node)
    }

    /// The trajectory ends in a terminal state (horizon reached or EoS emitted).
    pub fn is_complete(&self, shape: &TreeShape) -> bool {
        self.node(shape).map(|n| shape.is_terminal(n)).unwrap_or(false)
    }

    /// Edge ids `(s_h, a_h)` visited, in order.
    pub fn edges(&self, shape: &TreeShape) -> Result<Vec<NodeId>> {
        Ok(shape.path_edges(self.node(shape)?))
    }

    /// Rewards padded to length `H` with zeros on absorbing steps.
    pub fn padded_rewards(&self, shape: &TreeShape, reward: &RewardTable) -> Result<Vec<f64>> {
        let mut out = vec![0.0; shape.horizon()];
        for (h, e) in self.edges(shape)?.into_iter().enumerate() {
            out[h] = reward.edge(e);
        }
        Ok(out)
    }

    pub fn with_rewards(mut self, shape: &TreeShape, reward: &RewardTable) -> Result<Self> {
        self.per_step_rewards = Some(self.padded_rewards(shape, reward)?);
        Ok(self)
    }
}

/// Deterministic token MDP `(S, A, P, r, ρ, H)` over a prefix tree.
#[derive(Debug, Clone)]
pub struct TokenMdp {
    shape: TreeShape,
    prompts: Vec<String>,
    initial_dist: Vec<f64>,
    reward: RewardTable,
}

impl TokenMdp {
    pub fn new(shape: TreeShape, prompts: Vec<String>, initial_dist: Vec<f64>, reward: RewardTable) -> Result<Self> {
        if prompts.len() != shape.num_prompts() || initial_dist.len() != shape.num_prompts() {
            return Err(usage(format!(
                "shape has {} prompts but {} names and {} initial probabilities were given",
                shape.num_prompts(),
                prompts.len(),
                initial_dist.len()
            )));
        }
        if initial_dist.iter().any(|&p| !(p >= 0.0)) {
            return Err(usage("initial distribution has negative or NaN entries"));
        }
        let total: f64 = initial_dist.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(usage(format!("initial distribution sums to {total}, not 1")));
        }
        if reward.values().len() != shape.num_nodes() {
            return Err(usage("reward table does not match the tree"));
        }
        Ok(TokenMdp { shape, prompts, initial_dist, reward })
    }

    /// Single-prompt or multi-prompt MDP with uniform ρ and generated prompt names.
    pub fn with_uniform_prompts(shape: TreeShape, reward: RewardTable) -> Result<Self> {
        let n = shape.num_prompts();
        let prompts = (0..n).map(|p| format!("x{p}")).collect();
        Self::new(shape, prompts, vec![1.0 / n as f64; n], reward)
    }

    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn reward(&self) -> &RewardTable {
        &self.reward
    }

    pub fn with_reward(&self, reward: RewardTable) -> Result<Self> {
        Self::new(self.shape.clone(), self.prompts.clone(), self.initial_dist.clone(), reward)
    }

    pub fn sample_prompt<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (p, &w) in self.initial_dist.iter().enumerate() {
            acc += w;
            if u < acc {
                return p;
            }
        }
        self.initial_dist.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// One environment step. EoS-terminated states are absorbing with zero reward;
    /// stepping from a length-`H` state is a usage error.
    pub fn step(&self, state: &State, action: Token) -> Result<(State, f64)> {
        if action >= self.shape.vocab_size() {
            return Err(usage(format!("action {action} out of range")));
        }
        let node = self.shape.node_of(state.prompt, &state.tokens)?;
        if !self.shape.is_reachable(node) {
            return Err(usage("state continues past an EoS token"));
        }
        if self.shape.is_terminal(node) {
            if self.shape.depth(node) < self.shape.horizon() || self.ends_with_eos(node) {
                return Ok((state.clone(), 0.0));
            }
            return Err(usage("cannot step from a terminal state"));
        }
        let child = self.shape.child(node, action);
        let mut tokens = state.tokens.clone();
        tokens.push(action);
        Ok((State { prompt: state.prompt, tokens }, self.reward.edge(child)))
    }

    fn ends_with_eos(&self, node: NodeId) -> bool {
        self.shape.eos().is_some() && self.shape.last_token(node) == self.shape.eos()
    }

    /// All complete responses for `prompt`, each exactly once, in lexicographic order.
    pub fn enumerate_trajectories(&self, prompt: usize) -> Result<impl Iterator<Item = Trajectory> + '_> {
        if prompt >= self.shape.num_prompts() {
            return Err(usage(format!("prompt {prompt} out of range")));
        }
        Ok(self
            .shape
            .leaves(prompt)
            .into_iter()
            .map(move |leaf| Trajectory::new(prompt, self.shape.tokens_of(leaf))))
    }

    /// Exact state and state-action visitation measures of `policy`.
    pub fn visitation(&self, policy: &AutoregressivePolicy) -> Result<VisitationMeasure> {
        check_shape(&self.shape, policy.shape())?;
        let n = self.shape.num_nodes();
        let mut reach = vec![0.0; n];
        for p in 0..self.shape.num_prompts() {
            reach[self.shape.root(p)] = self.initial_dist[p];
        }
        for node in self.shape.decision_nodes() {
            let r = reach[node];
            if r == 0.0 {
                continue;
            }
            for c in self.shape.children(node) {
                reach[c] = r * policy.prob(c);
            }
        }
        Ok(VisitationMeasure { shape: self.shape.clone(), reach })
    }
}

pub(crate) fn check_shape(a: &TreeShape, b: &TreeShape) -> Result<()> {
    if a != b {
        return Err(Error::Usage(format!("tree shapes differ: {:?} vs {:?}", a.spec(), b.spec())));
    }
    Ok(())
}

/// `d^π(s)` and `d^π(s, a)`. For a prefix tree every node is visited at most once per
/// episode, so both are the probability of reaching the corresponding node.
#[derive(Debug, Clone)]
pub struct VisitationMeasure {
    shape: TreeShape,
    reach: Vec<f64>,
}

impl VisitationMeasure {
    /// `d^π(s)` for decision states; zero elsewhere.
    pub fn state(&self, node: NodeId) -> f64 {
        if self.shape.is_decision_node(node) {
            self.reach[node]
        } else {
            0.0
        }
    }

    /// `d^π(s, a)` for the edge into `child`.
    pub fn state_action(&self, child: NodeId) -> f64 {
        match self.shape.parent(child) {
            Some(p) if self.shape.is_decision_node(p) => self.reach[child],
            _ => 0.0,
        }
    }

    /// Probability that the episode passes through `node`.
    pub fn reach(&self, node: NodeId) -> f64 {
        self.reach[node]
    }

    /// Iterates `(edge, d^π(s, a))` over all reachable edges.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.shape
            .decision_nodes()
            .flat_map(move |s| self.shape.children(s).map(move |c| (c, self.reach[c])))
    }

    /// Total state-action mass, the expected episode length.
    pub fn total_mass(&self) -> f64 {
        self.edges().map(|(_, w)| w).sum()
    }

    /// `E_{(s,a)~d^π}[f(edge)]` (unnormalized, as in the value identity).
    pub fn expect_edges(&self, mut f: impl FnMut(NodeId) -> f64) -> f64 {
        self.edges().map(|(e, w)| if w == 0.0 { 0.0 } else { w * f(e) }).sum()
    }

    /// `E_{s~d^π}[f(s)]` over decision states.
    pub fn expect_states(&self, mut f: impl FnMut(NodeId) -> f64) -> f64 {
        self.shape
            .decision_nodes()
            .map(|s| if self.reach[s] == 0.0 { 0.0 } else { self.reach[s] * f(s) })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mdp(a: usize, h: usize, eos: Option<Token>) -> TokenMdp {
        let shape = TreeShape::new(a, h, 1, eos).unwrap();
        let reward = RewardTable::from_fn(&shape, |_, prefix, a| (prefix.len() * 10 + a) as f64);
        TokenMdp::with_uniform_prompts(shape, reward).unwrap()
    }

    #[test]
    fn step_concatenates() {
        let m = mdp(8, 4, None);
        let s = State { prompt: 0, tokens: vec![2, 5] };
        let (next, r) = m.step(&s, 7).unwrap();
        assert_eq!(next.tokens, vec![2, 5, 7]);
        assert_eq!(r, 27.0);
    }

    #[test]
    fn eos_is_absorbing() {
        let m = mdp(3, 3, Some(1));
        let s = State { prompt: 0, tokens: vec![2, 1] };
        let (next, r) = m.step(&s, 0).unwrap();
        assert_eq!(next, s);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn step_errors() {
        let m = mdp(2, 2, None);
        assert!(m.step(&State { prompt: 0, tokens: vec![0, 1] }, 0).is_err());
        assert!(m.step(&State { prompt: 0, tokens: vec![] }, 2).is_err());
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(mdp(2, 3, None).enumerate_trajectories(0).unwrap().count(), 8);
        assert_eq!(mdp(2, 1, None).enumerate_trajectories(0).unwrap().count(), 2);
        assert_eq!(mdp(3, 2, Some(0)).enumerate_trajectories(0).unwrap().count(), 7);
    }

    #[test]
    fn padded_rewards_have_horizon_length() {
        let m = mdp(3, 3, Some(0));
        let t = Trajectory::new(0, vec![2, 0]);
        let r = t.padded_rewards(m.shape(), m.reward()).unwrap();
        assert_eq!(r, vec![2.0, 10.0, 0.0]);
        assert!(t.is_complete(m.shape()));
    }

    #[test]
    fn uniform_visitation() {
        let m = mdp(2, 2, None);
        let pi = AutoregressivePolicy::uniform(m.shape());
        let d = m.visitation(&pi).unwrap();
        let s = m.shape();
        for a in 0..2 {
            assert_eq!(d.state_action(s.node_of(0, &[a]).unwrap()), 0.5);
            for b in 0..2 {
                assert_eq!(d.state_action(s.node_of(0, &[a, b]).unwrap()), 0.25);
            }
        }
        assert!((d.total_mass() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_policy_visits_one_path() {
        let m = mdp(2, 3, None);
        let s = m.shape().clone();
        let pi = AutoregressivePolicy::from_conditionals(&s, |_| vec![0.0, 1.0]).unwrap();
        let d = m.visitation(&pi).unwrap();
        let support: Vec<_> = d.edges().filter(|&(_, w)| w > 0.0).collect();
        assert_eq!(support.len(), 3);
        assert!(support.iter().all(|&(_, w)| w == 1.0));
    }
}
