//! Best-response search on a prefix tree labelled by a strong model's
//! probabilities, comparing token-level and sentence-level feedback.
//!
//! With token feedback a query of a full path reveals every conditional
//! `log π*(y_h | y_{<h})` along it, hence every prefix mass on it. Light
//! prefixes (mass below `A^{−ξ}`) cannot lead to the best response, so whole
//! subtrees get pruned. With sentence feedback only the leaf mass is revealed.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{usage, Error, Result};
use crate::mdp::{NodeId, TreeShape};
use crate::policy::AutoregressivePolicy;

/// Relative slack in the heavy test, so masses equal to `A^{−ξ}` up to rounding count as heavy.
const HEAVY_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PrefixTree {
    shape: TreeShape,
    prompt: usize,
    xi: f64,
    /// `π*(y_{1:h} | x)` by node id; zero outside this prompt's subtree.
    mass: Vec<f64>,
    /// `log π*(y_h | x, y_{<h})` by child node id.
    token_reward: Vec<f64>,
}

/// Members of the two special node sets, sorted by node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSets {
    /// Prefixes whose mass first drops below `A^{−ξ}`.
    pub light: Vec<NodeId>,
    /// Leaves with mass at least `A^{−ξ}`.
    pub heavy_leaves: Vec<NodeId>,
}

impl NodeSets {
    pub fn len(&self) -> usize {
        self.light.len() + self.heavy_leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exploration {
    pub leaf: NodeId,
    pub queries: usize,
}

/// Labels the prompt's subtree with prefix masses. Fails when no leaf reaches `A^{−ξ}`.
pub fn build_tree(pi: &AutoregressivePolicy, prompt: usize, xi: f64) -> Result<PrefixTree> {
    let shape = pi.shape().clone();
    if prompt >= shape.num_prompts() {
        return Err(usage(format!("prompt {prompt} out of range")));
    }
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(usage(format!("ξ must be positive, got {xi}")));
    }
    let mut mass = vec![0.0; shape.num_nodes()];
    let mut token_reward = vec![0.0; shape.num_nodes()];
    let root = shape.root(prompt);
    mass[root] = 1.0;
    let mut stack = vec![root];
    while let Some(s) = stack.pop() {
        if shape.is_terminal(s) {
            continue;
        }
        for c in shape.children(s) {
            mass[c] = mass[s] * pi.prob(c);
            token_reward[c] = pi.log_prob(c);
            stack.push(c);
        }
    }
    let tree = PrefixTree { shape, prompt, xi, mass, token_reward };
    let best = tree.leaves().iter().map(|&l| tree.mass[l]).fold(0.0, f64::max);
    if !tree.is_heavy(best) {
        return Err(Error::Assumption(format!(
            "largest response mass {best:.6e} is below A^-ξ = {:.6e}",
            tree.threshold()
        )));
    }
    Ok(tree)
}

/// Smallest `ξ` for which the tree has a heavy leaf: `−log_A max_y π*(y|x)`.
/// Floored at a tiny positive value when some response has all the mass.
pub fn min_valid_xi(pi: &AutoregressivePolicy, prompt: usize) -> f64 {
    let shape = pi.shape();
    let best = shape.leaves(prompt).into_iter().map(|l| pi.path_log_prob(l)).fold(f64::NEG_INFINITY, f64::max);
    (-best / (shape.vocab_size() as f64).ln()).max(1e-9)
}

impl PrefixTree {
    pub fn shape(&self) -> &TreeShape {
        &self.shape
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn root(&self) -> NodeId {
        self.shape.root(self.prompt)
    }

    pub fn mass(&self, node: NodeId) -> f64 {
        self.mass[node]
    }

    pub fn token_reward(&self, child: NodeId) -> f64 {
        self.token_reward[child]
    }

    /// Sentence reward `log π*(y|x)`, the sum of token rewards along the path.
    pub fn sentence_reward(&self, leaf: NodeId) -> f64 {
        self.shape.path_edges(leaf).iter().map(|&e| self.token_reward[e]).sum()
    }

    pub fn threshold(&self) -> f64 {
        (self.shape.vocab_size() as f64).powf(-self.xi)
    }

    fn is_heavy(&self, m: f64) -> bool {
        m >= self.threshold() * (1.0 - HEAVY_SLACK)
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.shape.leaves(self.prompt)
    }

    /// Leaf with the largest mass; ties go to the smallest id.
    pub fn best_leaf(&self) -> NodeId {
        let mut best = None::<NodeId>;
        for l in self.leaves() {
            if best.is_none_or(|b| self.mass[l] > self.mass[b]) {
                best = Some(l);
            }
        }
        best.expect("a tree has leaves")
    }

    /// The light frontier and heavy leaves, by full traversal.
    pub fn node_sets(&self) -> NodeSets {
        let mut sets = NodeSets { light: Vec::new(), heavy_leaves: Vec::new() };
        let mut stack = vec![self.root()];
        while let Some(s) = stack.pop() {
            if !self.is_heavy(self.mass[s]) {
                sets.light.push(s);
            } else if self.shape.is_terminal(s) {
                sets.heavy_leaves.push(s);
            } else {
                stack.extend(self.shape.children(s));
            }
        }
        sets.light.sort_unstable();
        sets.heavy_leaves.sort_unstable();
        sets
    }

    /// The complexity bound `A^{min(ξ+1, H)}`.
    pub fn token_query_bound(&self) -> f64 {
        (self.shape.vocab_size() as f64).powf((self.xi + 1.0).min(self.shape.horizon() as f64))
    }
}

/// What the explorer has learned so far.
struct Knowledge {
    /// Node masses revealed by queried paths.
    known: Vec<Option<f64>>,
    /// Nodes already identified as light or as heavy leaves; paths through them are not queried again.
    blocked: Vec<bool>,
}

/// Token-feedback exploration. Each query is the lexicographically smallest
/// full path avoiding every identified node; its token rewards reveal the
/// masses along it. The first light node on the path is identified, or the
/// leaf if none is light. Unqueried children of a heavy node are identified as
/// light once the revealed mass of their siblings leaves less than `A^{−ξ}`.
pub fn explore_token(tree: &PrefixTree) -> Exploration {
    let shape = &tree.shape;
    let mut k = Knowledge { known: vec![None; shape.num_nodes()], blocked: vec![false; shape.num_nodes()] };
    let root = tree.root();
    k.known[root] = Some(1.0);
    let mut queries = 0;
    let mut heavy = Vec::new();
    while let Some(leaf) = next_path(shape, root, &k.blocked) {
        queries += 1;
        let mut log_mass = 0.0;
        let mut path = Vec::new();
        for e in shape.path_edges(leaf) {
            log_mass += tree.token_reward(e);
            k.known[e] = Some(log_mass.exp());
            path.push(e);
        }
        match path.iter().find(|&&e| !tree.is_heavy(k.known[e].expect("just revealed"))) {
            Some(&light) => k.blocked[light] = true,
            None => {
                k.blocked[leaf] = true;
                heavy.push(leaf);
            }
        }
        // a heavy node whose remaining mass is light has only light unexplored children
        for s in std::iter::once(root).chain(path.iter().copied()) {
            let m = k.known[s].expect("on the queried path");
            if shape.is_terminal(s) || !tree.is_heavy(m) {
                continue;
            }
            let seen: f64 = shape.children(s).filter_map(|c| k.known[c]).sum();
            if !tree.is_heavy(m - seen) {
                for c in shape.children(s) {
                    if k.known[c].is_none() {
                        k.blocked[c] = true;
                    }
                }
            }
        }
    }
    let leaf = heavy
        .iter()
        .copied()
        .reduce(|b, l| if tree.sentence_reward(l) > tree.sentence_reward(b) { l } else { b })
        .expect("a heavy leaf exists under the dominance assumption");
    Exploration { leaf, queries }
}

/// Smallest unblocked leaf in lexicographic token order, if any.
fn next_path(shape: &TreeShape, node: NodeId, blocked: &[bool]) -> Option<NodeId> {
    if blocked[node] {
        return None;
    }
    if shape.is_terminal(node) {
        return Some(node);
    }
    shape.children(node).find_map(|c| next_path(shape, c, blocked))
}

/// Sentence-feedback search: every response is queried once.
pub fn explore_sentence(tree: &PrefixTree) -> Exploration {
    let leaves = tree.leaves();
    let leaf = leaves
        .iter()
        .copied()
        .reduce(|b, l| if tree.sentence_reward(l) > tree.sentence_reward(b) { l } else { b })
        .expect("a tree has leaves");
    Exploration { leaf, queries: leaves.len() }
}

/// The worked example: `A = 2`, `H = 3`, best response of mass 1/2 along
/// tokens (1, 0, 0). Unspecified subtrees split their mass evenly.
pub fn figure_tree_policy() -> AutoregressivePolicy {
    let shape = TreeShape::new(2, 3, 1, None).expect("valid shape");
    let s1 = shape.node_of(0, &[1]).expect("node");
    let s10 = shape.node_of(0, &[1, 0]).expect("node");
    AutoregressivePolicy::from_conditionals(&shape, |node| {
        if node == shape.root(0) {
            vec![1.0 / 8.0, 7.0 / 8.0]
        } else if node == s1 {
            vec![6.0 / 7.0, 1.0 / 7.0]
        } else if node == s10 {
            vec![2.0 / 3.0, 1.0 / 3.0]
        } else {
            vec![0.5, 0.5]
        }
    })
    .expect("valid conditionals")
}

/// Random `π*` over an `A`-ary depth-`H` tree with a planted response of mass
/// at least `A^{−ξ}`. Conditionals are flat-Dirichlet; along the planted path
/// each conditional is raised to at least `A^{−ξ/H}` and its siblings rescaled.
pub fn planted_tree_policy<R: Rng + ?Sized>(
    vocab: usize,
    horizon: usize,
    xi: f64,
    rng: &mut R,
) -> Result<AutoregressivePolicy> {
    let shape = TreeShape::new(vocab, horizon, 1, None)?;
    let floor = (vocab as f64).powf(-xi / horizon as f64);
    let planted: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..vocab)).collect();
    let planted_leaf = shape.node_of(0, &planted)?;
    let on_path: Vec<NodeId> = shape.path_edges(planted_leaf);
    let mut conds = vec![Vec::new(); shape.num_nodes()];
    for node in shape.decision_nodes() {
        let mut p: Vec<f64> = (0..vocab).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        if let Some(c) = shape.children(node).find(|c| on_path.contains(c)) {
            let a = c - shape.first_child(node);
            if p[a] < floor {
                let rest = 1.0 - p[a];
                for (b, x) in p.iter_mut().enumerate() {
                    *x = if b == a { floor } else { *x * (1.0 - floor) / rest };
                }
            }
        }
        conds[node] = p;
    }
    AutoregressivePolicy::from_conditionals(&shape, |node| {
        if conds[node].is_empty() {
            vec![1.0 / vocab as f64; vocab]
        } else {
            conds[node].clone()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn figure_tree_masses_and_search() {
        let pi = figure_tree_policy();
        let tree = build_tree(&pi, 0, 1.0).unwrap();
        let sh = tree.shape().clone();
        let m = |t: &[usize]| tree.mass(sh.node_of(0, t).unwrap());
        assert!((m(&[0]) - 0.125).abs() < 1e-15 && (m(&[1]) - 0.875).abs() < 1e-15);
        assert!((m(&[1, 0]) - 0.75).abs() < 1e-15 && (m(&[1, 1]) - 0.125).abs() < 1e-15);
        assert!((m(&[1, 0, 0]) - 0.5).abs() < 1e-15 && (m(&[1, 0, 1]) - 0.25).abs() < 1e-15);
        let best = sh.node_of(0, &[1, 0, 0]).unwrap();
        let tok = explore_token(&tree);
        assert_eq!(tok.leaf, best);
        assert!(tok.queries <= 4);
        let sen = explore_sentence(&tree);
        assert_eq!((sen.leaf, sen.queries), (best, 8));
        let sets = tree.node_sets();
        assert_eq!(sets.heavy_leaves, vec![best]);
        assert_eq!(sets.light.len(), 3);
    }

    #[test]
    fn uniform_tree_with_full_xi() {
        let shape = TreeShape::new(2, 3, 1, None).unwrap();
        let tree = build_tree(&AutoregressivePolicy::uniform(&shape), 0, 3.0).unwrap();
        let sets = tree.node_sets();
        assert!(sets.light.is_empty());
        assert_eq!(sets.heavy_leaves.len(), 8);
        assert!(build_tree(&AutoregressivePolicy::uniform(&shape), 0, 2.0).is_err());
    }

    #[test]
    fn single_level_uses_at_most_a_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pi = planted_tree_policy(4, 1, 0.5, &mut rng).unwrap();
            let tree = build_tree(&pi, 0, 0.5).unwrap();
            let out = explore_token(&tree);
            assert!(out.queries <= 4);
            assert_eq!(out.leaf, tree.best_leaf());
            assert_eq!(explore_sentence(&tree).queries, 4);
        }
    }

    #[test]
    fn sentence_reward_is_sum_of_token_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pi = planted_tree_policy(3, 4, 2.0, &mut rng).unwrap();
        let tree = build_tree(&pi, 0, 2.0).unwrap();
        for l in tree.leaves() {
            assert!((tree.sentence_reward(l) - tree.mass(l).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn random_trees_find_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let pi = planted_tree_policy(2, 6, 2.0, &mut rng).unwrap();
            let tree = build_tree(&pi, 0, 2.0).unwrap();
            let brute = tree.best_leaf();
            let tok = explore_token(&tree);
            assert_eq!(tok.leaf, brute);
            assert!(tok.queries as f64 <= tree.token_query_bound(), "{} queries", tok.queries);
            assert_eq!(explore_sentence(&tree).leaf, brute);
            // every root-to-leaf path meets the special sets exactly once
            let sets = tree.node_sets();
            for l in tree.leaves() {
                let mut path = tree.shape().path_edges(l);
                path.insert(0, tree.root());
                let hits = path.iter().filter(|n| sets.light.contains(n) || sets.heavy_leaves.contains(n)).count();
                assert_eq!(hits, 1);
            }
        }
    }

    #[test]
    fn min_xi_is_tight() {
        let pi = figure_tree_policy();
        let xi = min_valid_xi(&pi, 0);
        assert!((xi - 1.0).abs() < 1e-12);
        assert!(build_tree(&pi, 0, xi).is_ok());
        assert!(build_tree(&pi, 0, xi * 0.99).is_err());
    }
}
