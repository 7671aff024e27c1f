//! Canonical integer encoding of the per-prompt prefix tree.
//!
//! Every prefix `(x, y_1..y_h)` with `h <= H` gets a dense id. Within one
//! prompt the ids are laid out level by level: the depth-`h` block starts at
//! `(A^h - 1) / (A - 1)` and a prefix's position inside the block is its
//! tokens read as a base-`A` number. Prompts are stacked one block after the
//! other. Children of a node are therefore contiguous, and the edge
//! `(s, a)` is identified with the id of the child `s ⊕ a`; per-edge tables
//! (rewards, Q-values, conditionals) are plain vectors indexed by node id
//! whose root entries are unused.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

pub type Token = usize;
pub type NodeId = usize;

/// Default bound on `A^H` for exact enumeration and planning.
pub const DEFAULT_EXACT_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ShapeSpec", into = "ShapeSpec")]
pub struct TreeShape {
    vocab_size: usize,
    horizon: usize,
    num_prompts: usize,
    eos: Option<Token>,
    level_offsets: Vec<usize>,
    local_depth: Vec<u8>,
    local_reachable: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ShapeSpec {
    pub vocab_size: usize,
    pub horizon: usize,
    pub num_prompts: usize,
    #[serde(default)]
    pub eos_token: Option<Token>,
}

impl PartialEq for TreeShape {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.horizon == other.horizon
            && self.num_prompts == other.num_prompts
            && self.eos == other.eos
    }
}

impl TryFrom<ShapeSpec> for TreeShape {
    type Error = Error;

    fn try_from(spec: ShapeSpec) -> Result<Self> {
        TreeShape::new(spec.vocab_size, spec.horizon, spec.num_prompts, spec.eos_token)
    }
}

impl From<TreeShape> for ShapeSpec {
    fn from(shape: TreeShape) -> Self {
        shape.spec()
    }
}

impl TreeShape {
    pub fn new(vocab_size: usize, horizon: usize, num_prompts: usize, eos: Option<Token>) -> Result<Self> {
        Self::with_cap(vocab_size, horizon, num_prompts, eos, DEFAULT_EXACT_CAP)
    }

    /// Builds the shape, rejecting instances whose leaf count `A^H` exceeds `cap`.
    pub fn with_cap(
        vocab_size: usize,
        horizon: usize,
        num_prompts: usize,
        eos: Option<Token>,
        cap: u64,
    ) -> Result<Self> {
        if vocab_size == 0 || horizon == 0 || num_prompts == 0 {
            return Err(usage("vocab_size, horizon and num_prompts must be positive"));
        }
        if let Some(e) = eos {
            if e >= vocab_size {
                return Err(usage(format!("eos token {e} outside vocabulary of size {vocab_size}")));
            }
        }
        let leaves = (vocab_size as u64).checked_pow(horizon as u32);
        match leaves {
            Some(n) if n <= cap => {}
            _ => {
                return Err(Error::Unsupported(format!(
                    "exact mode needs A^H <= {cap}, got A={vocab_size}, H={horizon}"
                )))
            }
        }
        let mut level_offsets = Vec::with_capacity(horizon + 2);
        let mut offset = 0usize;
        let mut width = 1usize;
        for _ in 0..=horizon {
            level_offsets.push(offset);
            offset += width;
            width *= vocab_size;
        }
        level_offsets.push(offset);
        let per_prompt = offset;

        let mut local_depth = vec![0u8; per_prompt];
        for h in 0..=horizon {
            for d in &mut local_depth[level_offsets[h]..level_offsets[h + 1]] {
                *d = h as u8;
            }
        }
        let mut shape = TreeShape {
            vocab_size,
            horizon,
            num_prompts,
            eos,
            level_offsets,
            local_depth,
            local_reachable: Vec::new(),
        };
        let mut reachable = vec![false; per_prompt];
        reachable[0] = true;
        for local in 0..per_prompt {
            if reachable[local] && !shape.local_is_terminal(local) {
                let first = shape.local_first_child(local);
                for r in &mut reachable[first..first + vocab_size] {
                    *r = true;
                }
            }
        }
        shape.local_reachable = reachable;
        Ok(shape)
    }

    pub fn spec(&self) -> ShapeSpec {
        ShapeSpec {
            vocab_size: self.vocab_size,
            horizon: self.horizon,
            num_prompts: self.num_prompts,
            eos_token: self.eos,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn eos(&self) -> Option<Token> {
        self.eos
    }

    pub fn nodes_per_prompt(&self) -> usize {
        self.level_offsets[self.horizon + 1]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_per_prompt() * self.num_prompts
    }

    /// Number of `(state, action)` edges in the full tree (one per non-root node).
    pub fn num_edges(&self) -> usize {
        self.num_nodes() - self.num_prompts
    }

    /// Dense ordinal of an edge in `0..num_edges()`.
    pub fn edge_ordinal(&self, child: NodeId) -> usize {
        let p = self.prompt_of(child);
        let local = child - p * self.nodes_per_prompt();
        debug_assert!(local > 0, "root is not an edge");
        p * (self.nodes_per_prompt() - 1) + local - 1
    }

    pub fn root(&self, prompt: usize) -> NodeId {
        prompt * self.nodes_per_prompt()
    }

    pub fn prompt_of(&self, node: NodeId) -> usize {
        node / self.nodes_per_prompt()
    }

    fn local(&self, node: NodeId) -> usize {
        node % self.nodes_per_prompt()
    }

    pub fn depth(&self, node: NodeId) -> usize {
        self.local_depth[self.local(node)] as usize
    }

    fn local_first_child(&self, local: usize) -> usize {
        let h = self.local_depth[local] as usize;
        let idx = local - self.level_offsets[h];
        self.level_offsets[h + 1] + idx * self.vocab_size
    }

    fn local_last_token(&self, local: usize) -> Option<Token> {
        let h = self.local_depth[local] as usize;
        (h > 0).then(|| (local - self.level_offsets[h]) % self.vocab_size)
    }

    fn local_is_terminal(&self, local: usize) -> bool {
        let h = self.local_depth[local] as usize;
        h == self.horizon || (self.eos.is_some() && self.local_last_token(local) == self.eos)
    }

    /// First child id; only meaningful for nodes with depth `< H`.
    pub fn first_child(&self, node: NodeId) -> NodeId {
        let p = self.prompt_of(node);
        p * self.nodes_per_prompt() + self.local_first_child(self.local(node))
    }

    pub fn child(&self, node: NodeId, token: Token) -> NodeId {
        self.first_child(node) + token
    }

    pub fn children(&self, node: NodeId) -> std::ops::Range<NodeId> {
        let first = self.first_child(node);
        first..first + self.vocab_size
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        let local = self.local(node);
        let h = self.local_depth[local] as usize;
        if h == 0 {
            return None;
        }
        let idx = local - self.level_offsets[h];
        let parent_local = self.level_offsets[h - 1] + idx / self.vocab_size;
        Some(self.prompt_of(node) * self.nodes_per_prompt() + parent_local)
    }

    /// Token of the edge leading into `node`, `None` at a root.
    pub fn last_token(&self, node: NodeId) -> Option<Token> {
        self.local_last_token(self.local(node))
    }

    /// No further tokens are generated: the horizon is reached or the prefix ends with EoS.
    pub fn is_terminal(&self, node: NodeId) -> bool {
        self.local_is_terminal(self.local(node))
    }

    /// Reachable from the root without passing through an EoS-terminated prefix.
    pub fn is_reachable(&self, node: NodeId) -> bool {
        self.local_reachable[self.local(node)]
    }

    /// Reachable, non-terminal states: the states at which a policy acts.
    pub fn is_decision_node(&self, node: NodeId) -> bool {
        let local = self.local(node);
        self.local_reachable[local] && !self.local_is_terminal(local)
    }

    pub fn node_of(&self, prompt: usize, tokens: &[Token]) -> Result<NodeId> {
        if prompt >= self.num_prompts {
            return Err(usage(format!("prompt {prompt} out of range")));
        }
        if tokens.len() > self.horizon {
            return Err(usage(format!("prefix of length {} exceeds horizon {}", tokens.len(), self.horizon)));
        }
        let mut idx = 0usize;
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(usage(format!("token {t} outside vocabulary of size {}", self.vocab_size)));
            }
            idx = idx * self.vocab_size + t;
        }
        Ok(prompt * self.nodes_per_prompt() + self.level_offsets[tokens.len()] + idx)
    }

    pub fn tokens_of(&self, node: NodeId) -> Vec<Token> {
        let local = self.local(node);
        let h = self.local_depth[local] as usize;
        let mut idx = local - self.level_offsets[h];
        let mut tokens = vec![0; h];
        for slot in tokens.iter_mut().rev() {
            *slot = idx % self.vocab_size;
            idx /= self.vocab_size;
        }
        tokens
    }

    /// Ids of decision nodes in increasing (top-down) order.
    pub fn decision_nodes(&self) -> impl DoubleEndedIterator<Item = NodeId> + '_ {
        (0..self.num_nodes()).filter(move |&n| self.is_decision_node(n))
    }

    /// Ids of reachable nodes in increasing (top-down) order.
    pub fn reachable_nodes(&self) -> impl DoubleEndedIterator<Item = NodeId> + '_ {
        (0..self.num_nodes()).filter(move |&n| self.is_reachable(n))
    }

    /// Reachable terminal nodes, i.e. the complete responses, per prompt in lexicographic order
    /// of the padded token sequence.
    pub fn leaves(&self, prompt: usize) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.root(prompt)];
        while let Some(node) = stack.pop() {
            if self.is_terminal(node) {
                out.push(node);
            } else {
                for c in self.children(node).rev() {
                    stack.push(c);
                }
            }
        }
        out
    }

    /// Edges (child ids) from the root to `node`, in order.
    pub fn path_edges(&self, node: NodeId) -> Vec<NodeId> {
        let mut edges = Vec::with_capacity(self.depth(node));
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            edges.push(cur);
            cur = p;
        }
        edges.reverse();
        edges
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_round_trips() {
        let shape = TreeShape::new(3, 3, 2, None).unwrap();
        assert_eq!(shape.nodes_per_prompt(), 1 + 3 + 9 + 27);
        for node in 0..shape.num_nodes() {
            let tokens = shape.tokens_of(node);
            assert_eq!(shape.node_of(shape.prompt_of(node), &tokens).unwrap(), node);
            if let Some(p) = shape.parent(node) {
                assert_eq!(shape.child(p, *tokens.last().unwrap()), node);
            }
        }
    }

    #[test]
    fn eos_descendants_are_unreachable() {
        let shape = TreeShape::new(3, 2, 1, Some(0)).unwrap();
        let eos_node = shape.node_of(0, &[0]).unwrap();
        assert!(shape.is_terminal(eos_node));
        assert!(shape.is_reachable(eos_node));
        for c in shape.children(eos_node) {
            assert!(!shape.is_reachable(c));
        }
        assert_eq!(shape.leaves(0).len(), 7);
    }

    #[test]
    fn cap_is_enforced() {
        assert!(matches!(TreeShape::new(2, 21, 1, None), Err(Error::Unsupported(_))));
        assert!(TreeShape::with_cap(2, 21, 1, None, 1 << 21).is_ok());
        assert!(TreeShape::new(4, 3, 1, Some(4)).is_err());
    }
}
