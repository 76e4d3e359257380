//! Page-size-1 prefix trie holding per-token KV residency and ownership.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use super::AgentId;
use crate::Token;

pub type NodeId = usize;

pub const ROOT: NodeId = 0;

#[derive(Clone, Debug)]
pub struct Node {
    pub token: Token,
    pub parent: NodeId,
    pub children: BTreeMap<Token, NodeId>,
    pub owner: AgentId,
    pub last_access: u64,
    pub pins: u32,
    pub depth: usize,
    live: bool,
}

/// One evicted token, in eviction order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub node: NodeId,
    pub token: Token,
    pub owner: AgentId,
    pub last_access: u64,
    pub depth: usize,
}

/// Owner-attributed prefix match.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrefixMatch {
    pub len: usize,
    /// Node of the last matched token (`ROOT` when nothing matched).
    pub node: NodeId,
    /// Matched token counts per owning agent, in owner order.
    pub by_owner: BTreeMap<AgentId, usize>,
}

#[derive(Clone, Debug)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    free: Vec<NodeId>,
    resident: usize,
    clock: u64,
}

impl Default for PrefixTrie {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefixTrie {
    pub fn new() -> Self {
        let root = Node {
            token: 0,
            parent: ROOT,
            children: BTreeMap::new(),
            owner: AgentId(u32::MAX),
            last_access: 0,
            pins: 0,
            depth: 0,
            live: true,
        };
        Self {
            nodes: vec![root],
            free: Vec::new(),
            resident: 0,
            clock: 0,
        }
    }

    /// Number of resident tokens (the root holds none).
    pub fn resident(&self) -> usize {
        self.resident
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// Advances the logical clock; every request touches the trie at a new time.
    pub fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        id < self.nodes.len() && self.nodes[id].live
    }

    pub fn child(&self, parent: NodeId, token: Token) -> Option<NodeId> {
        self.nodes[parent].children.get(&token).copied()
    }

    /// Longest resident prefix of `tokens` without touching access times.
    pub fn peek_len(&self, tokens: &[Token]) -> usize {
        let mut cur = ROOT;
        let mut n = 0;
        for &t in tokens {
            match self.child(cur, t) {
                Some(c) => {
                    cur = c;
                    n += 1;
                }
                None => break,
            }
        }
        n
    }

    /// Longest resident prefix; stamps `last_access` along the path.
    pub fn match_prefix(&mut self, tokens: &[Token]) -> PrefixMatch {
        let now = self.clock;
        let mut m = PrefixMatch::default();
        let mut cur = ROOT;
        for &t in tokens {
            let Some(c) = self.child(cur, t) else { break };
            let node = &mut self.nodes[c];
            node.last_access = now;
            *m.by_owner.entry(node.owner).or_default() += 1;
            cur = c;
            m.len += 1;
        }
        m.node = cur;
        m
    }

    /// Appends `token` under `parent`, returning the existing child when present.
    /// The caller is responsible for capacity.
    pub fn add_child(&mut self, parent: NodeId, token: Token, owner: AgentId) -> (NodeId, bool) {
        let now = self.clock;
        if let Some(c) = self.child(parent, token) {
            self.nodes[c].last_access = now;
            return (c, false);
        }
        let node = Node {
            token,
            parent,
            children: BTreeMap::new(),
            owner,
            last_access: now,
            pins: 0,
            depth: self.nodes[parent].depth + 1,
            live: true,
        };
        let id = match self.free.pop() {
            Some(id) => {
                self.nodes[id] = node;
                id
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        };
        self.nodes[parent].children.insert(token, id);
        self.resident += 1;
        (id, true)
    }

    pub fn pin(&mut self, id: NodeId) {
        if id != ROOT {
            self.nodes[id].pins += 1;
        }
    }

    pub fn unpin(&mut self, id: NodeId) {
        if id != ROOT {
            let n = &mut self.nodes[id];
            debug_assert!(n.pins > 0, "unpin of an unpinned node");
            n.pins = n.pins.saturating_sub(1);
        }
    }

    fn evictable(&self, id: NodeId) -> bool {
        let n = &self.nodes[id];
        id != ROOT && n.live && n.children.is_empty() && n.pins == 0
    }

    /// Tokens that could be freed right now: nodes with no pinned descendant.
    pub fn freeable(&self) -> usize {
        // A node is blocked iff it or a descendant is pinned.
        let mut blocked = vec![false; self.nodes.len()];
        for (id, n) in self.nodes.iter().enumerate() {
            if id != ROOT && n.live && n.pins > 0 {
                let mut cur = id;
                while cur != ROOT && !blocked[cur] {
                    blocked[cur] = true;
                    cur = self.nodes[cur].parent;
                }
            }
        }
        self.nodes
            .iter()
            .enumerate()
            .filter(|&(id, n)| id != ROOT && n.live && !blocked[id])
            .count()
    }

    /// Evicts leaves in ascending `key` order until `needed` tokens are freed
    /// or nothing evictable is left. A parent becomes a candidate as soon as
    /// its last child is gone.
    pub fn evict_by<K, F>(&mut self, needed: usize, key: F) -> Vec<EvictionEvent>
    where
        K: Ord,
        F: Fn(&Node, NodeId) -> K,
    {
        let mut events = Vec::new();
        if needed == 0 {
            return events;
        }
        let mut heap: BinaryHeap<Reverse<(K, NodeId)>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|&(id, _)| self.evictable(id))
            .map(|(id, n)| Reverse((key(n, id), id)))
            .collect();
        while events.len() < needed {
            let Some(Reverse((_, id))) = heap.pop() else {
                break;
            };
            let parent = self.nodes[id].parent;
            events.push(self.remove_leaf(id));
            if self.evictable(parent) {
                heap.push(Reverse((key(&self.nodes[parent], parent), parent)));
            }
        }
        events
    }

    fn remove_leaf(&mut self, id: NodeId) -> EvictionEvent {
        let (token, parent) = (self.nodes[id].token, self.nodes[id].parent);
        self.nodes[parent].children.remove(&token);
        let n = &mut self.nodes[id];
        n.live = false;
        let event = EvictionEvent {
            node: id,
            token: n.token,
            owner: n.owner,
            last_access: n.last_access,
            depth: n.depth,
        };
        self.free.push(id);
        self.resident -= 1;
        event
    }

    /// Token path from the root to `id`.
    pub fn path_tokens(&self, mut id: NodeId) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.nodes[id].depth);
        while id != ROOT {
            out.push(self.nodes[id].token);
            id = self.nodes[id].parent;
        }
        out.reverse();
        out
    }

    /// Structural self-check used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut live = 0;
        for (id, n) in self.nodes.iter().enumerate() {
            if id == ROOT || !n.live {
                continue;
            }
            live += 1;
            let p = &self.nodes[n.parent];
            if !p.live {
                return Err(format!("node {id} has an evicted parent"));
            }
            if p.children.get(&n.token) != Some(&id) {
                return Err(format!("node {id} not linked from its parent"));
            }
            if n.depth != p.depth + 1 {
                return Err(format!("node {id} depth mismatch"));
            }
        }
        if live != self.resident {
            return Err(format!("resident {} != live {}", self.resident, live));
        }
        Ok(())
    }
}
