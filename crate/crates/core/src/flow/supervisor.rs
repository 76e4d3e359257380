//! Supervisors decide which continuations fire and how often.
//!
//! The runtime owns the pool of continuations. For every ready one it asks
//! the agent's supervisor for a [`FireDecision`]; each executed transition is
//! reported back through `commit`, and a continuation that slept on a peer
//! is reported through `wake` before it becomes fireable again.

use std::collections::BTreeMap;

use crate::hash::{mix64, unit_f64, PrefixHash};
use crate::Token;

use super::graph::{Action, EvaluatorSpec, FlowGraph, StateIdx, ToTConfig};

pub type InstanceId = u32;
pub type ContId = u64;

/// A state of one agent instance together with everything it inherits.
#[derive(Clone, Debug, PartialEq)]
pub struct Continuation {
    pub id: ContId,
    pub instance: InstanceId,
    /// `None` once the terminal state has executed.
    pub state: Option<StateIdx>,
    pub ctx: BTreeMap<String, Vec<Token>>,
    pub handles: BTreeMap<String, InstanceId>,
    pub dialogue: Vec<Token>,
    /// Number of llm_call transitions on the path from the root.
    pub depth: usize,
    pub parent: Option<ContId>,
    /// Read position in each peer's yield log.
    pub cursors: BTreeMap<InstanceId, usize>,
    /// Read position in the instance's own resume log.
    pub inbox_cursor: usize,
    pub tool_calls: BTreeMap<StateIdx, u32>,
}

impl Continuation {
    pub fn is_finished(&self) -> bool {
        self.state.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FireDecision {
    /// Execute the transition `copies` times from this continuation.
    Fire { copies: u32 },
    /// Not now; ask again next step.
    Defer,
    /// Stop here and keep the continuation as a result.
    Retire,
    /// Discard the continuation.
    Prune,
}

pub trait Supervisor: std::fmt::Debug + Send {
    /// Initial continuations of a freshly spawned instance.
    fn init(&mut self, root: Continuation) -> Vec<Continuation>;
    fn fire(&mut self, cont: &Continuation, graph: &FlowGraph) -> FireDecision;
    /// One completed transition from `parent` to `child`.
    fn commit(&mut self, parent: &Continuation, child: &Continuation, graph: &FlowGraph);
    fn wake(&mut self, cont: &Continuation);
    /// The continuation whose dialogue is the instance's result.
    fn result(&self) -> Option<ContId>;
}

/// Fires every ready state once.
#[derive(Debug, Default)]
pub struct LinearSupervisor {
    last_final: Option<ContId>,
}

impl Supervisor for LinearSupervisor {
    fn init(&mut self, root: Continuation) -> Vec<Continuation> {
        vec![root]
    }

    fn fire(&mut self, _cont: &Continuation, _graph: &FlowGraph) -> FireDecision {
        FireDecision::Fire { copies: 1 }
    }

    fn commit(&mut self, _parent: &Continuation, child: &Continuation, _graph: &FlowGraph) {
        if child.is_finished() {
            self.last_final = Some(child.id);
        }
    }

    fn wake(&mut self, _cont: &Continuation) {}

    fn result(&self) -> Option<ContId> {
        self.last_final
    }
}

/// Score in [0, 1) of a transcript.
pub fn evaluate(spec: &EvaluatorSpec, dialogue: &[Token]) -> f64 {
    unit_f64(mix64(PrefixHash::of(dialogue).value() ^ spec.salt))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Status {
    Pending(f64),
    Kept(f64),
    Pruned,
}

#[derive(Debug, Default)]
struct Level {
    /// Expansions fired into this level.
    expected: usize,
    committed: Vec<(ContId, f64)>,
    decided: bool,
    /// Kept lineages at this level that have not yet expanded or stopped.
    outstanding: usize,
}

/// Expands each kept state `branching` times at every llm_call, keeps the
/// best `beam` children per depth and stops at `max_depth`.
#[derive(Debug)]
pub struct TotSupervisor {
    cfg: ToTConfig,
    status: BTreeMap<ContId, Status>,
    levels: BTreeMap<usize, Level>,
    accepted: Option<ContId>,
    leaves: Vec<(ContId, f64)>,
    expansions: u64,
}

impl TotSupervisor {
    pub fn new(cfg: ToTConfig) -> Self {
        Self {
            cfg,
            status: BTreeMap::new(),
            levels: BTreeMap::new(),
            accepted: None,
            leaves: Vec::new(),
            expansions: 0,
        }
    }

    /// llm_call expansions requested so far.
    pub fn expansions(&self) -> u64 {
        self.expansions
    }

    /// One kept lineage at `depth` stopped or expanded.
    fn settle(&mut self, depth: usize) {
        let l = self.levels.entry(depth).or_default();
        l.outstanding = l.outstanding.saturating_sub(1);
        self.maybe_decide(depth + 1);
    }

    fn maybe_decide(&mut self, depth: usize) {
        let parents_done = self
            .levels
            .get(&(depth - 1))
            .is_none_or(|p| p.decided && p.outstanding == 0);
        let Some(l) = self.levels.get_mut(&depth) else {
            return;
        };
        if l.decided || !parents_done || l.committed.len() < l.expected {
            return;
        }
        l.decided = true;
        let mut ranked = l.committed.clone();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let keep = self.cfg.beam.min(ranked.len());
        l.outstanding = keep;
        for (i, &(id, s)) in ranked.iter().enumerate() {
            let st = if i < keep {
                Status::Kept(s)
            } else {
                Status::Pruned
            };
            self.status.insert(id, st);
        }
        if let (Some(t), Some(&(best, s))) = (self.cfg.evaluator.accept_above, ranked.first()) {
            if s > t && self.accepted.is_none() {
                self.accepted = Some(best);
            }
        }
    }
}

impl Supervisor for TotSupervisor {
    fn init(&mut self, root: Continuation) -> Vec<Continuation> {
        self.status.insert(root.id, Status::Kept(0.0));
        self.levels.insert(
            0,
            Level {
                decided: true,
                outstanding: 1,
                ..Level::default()
            },
        );
        vec![root]
    }

    fn fire(&mut self, cont: &Continuation, graph: &FlowGraph) -> FireDecision {
        let score = match self.status.get(&cont.id) {
            Some(Status::Kept(s)) => *s,
            Some(Status::Pending(_)) => return FireDecision::Defer,
            Some(Status::Pruned) | None => return FireDecision::Prune,
        };
        if let Some(a) = self.accepted {
            if a == cont.id {
                self.leaves.push((cont.id, score));
                return FireDecision::Retire;
            }
            return FireDecision::Prune;
        }
        let Some(state) = cont.state else {
            return FireDecision::Prune;
        };
        match graph.state(state).action {
            Action::LlmCall { .. } if cont.depth < self.cfg.max_depth => {
                let b = self.cfg.branching;
                self.levels.entry(cont.depth + 1).or_default().expected += b as usize;
                self.expansions += b as u64;
                self.settle(cont.depth);
                FireDecision::Fire { copies: b }
            }
            Action::LlmCall { .. } => {
                self.leaves.push((cont.id, score));
                self.settle(cont.depth);
                FireDecision::Retire
            }
            _ => FireDecision::Fire { copies: 1 },
        }
    }

    fn commit(&mut self, parent: &Continuation, child: &Continuation, _graph: &FlowGraph) {
        if child.depth == parent.depth {
            let st = self
                .status
                .get(&parent.id)
                .copied()
                .unwrap_or(Status::Pruned);
            self.status.insert(child.id, st);
            if child.is_finished() {
                if let Status::Kept(s) = st {
                    self.leaves.push((child.id, s));
                }
                self.settle(child.depth);
            }
            return;
        }
        let s = evaluate(&self.cfg.evaluator, &child.dialogue);
        self.status.insert(child.id, Status::Pending(s));
        self.levels
            .entry(child.depth)
            .or_default()
            .committed
            .push((child.id, s));
        self.maybe_decide(child.depth);
    }

    fn wake(&mut self, _cont: &Continuation) {}

    fn result(&self) -> Option<ContId> {
        if let Some(a) = self.accepted {
            return Some(a);
        }
        self.leaves
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|&(id, _)| id)
    }
}
