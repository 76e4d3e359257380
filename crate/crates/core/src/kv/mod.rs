//! Prefix-sharing KV cache with per-agent ownership and
//! contribution-weighted eviction.

pub mod profile;
pub mod trie;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Token;
pub use profile::{
    AgentProfile, ContributionScore, Profiler, RawFactors, ReuseEdge, RoundRecord, DEFAULT_ALPHA,
    DEFAULT_WINDOW_ROUNDS, EPSILON,
};
pub use trie::{EvictionEvent, NodeId, PrefixMatch, PrefixTrie, ROOT};

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "agent#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    #[default]
    Lru,
    AgentAware,
}

impl EvictionPolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lru => "lru",
            Self::AgentAware => "agent_aware",
        }
    }
}

impl std::str::FromStr for EvictionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lru" => Ok(Self::Lru),
            "agent" | "agent_aware" => Ok(Self::AgentAware),
            other => Err(Error::Config(format!("unknown eviction policy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvConfig {
    pub capacity_tokens: usize,
    pub policy: EvictionPolicy,
    pub window_rounds: usize,
    pub alpha: f64,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            capacity_tokens: 1 << 20,
            policy: EvictionPolicy::Lru,
            window_rounds: DEFAULT_WINDOW_ROUNDS,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl KvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity_tokens == 0 {
            return Err(Error::Config("capacity_tokens must be positive".into()));
        }
        if self.window_rounds == 0 {
            return Err(Error::Config("window_rounds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Cumulative hit and eviction counters, split by hotspot membership of the
/// requesting (for hits) or owning (for evictions) agent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hotspot_input_tokens: u64,
    pub hotspot_matched_tokens: u64,
    pub non_hotspot_input_tokens: u64,
    pub non_hotspot_matched_tokens: u64,
    pub evicted_tokens: u64,
    pub evicted_hotspot_tokens: u64,
    pub evicted_non_hotspot_tokens: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl CacheCounters {
    pub fn hotspot_hit_rate(&self) -> f64 {
        ratio(self.hotspot_matched_tokens, self.hotspot_input_tokens)
    }

    pub fn non_hotspot_hit_rate(&self) -> f64 {
        ratio(
            self.non_hotspot_matched_tokens,
            self.non_hotspot_input_tokens,
        )
    }

    pub fn metrics(&self) -> CacheMetrics {
        CacheMetrics {
            hotspot_hit_rate: self.hotspot_hit_rate(),
            non_hotspot_hit_rate: self.non_hotspot_hit_rate(),
            evicted_tokens: self.evicted_tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheMetrics {
    pub hotspot_hit_rate: f64,
    pub non_hotspot_hit_rate: f64,
    pub evicted_tokens: u64,
}

/// State published at a round boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: u64,
    pub counters: CacheCounters,
    pub resident_tokens: usize,
    pub scores: Vec<ContributionScore>,
}

/// Whether an insertion is a request prompt (counted in hit metrics and
/// reuse edges) or the repair of an evicted sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertKind {
    Prompt,
    Rematerialize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertOutcome {
    pub matched: usize,
    pub created: usize,
    /// Node of the last token; `ROOT` for an empty sequence.
    pub node: NodeId,
    pub by_owner: BTreeMap<AgentId, usize>,
}

/// Total order over non-NaN scores.
#[derive(Clone, Copy, Debug, PartialEq)]
struct ScoreKey(f64);

impl Eq for ScoreKey {}

impl PartialOrd for ScoreKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ScoreKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Clone, Debug)]
pub struct KvScheduler {
    config: KvConfig,
    trie: PrefixTrie,
    profiler: Profiler,
    names: BTreeMap<String, AgentId>,
    agents: Vec<String>,
    hotspot_agents: BTreeSet<AgentId>,
    counters: CacheCounters,
    cross_agent_matched: u64,
    score_override: Option<f64>,
    event_log: Option<Vec<EvictionEvent>>,
}

impl KvScheduler {
    pub fn new(config: KvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            profiler: Profiler::new(config.window_rounds, config.alpha),
            config,
            trie: PrefixTrie::new(),
            names: BTreeMap::new(),
            agents: Vec::new(),
            hotspot_agents: BTreeSet::new(),
            counters: CacheCounters::default(),
            cross_agent_matched: 0,
            score_override: None,
            event_log: None,
        })
    }

    pub fn config(&self) -> &KvConfig {
        &self.config
    }

    pub fn set_policy(&mut self, policy: EvictionPolicy) {
        self.config.policy = policy;
    }

    /// Registers `name`, returning its id; registering twice is a no-op.
    pub fn register_agent(&mut self, name: &str) -> AgentId {
        if let Some(&id) = self.names.get(name) {
            return id;
        }
        let id = AgentId(self.agents.len() as u32);
        self.names.insert(name.to_string(), id);
        self.agents.push(name.to_string());
        self.profiler.register(id);
        id
    }

    pub fn agent_id(&self, name: &str) -> Result<AgentId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownAgent(name.to_string()))
    }

    pub fn agent_name(&self, id: AgentId) -> Option<&str> {
        self.agents.get(id.0 as usize).map(String::as_str)
    }

    pub fn agents(&self) -> impl Iterator<Item = (AgentId, &str)> {
        self.agents
            .iter()
            .enumerate()
            .map(|(i, n)| (AgentId(i as u32), n.as_str()))
    }

    pub fn set_hotspot_agents(&mut self, agents: impl IntoIterator<Item = AgentId>) {
        self.hotspot_agents = agents.into_iter().collect();
    }

    pub fn is_hotspot(&self, agent: AgentId) -> bool {
        self.hotspot_agents.contains(&agent)
    }

    /// Forces every owner to the same score (agent-aware order then reduces
    /// to LRU). `None` restores profiled scores.
    pub fn set_score_override(&mut self, score: Option<f64>) {
        self.score_override = score;
    }

    /// Starts recording every eviction event.
    pub fn record_evictions(&mut self) {
        self.event_log.get_or_insert_with(Vec::new);
    }

    pub fn eviction_log(&self) -> &[EvictionEvent] {
        self.event_log.as_deref().unwrap_or(&[])
    }

    pub fn trie(&self) -> &PrefixTrie {
        &self.trie
    }

    pub fn profiler(&self) -> &Profiler {
        &self.profiler
    }

    pub fn profiler_mut(&mut self) -> &mut Profiler {
        &mut self.profiler
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn cache_metrics(&self) -> CacheMetrics {
        self.counters.metrics()
    }

    pub fn resident(&self) -> usize {
        self.trie.resident()
    }

    /// Total tokens matched across agent boundaries by prompt insertions.
    pub fn cross_agent_matched(&self) -> u64 {
        self.cross_agent_matched
    }

    pub fn score_of(&self, agent: AgentId) -> f64 {
        self.score_override
            .unwrap_or_else(|| self.profiler.score_of(agent))
    }

    /// Longest resident prefix; stamps access times.
    pub fn match_prefix(&mut self, tokens: &[Token]) -> usize {
        self.trie.tick();
        self.trie.match_prefix(tokens).len
    }

    pub fn pin(&mut self, node: NodeId) {
        self.trie.pin(node);
    }

    pub fn unpin(&mut self, node: NodeId) {
        self.trie.unpin(node);
    }

    /// Frees `needed` tokens under the configured policy.
    pub fn evict(&mut self, needed: usize) -> Result<usize> {
        if needed > self.config.capacity_tokens {
            return Err(self.capacity_error(needed));
        }
        let available = self.trie.freeable();
        if available < needed {
            return Err(Error::Capacity {
                needed,
                available,
                capacity: self.config.capacity_tokens,
            });
        }
        let events = match self.config.policy {
            EvictionPolicy::Lru => self.trie.evict_by(needed, |n, id| (n.last_access, id)),
            EvictionPolicy::AgentAware => {
                let scores: BTreeMap<AgentId, f64> = (0..self.agents.len() as u32)
                    .map(|i| (AgentId(i), self.score_of(AgentId(i))))
                    .collect();
                let fallback = self.score_override.unwrap_or(0.0);
                self.trie.evict_by(needed, |n, id| {
                    let s = scores.get(&n.owner).copied().unwrap_or(fallback);
                    (ScoreKey(s), n.last_access, id)
                })
            }
        };
        for e in &events {
            self.counters.evicted_tokens += 1;
            if self.hotspot_agents.contains(&e.owner) {
                self.counters.evicted_hotspot_tokens += 1;
            } else {
                self.counters.evicted_non_hotspot_tokens += 1;
            }
        }
        let n = events.len();
        if let Some(log) = self.event_log.as_mut() {
            log.extend(events);
        }
        Ok(n)
    }

    fn capacity_error(&self, needed: usize) -> Error {
        Error::Capacity {
            needed,
            available: self.trie.freeable(),
            capacity: self.config.capacity_tokens,
        }
    }

    /// Makes room for `extra` new tokens.
    fn reserve(&mut self, extra: usize) -> Result<()> {
        let free = self.config.capacity_tokens - self.trie.resident();
        if extra > free {
            self.evict(extra - free)?;
        }
        Ok(())
    }

    /// Materializes the unmatched suffix of `tokens` under `owner`. Prompt
    /// insertions update hit counters, profiles and reuse edges.
    pub fn insert_tokens(
        &mut self,
        tokens: &[Token],
        owner: AgentId,
        kind: InsertKind,
    ) -> Result<InsertOutcome> {
        self.trie.tick();
        let m = self.trie.match_prefix(tokens);
        let needed = tokens.len() - m.len;
        if needed > self.config.capacity_tokens {
            return Err(self.capacity_error(needed));
        }
        // The matched path must survive the eviction that makes room.
        self.trie.pin(m.node);
        let reserved = self.reserve(needed);
        self.trie.unpin(m.node);
        reserved?;
        let mut cur = m.node;
        for &t in &tokens[m.len..] {
            cur = self.trie.add_child(cur, t, owner).0;
        }
        if kind == InsertKind::Prompt {
            self.account_prompt(owner, tokens.len(), &m);
        }
        Ok(InsertOutcome {
            matched: m.len,
            created: needed,
            node: cur,
            by_owner: m.by_owner,
        })
    }

    fn account_prompt(&mut self, consumer: AgentId, input: usize, m: &PrefixMatch) {
        let (inp, hit) = if self.hotspot_agents.contains(&consumer) {
            (
                &mut self.counters.hotspot_input_tokens,
                &mut self.counters.hotspot_matched_tokens,
            )
        } else {
            (
                &mut self.counters.non_hotspot_input_tokens,
                &mut self.counters.non_hotspot_matched_tokens,
            )
        };
        *inp += input as u64;
        *hit += m.len as u64;
        self.profiler.record_prefill(consumer, input, m.len);
        for (&provider, &shared) in &m.by_owner {
            if provider != consumer && shared > 0 {
                self.profiler.record_reuse(provider, consumer, shared);
                self.cross_agent_matched += shared as u64;
            }
        }
    }

    /// Appends one token under `parent` (which the caller keeps pinned).
    /// Returns the node and whether it was newly materialized.
    pub fn append_token(
        &mut self,
        parent: NodeId,
        token: Token,
        owner: AgentId,
    ) -> Result<(NodeId, bool)> {
        self.trie.tick();
        if self.trie.child(parent, token).is_some() {
            return Ok(self.trie.add_child(parent, token, owner));
        }
        self.trie.pin(parent);
        let reserved = self.reserve(1);
        self.trie.unpin(parent);
        reserved?;
        Ok(self.trie.add_child(parent, token, owner))
    }

    /// Closes a round: slides profiling windows, republishes scores.
    pub fn end_round(&mut self) -> RoundSnapshot {
        let scores = self.profiler.end_round();
        RoundSnapshot {
            round: self.profiler.rounds(),
            counters: self.counters,
            resident_tokens: self.trie.resident(),
            scores,
        }
    }
}
