//! Runtime profiling of agents and the contribution score that biases
//! eviction.
//!
//! Intrinsic utility multiplies four per-agent factors gathered over a
//! sliding window of rounds:
//!
//! * activity `A`: invocation count
//! * workload `W`: input plus output tokens
//! * efficiency `E`: cached prefix tokens / max(1, input tokens)
//! * concurrency `Q`: (average + peak in-flight requests) / 2
//!
//! Each factor is min-max normalized across agents into `[EPSILON, 1]`, the
//! product is min-max normalized into `[0, 1]`. Collaborative utility sums
//! the weights of reuse edges in both directions. A degenerate min-max (all
//! agents equal) maps every agent to 1.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::AgentId;

/// Floor applied to normalized intrinsic factors.
pub const EPSILON: f64 = 0.05;

/// Weight of intrinsic utility in the contribution score.
pub const DEFAULT_ALPHA: f64 = 0.4;

pub const DEFAULT_WINDOW_ROUNDS: usize = 5;

/// Per-agent counters for one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub invocations: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cached_prefix_tokens: u64,
    pub concurrency_sum: u64,
    pub concurrency_samples: u64,
    pub peak_concurrency: u64,
}

impl RoundRecord {
    fn absorb(&mut self, other: &RoundRecord) {
        self.invocations += other.invocations;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.cached_prefix_tokens += other.cached_prefix_tokens;
        self.concurrency_sum += other.concurrency_sum;
        self.concurrency_samples += other.concurrency_samples;
        self.peak_concurrency = self.peak_concurrency.max(other.peak_concurrency);
    }
}

/// Sliding window of round records for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub window: VecDeque<RoundRecord>,
    pub window_len: usize,
}

impl AgentProfile {
    pub fn new(agent_id: AgentId, window_len: usize) -> Self {
        Self {
            agent_id,
            window: VecDeque::with_capacity(window_len),
            window_len: window_len.max(1),
        }
    }

    pub fn push(&mut self, record: RoundRecord) {
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back(record);
    }

    pub fn totals(&self) -> RoundRecord {
        let mut t = RoundRecord::default();
        for r in &self.window {
            t.absorb(r);
        }
        t
    }

    pub fn raw_factors(&self) -> RawFactors {
        RawFactors::from_totals(&self.totals())
    }
}

/// Un-normalized intrinsic factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawFactors {
    pub activity: f64,
    pub workload: f64,
    pub efficiency: f64,
    pub concurrency: f64,
}

impl RawFactors {
    pub fn from_totals(t: &RoundRecord) -> Self {
        let avg = if t.concurrency_samples == 0 {
            0.0
        } else {
            t.concurrency_sum as f64 / t.concurrency_samples as f64
        };
        Self {
            activity: t.invocations as f64,
            workload: (t.input_tokens + t.output_tokens) as f64,
            efficiency: t.cached_prefix_tokens as f64 / t.input_tokens.max(1) as f64,
            concurrency: (avg + t.peak_concurrency as f64) / 2.0,
        }
    }
}

/// Directed reuse: the provider's KV was matched by the consumer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReuseEdge {
    pub provider: AgentId,
    pub consumer: AgentId,
    pub shared_tokens: u64,
    pub events: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionScore {
    pub agent_id: AgentId,
    pub intrinsic: f64,
    pub collaborative: f64,
    pub score: f64,
    pub alpha: f64,
}

/// Min-max into `[floor, 1]`; all-equal input maps to 1.
pub fn min_max(values: &[f64], floor: f64) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![1.0; values.len()];
    }
    values
        .iter()
        .map(|&v| floor + (1.0 - floor) * (v - lo) / (hi - lo))
        .collect()
}

/// `sqrt(shared_tokens) * ln(1 + events)`.
pub fn edge_weight(edge: &ReuseEdge) -> f64 {
    (edge.shared_tokens as f64).sqrt() * (edge.events as f64).ln_1p()
}

/// Raw products `U_a` for each entry of `factors`.
pub fn intrinsic_products(factors: &[RawFactors]) -> Vec<f64> {
    let col = |f: fn(&RawFactors) -> f64| -> Vec<f64> {
        min_max(&factors.iter().map(f).collect::<Vec<_>>(), EPSILON)
    };
    let a = col(|f| f.activity);
    let w = col(|f| f.workload);
    let e = col(|f| f.efficiency);
    let q = col(|f| f.concurrency);
    (0..factors.len())
        .map(|i| a[i] * w[i] * e[i] * q[i])
        .collect()
}

/// Normalized intrinsic utilities `Û_a`, one per entry of `factors`.
pub fn intrinsic_utilities(factors: &[RawFactors]) -> Vec<f64> {
    min_max(&intrinsic_products(factors), 0.0)
}

/// `Û` of `profile` relative to `all_profiles` (which should include it).
pub fn intrinsic_utility(profile: &AgentProfile, all_profiles: &[&AgentProfile]) -> f64 {
    let factors: Vec<RawFactors> = all_profiles.iter().map(|p| p.raw_factors()).collect();
    let utils = intrinsic_utilities(&factors);
    all_profiles
        .iter()
        .position(|p| p.agent_id == profile.agent_id)
        .map(|i| utils[i])
        .unwrap_or(0.0)
}

/// `C_a`: outgoing plus incoming edge weights, self-loops ignored.
pub fn collaborative_raw(agent: AgentId, edges: &[ReuseEdge]) -> f64 {
    edges
        .iter()
        .filter(|e| e.provider != e.consumer && (e.provider == agent || e.consumer == agent))
        .map(edge_weight)
        .sum()
}

/// Normalized collaborative utilities `Ĉ_a`, one per agent.
pub fn collaborative_utilities(agents: &[AgentId], edges: &[ReuseEdge]) -> Vec<f64> {
    let raw: Vec<f64> = agents
        .iter()
        .map(|&a| collaborative_raw(a, edges))
        .collect();
    min_max(&raw, 0.0)
}

pub fn combine(
    agent_id: AgentId,
    intrinsic: f64,
    collaborative: f64,
    alpha: f64,
) -> ContributionScore {
    ContributionScore {
        agent_id,
        intrinsic,
        collaborative,
        score: alpha * intrinsic + (1.0 - alpha) * collaborative,
        alpha,
    }
}

/// Scores for `profiles` given the reuse edges observed over the same window.
pub fn contribution_scores(
    profiles: &[&AgentProfile],
    edges: &[ReuseEdge],
    alpha: f64,
) -> Vec<ContributionScore> {
    let factors: Vec<RawFactors> = profiles.iter().map(|p| p.raw_factors()).collect();
    let u = intrinsic_utilities(&factors);
    let ids: Vec<AgentId> = profiles.iter().map(|p| p.agent_id).collect();
    let c = collaborative_utilities(&ids, edges);
    ids.iter()
        .enumerate()
        .map(|(i, &id)| combine(id, u[i], c[i], alpha))
        .collect()
}

type EdgeMap = BTreeMap<(AgentId, AgentId), (u64, u64)>;

/// Collects per-round records and edges, and republishes scores at every
/// round boundary.
#[derive(Clone, Debug)]
pub struct Profiler {
    window_len: usize,
    alpha: f64,
    profiles: BTreeMap<AgentId, AgentProfile>,
    current: BTreeMap<AgentId, RoundRecord>,
    edge_window: VecDeque<EdgeMap>,
    current_edges: EdgeMap,
    lifetime_edges: EdgeMap,
    in_flight: BTreeMap<AgentId, u64>,
    scores: BTreeMap<AgentId, ContributionScore>,
    rounds: u64,
}

impl Profiler {
    pub fn new(window_len: usize, alpha: f64) -> Self {
        Self {
            window_len: window_len.max(1),
            alpha,
            profiles: BTreeMap::new(),
            current: BTreeMap::new(),
            edge_window: VecDeque::new(),
            current_edges: BTreeMap::new(),
            lifetime_edges: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            scores: BTreeMap::new(),
            rounds: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn register(&mut self, agent: AgentId) {
        let window_len = self.window_len;
        self.profiles
            .entry(agent)
            .or_insert_with(|| AgentProfile::new(agent, window_len));
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    fn record(&mut self, agent: AgentId) -> &mut RoundRecord {
        self.current.entry(agent).or_default()
    }

    /// Admission of one request: counts the invocation and samples concurrency.
    pub fn begin_request(&mut self, agent: AgentId) {
        let n = {
            let c = self.in_flight.entry(agent).or_default();
            *c += 1;
            *c
        };
        let r = self.record(agent);
        r.invocations += 1;
        r.concurrency_sum += n;
        r.concurrency_samples += 1;
        r.peak_concurrency = r.peak_concurrency.max(n);
    }

    pub fn end_request(&mut self, agent: AgentId) {
        if let Some(c) = self.in_flight.get_mut(&agent) {
            *c = c.saturating_sub(1);
        }
    }

    pub fn record_prefill(&mut self, agent: AgentId, input_tokens: usize, cached_tokens: usize) {
        let r = self.record(agent);
        r.input_tokens += input_tokens as u64;
        r.cached_prefix_tokens += cached_tokens as u64;
    }

    pub fn record_output(&mut self, agent: AgentId, tokens: usize) {
        self.record(agent).output_tokens += tokens as u64;
    }

    pub fn record_reuse(&mut self, provider: AgentId, consumer: AgentId, shared: usize) {
        for map in [&mut self.current_edges, &mut self.lifetime_edges] {
            let e = map.entry((provider, consumer)).or_default();
            e.0 += shared as u64;
            e.1 += 1;
        }
    }

    /// Closes the round, slides the window and recomputes scores.
    pub fn end_round(&mut self) -> Vec<ContributionScore> {
        let current = std::mem::take(&mut self.current);
        for (id, p) in self.profiles.iter_mut() {
            p.push(current.get(id).cloned().unwrap_or_default());
        }
        if self.edge_window.len() == self.window_len {
            self.edge_window.pop_front();
        }
        self.edge_window
            .push_back(std::mem::take(&mut self.current_edges));
        self.rounds += 1;
        let scores = self.compute_scores();
        self.scores = scores.iter().map(|s| (s.agent_id, *s)).collect();
        scores
    }

    /// Reuse edges aggregated over the window.
    pub fn window_edges(&self) -> Vec<ReuseEdge> {
        let mut sum = EdgeMap::new();
        for m in &self.edge_window {
            for (&k, &(s, e)) in m {
                let v = sum.entry(k).or_default();
                v.0 += s;
                v.1 += e;
            }
        }
        to_edges(&sum)
    }

    pub fn lifetime_edges(&self) -> Vec<ReuseEdge> {
        to_edges(&self.lifetime_edges)
    }

    pub fn compute_scores(&self) -> Vec<ContributionScore> {
        let profiles: Vec<&AgentProfile> = self.profiles.values().collect();
        if profiles.is_empty() || self.rounds == 0 {
            return Vec::new();
        }
        contribution_scores(&profiles, &self.window_edges(), self.alpha)
    }

    /// Scores published at the last round boundary.
    pub fn scores(&self) -> &BTreeMap<AgentId, ContributionScore> {
        &self.scores
    }

    /// Published score of `agent`, 0 before the first round closes.
    pub fn score_of(&self, agent: AgentId) -> f64 {
        self.scores.get(&agent).map(|s| s.score).unwrap_or(0.0)
    }

    pub fn profile(&self, agent: AgentId) -> Option<&AgentProfile> {
        self.profiles.get(&agent)
    }
}

fn to_edges(map: &EdgeMap) -> Vec<ReuseEdge> {
    map.iter()
        .map(
            |(&(provider, consumer), &(shared_tokens, events))| ReuseEdge {
                provider,
                consumer,
                shared_tokens,
                events,
            },
        )
        .collect()
}
