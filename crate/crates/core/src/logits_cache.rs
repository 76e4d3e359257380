//! Host-side store of per-state logits trajectories and cache-aware
//! resampling.
//!
//! A trajectory records, for one prompt, the logits at every output position
//! and the token sampled from each. A later request on the same prompt can
//! resample from those logits instead of running decode passes:
//!
//! * step-wise: sample at every cached position, stop right after the first
//!   token that differs from the cached one;
//! * hotspot: sample only at hotspot positions, copy the cached token
//!   elsewhere, stop right after a divergent hotspot.
//!
//! Whatever remains is produced by one prefill over prompt plus replayed
//! tokens followed by ordinary decode steps.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::hash::{PrefixHash, RngStream};
use crate::kv::AgentId;
use crate::model::{CostReport, LogitsVector};
use crate::sampling::{identify_hotspots, sample, HotspotParams, SamplingConfig};
use crate::Token;

/// Fixed per-entry bookkeeping charge in the byte budget.
pub const ENTRY_OVERHEAD_BYTES: usize = 64;

/// Rolling hash of the complete prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateKey(pub u64);

impl StateKey {
    pub fn of(prompt: &[Token]) -> Self {
        Self(PrefixHash::of(prompt).value())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayPolicy {
    #[default]
    None,
    StepWise,
    Hotspot,
}

impl ReplayPolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::StepWise => "step_wise",
            Self::Hotspot => "hotspot",
        }
    }
}

impl std::str::FromStr for ReplayPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "step" | "step_wise" => Ok(Self::StepWise),
            "hotspot" => Ok(Self::Hotspot),
            other => Err(Error::Config(format!("unknown replay policy '{other}'"))),
        }
    }
}

/// Memo key for a hotspot set: temperature and parameters, bitwise.
type HotspotKey = (u64, u64, u64, Option<usize>);

fn hotspot_key(temperature: f64, p: &HotspotParams) -> HotspotKey {
    (
        temperature.to_bits(),
        p.lambda.to_bits(),
        p.threshold.to_bits(),
        p.max_hotspots,
    )
}

#[derive(Debug)]
pub struct CachedTrajectory {
    pub key: StateKey,
    pub vocab_size: usize,
    pub logits_seq: Vec<LogitsVector>,
    pub token_seq: Vec<Token>,
    /// Sampling setup of the request that wrote the entry; prefetch uses it.
    pub sampling: SamplingConfig,
    pub hotspot_params: HotspotParams,
    pub created_round: u64,
    hotspots: Mutex<BTreeMap<HotspotKey, Arc<Vec<usize>>>>,
}

impl CachedTrajectory {
    pub fn len(&self) -> usize {
        self.token_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_seq.is_empty()
    }

    /// Budget charge: 4-byte logits, 4-byte tokens, fixed overhead.
    pub fn size_bytes(&self) -> usize {
        entry_bytes(self.vocab_size, self.len())
    }
}

pub fn entry_bytes(vocab_size: usize, len: usize) -> usize {
    4 * vocab_size * len + 4 * len + ENTRY_OVERHEAD_BYTES
}

#[derive(Debug)]
struct Slot {
    entry: Arc<CachedTrajectory>,
    last_hit: u64,
    bytes: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub updates: u64,
    pub evictions: u64,
    pub hotspot_computations: u64,
    pub prefetches_run: u64,
}

#[derive(Debug)]
pub struct LogitsCache {
    budget_bytes: usize,
    slots: BTreeMap<StateKey, Slot>,
    bytes: usize,
    clock: u64,
    round: u64,
    prefetch_queue: VecDeque<StateKey>,
    stats: CacheStats,
}

impl LogitsCache {
    pub fn new(budget_bytes: usize) -> Self {
        Self {
            budget_bytes,
            slots: BTreeMap::new(),
            bytes: 0,
            clock: 0,
            round: 0,
            prefetch_queue: VecDeque::new(),
            stats: CacheStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn budget_bytes(&self) -> usize {
        self.budget_bytes
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn set_round(&mut self, round: u64) {
        self.round = round;
    }

    pub fn contains(&self, key: StateKey) -> bool {
        self.slots.contains_key(&key)
    }

    /// The entry for `key`, marking it most recently hit. The returned handle
    /// pins the entry against eviction until dropped.
    pub fn lookup(&mut self, key: StateKey) -> Option<Arc<CachedTrajectory>> {
        self.stats.lookups += 1;
        self.clock += 1;
        let slot = self.slots.get_mut(&key)?;
        slot.last_hit = self.clock;
        self.stats.hits += 1;
        Some(Arc::clone(&slot.entry))
    }

    pub fn last_hit(&self, key: StateKey) -> Option<u64> {
        self.slots.get(&key).map(|s| s.last_hit)
    }

    /// Stores or overwrites the trajectory for `key` and queues a prefetch.
    pub fn update(
        &mut self,
        key: StateKey,
        logits_seq: Vec<LogitsVector>,
        token_seq: Vec<Token>,
        sampling: &SamplingConfig,
        hotspot_params: &HotspotParams,
    ) -> Result<()> {
        if logits_seq.len() != token_seq.len() {
            return Err(Error::invalid(format!(
                "logits_seq has {} positions but token_seq has {}",
                logits_seq.len(),
                token_seq.len()
            )));
        }
        let vocab_size = logits_seq.first().map_or(0, LogitsVector::len);
        if logits_seq.iter().any(|z| z.len() != vocab_size) {
            return Err(Error::invalid("logits vectors differ in length"));
        }
        if let Some(old) = self.slots.remove(&key) {
            self.bytes -= old.bytes;
        }
        let entry = CachedTrajectory {
            key,
            vocab_size,
            logits_seq,
            token_seq,
            sampling: sampling.clone(),
            hotspot_params: hotspot_params.clone(),
            created_round: self.round,
            hotspots: Mutex::new(BTreeMap::new()),
        };
        let bytes = entry.size_bytes();
        self.clock += 1;
        self.stats.updates += 1;
        self.bytes += bytes;
        self.slots.insert(
            key,
            Slot {
                entry: Arc::new(entry),
                last_hit: self.clock,
                bytes,
            },
        );
        self.enforce_budget();
        if self.slots.contains_key(&key) {
            self.prefetch_queue.push_back(key);
        }
        Ok(())
    }

    /// Evicts least-recently-hit unpinned entries while over budget.
    fn enforce_budget(&mut self) {
        while self.bytes > self.budget_bytes {
            let victim = self
                .slots
                .iter()
                .filter(|(_, s)| Arc::strong_count(&s.entry) == 1)
                .min_by_key(|(k, s)| (s.last_hit, **k))
                .map(|(k, _)| *k);
            let Some(k) = victim else { break };
            let s = self.slots.remove(&k).expect("victim present");
            self.bytes -= s.bytes;
            self.stats.evictions += 1;
        }
    }

    /// Hotspot positions of `entry` at `temperature`, computed at most once.
    pub fn hotspots(
        &mut self,
        entry: &CachedTrajectory,
        temperature: f64,
        params: &HotspotParams,
    ) -> Arc<Vec<usize>> {
        let k = hotspot_key(temperature, params);
        let mut memo = entry.hotspots.lock().expect("hotspot memo poisoned");
        if let Some(h) = memo.get(&k) {
            return Arc::clone(h);
        }
        let cfg = SamplingConfig {
            temperature,
            ..SamplingConfig::default()
        };
        let h = Arc::new(identify_hotspots(&entry.logits_seq, &cfg, params));
        self.stats.hotspot_computations += 1;
        memo.insert(k, Arc::clone(&h));
        h
    }

    /// Precomputes the hotspot set of `key` under the sampling setup that
    /// wrote it. No-op when the key is absent.
    pub fn prefetch(&mut self, key: StateKey) {
        let Some(entry) = self.slots.get(&key).map(|s| Arc::clone(&s.entry)) else {
            return;
        };
        self.stats.prefetches_run += 1;
        self.hotspots(&entry, entry.sampling.temperature, &entry.hotspot_params);
    }

    pub fn pending_prefetches(&self) -> usize {
        self.prefetch_queue.len()
    }

    /// Runs every queued prefetch.
    pub fn run_prefetches(&mut self) {
        while let Some(k) = self.prefetch_queue.pop_front() {
            self.prefetch(k);
        }
    }

    /// Discards queued prefetches (allowed under load).
    pub fn drop_prefetches(&mut self) {
        self.prefetch_queue.clear();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub agent: AgentId,
    pub prompt: Vec<Token>,
    pub sampling: SamplingConfig,
    pub policy: ReplayPolicy,
    pub hotspot: HotspotParams,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    /// Positions served from cached logits, including a divergent one.
    pub replayed_len: usize,
    pub diverged_at: Option<usize>,
    pub total_len: usize,
    /// Forward passes avoided relative to an uncached run of equal length.
    pub forward_passes_saved: usize,
    /// Forward passes spent (prefill plus decode).
    pub forward_passes: u64,
    pub cache_hit: bool,
}

impl ReplayOutcome {
    pub fn hit_ratio(&self) -> f64 {
        if self.total_len == 0 {
            0.0
        } else {
            self.replayed_len as f64 / self.total_len as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub tokens: Vec<Token>,
    pub outcome: ReplayOutcome,
    pub cost: CostReport,
}

/// Runs one request through the cache and the engine.
///
/// Sampling consumes exactly one draw from `rng` per sampled position, so a
/// step-wise replay draws the same values an uncached run would.
pub fn generate(
    engine: &mut Engine,
    cache: &mut LogitsCache,
    req: &GenerateRequest,
    rng: &mut RngStream,
) -> Result<Completion> {
    if req.prompt.is_empty() {
        return Err(Error::invalid("request prompt is empty"));
    }
    req.sampling.validate()?;
    req.hotspot.validate()?;
    let max = req.sampling.max_tokens;
    let key = StateKey::of(&req.prompt);
    let before = engine.cost();
    engine.begin_request(req.agent);

    let cached = match req.policy {
        ReplayPolicy::None => None,
        _ => cache
            .lookup(key)
            .filter(|e| e.vocab_size == engine.vocab_size()),
    };
    let mut tokens: Vec<Token> = Vec::with_capacity(max);
    let mut new_logits: Vec<LogitsVector> = Vec::with_capacity(max);
    let mut diverged_at = None;
    if let Some(entry) = cached.as_deref() {
        let n = entry.len().min(max);
        let hotspots = match req.policy {
            ReplayPolicy::Hotspot => {
                Some(cache.hotspots(entry, req.sampling.temperature, &req.hotspot))
            }
            _ => None,
        };
        let mut next_hotspot = 0;
        for i in 0..n {
            let resample = match &hotspots {
                None => true,
                Some(h) => {
                    let hit = h.get(next_hotspot) == Some(&i);
                    if hit {
                        next_hotspot += 1;
                    }
                    hit
                }
            };
            let z = &entry.logits_seq[i];
            let y = if resample {
                sample(&req.sampling.distribution(z), rng)?
            } else {
                entry.token_seq[i]
            };
            tokens.push(y);
            new_logits.push(z.clone());
            if y != entry.token_seq[i] {
                diverged_at = Some(i);
                break;
            }
        }
    }
    let replayed_len = tokens.len();
    let cache_hit = cached.is_some();
    drop(cached);

    let mut passes_this_request = 0u64;
    if tokens.len() < max {
        let mut context = req.prompt.clone();
        context.extend_from_slice(&tokens);
        let (mut z, mut kv) = engine.prefill(req.agent, &context)?;
        passes_this_request += 1;
        loop {
            let y = match sample(&req.sampling.distribution(&z), rng) {
                Ok(y) => y,
                Err(e) => {
                    engine.release(kv);
                    return Err(e);
                }
            };
            tokens.push(y);
            new_logits.push(z);
            if tokens.len() == max {
                break;
            }
            z = match engine.decode(&mut kv, y) {
                Ok(z) => z,
                Err(e) => {
                    engine.release(kv);
                    return Err(e);
                }
            };
            passes_this_request += 1;
        }
        engine.release(kv);
        if req.policy != ReplayPolicy::None {
            cache.update(key, new_logits, tokens.clone(), &req.sampling, &req.hotspot)?;
        }
    }
    engine.end_request(req.agent, tokens.len());
    let cost = engine.cost().since(&before);
    Ok(Completion {
        outcome: ReplayOutcome {
            replayed_len,
            diverged_at,
            total_len: tokens.len(),
            forward_passes_saved: replayed_len,
            forward_passes: passes_this_request,
            cache_hit,
        },
        tokens,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::KvConfig;
    use crate::model::ModelConfig;

    fn setup() -> (Engine, LogitsCache, AgentId) {
        let mut e = Engine::new(ModelConfig::default(), KvConfig::default()).unwrap();
        let a = e.register_agent("a");
        (e, LogitsCache::new(usize::MAX), a)
    }

    fn req(agent: AgentId, t: f64, policy: ReplayPolicy, max: usize) -> GenerateRequest {
        GenerateRequest {
            agent,
            prompt: vec![3, 1, 4, 1, 5],
            sampling: SamplingConfig {
                temperature: t,
                max_tokens: max,
                ..SamplingConfig::default()
            },
            policy,
            hotspot: HotspotParams::default(),
        }
    }

    #[test]
    fn cold_then_greedy_full_reuse() {
        let (mut e, mut c, a) = setup();
        let r = req(a, 0.0, ReplayPolicy::StepWise, 50);
        let first = generate(&mut e, &mut c, &r, &mut RngStream::new(1)).unwrap();
        assert_eq!(first.outcome.replayed_len, 0);
        assert_eq!(first.outcome.forward_passes, 50);
        assert_eq!(first.cost.decode_passes, 49);
        assert_eq!(c.len(), 1);
        let second = generate(&mut e, &mut c, &r, &mut RngStream::new(2)).unwrap();
        assert_eq!(second.tokens, first.tokens);
        assert_eq!(second.outcome.hit_ratio(), 1.0);
        assert_eq!(second.cost.decode_passes, 0);
        assert_eq!(second.cost.prefill_passes, 0);
    }

    #[test]
    fn policy_none_skips_cache() {
        let (mut e, mut c, a) = setup();
        let r = req(a, 0.0, ReplayPolicy::None, 10);
        generate(&mut e, &mut c, &r, &mut RngStream::new(1)).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.stats().lookups, 0);
    }

    #[test]
    fn size_accounting() {
        assert_eq!(entry_bytes(256, 500), 512_000 + 2000 + ENTRY_OVERHEAD_BYTES);
    }

    #[test]
    fn mismatched_update_rejected() {
        let mut c = LogitsCache::new(usize::MAX);
        let err = c.update(
            StateKey(1),
            vec![LogitsVector(vec![0.0; 4])],
            vec![],
            &SamplingConfig::default(),
            &HotspotParams::default(),
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    fn put(c: &mut LogitsCache, k: u64) {
        c.update(
            StateKey(k),
            vec![LogitsVector(vec![0.0; 4])],
            vec![0],
            &SamplingConfig::default(),
            &HotspotParams::default(),
        )
        .unwrap();
    }

    #[test]
    fn lru_budget_and_overwrite() {
        let mut c = LogitsCache::new(2 * entry_bytes(4, 1));
        put(&mut c, 1);
        put(&mut c, 1);
        assert_eq!(c.len(), 1);
        put(&mut c, 2);
        assert!(c.lookup(StateKey(1)).is_some());
        put(&mut c, 3);
        assert!(c.contains(StateKey(1)));
        assert!(!c.contains(StateKey(2)));
        assert_eq!(c.stats().evictions, 1);
    }

    #[test]
    fn readers_pin_entries() {
        let mut c = LogitsCache::new(entry_bytes(4, 1));
        put(&mut c, 1);
        let held = c.lookup(StateKey(1)).unwrap();
        put(&mut c, 2);
        assert!(c.contains(StateKey(1)));
        drop(held);
        put(&mut c, 3);
        assert!(!c.contains(StateKey(1)));
    }

    #[test]
    fn prefetch_computes_once() {
        let (mut e, mut c, a) = setup();
        let r = req(a, 0.8, ReplayPolicy::Hotspot, 40);
        generate(&mut e, &mut c, &r, &mut RngStream::new(1)).unwrap();
        assert_eq!(c.pending_prefetches(), 1);
        c.run_prefetches();
        assert_eq!(c.stats().hotspot_computations, 1);
        generate(&mut e, &mut c, &r, &mut RngStream::new(2)).unwrap();
        assert_eq!(c.stats().hotspot_computations, 1);
        c.prefetch(StateKey(12345));
        assert_eq!(c.stats().prefetches_run, 1);
    }
}
