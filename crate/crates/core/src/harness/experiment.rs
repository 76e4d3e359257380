//! Experiment configuration and the cell runner.
//!
//! A cell is one `(seed, eviction, policy, temperature)` combination. Cells
//! and ToT instances are independent, each gets a fresh engine, and results
//! are gathered in input order, so the worker count never changes a row.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::flow::{compile, LlmCallRecord, RunOptions, Runtime};
use crate::hash::derive_seed;
use crate::kv::{EvictionPolicy, KvConfig};
use crate::logits_cache::{LogitsCache, ReplayPolicy, StateKey};
use crate::model::ModelConfig;
use crate::par;
use crate::sampling::HotspotParams;

use super::r3a::run_r3a;
use super::report::{CellMeta, RequestRow, RoundRow, RunReport, ScoreRow, TimingRow};
use super::workload::{gen_r3a_workload, gen_tot_workload, R3aShape, Role, TotWorkload, TOT_AGENT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    TotResample(TotWorkload),
    R3aWorkflow(R3aWorkload),
}

impl WorkloadSpec {
    pub fn name(&self) -> &'static str {
        match self {
            WorkloadSpec::TotResample(_) => "tot_resample",
            WorkloadSpec::R3aWorkflow(_) => "r3a_workflow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct R3aWorkload {
    pub rounds: usize,
    pub hotspot_agents: Vec<Role>,
    pub shape: R3aShape,
}

impl Default for R3aWorkload {
    fn default() -> Self {
        Self {
            rounds: 21,
            hotspot_agents: vec![Role::Patcher, Role::Viewer],
            shape: R3aShape::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub model: ModelConfig,
    pub workload: WorkloadSpec,
    pub temperatures: Vec<f64>,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default)]
    pub top_k: Option<usize>,
    pub policies: Vec<ReplayPolicy>,
    pub evictions: Vec<EvictionPolicy>,
    pub capacity_tokens: usize,
    #[serde(default = "default_logits_budget")]
    pub logits_cache_bytes: usize,
    #[serde(default)]
    pub hotspot: HotspotParams,
    pub seeds: Vec<u64>,
    /// 0 uses every core, 1 forces the sequential path.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_top_p() -> f64 {
    1.0
}

fn default_logits_budget() -> usize {
    1 << 30
}

/// Command-line replacements for config fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub policy: Option<ReplayPolicy>,
    pub eviction: Option<EvictionPolicy>,
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(p) = o.policy {
            self.policies = vec![p];
        }
        if let Some(e) = o.eviction {
            self.evictions = vec![e];
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.output {
            self.output = Some(out.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.temperatures.is_empty() {
            return cfg("temperature grid is empty".into());
        }
        if let Some(t) = self
            .temperatures
            .iter()
            .find(|t| !(**t >= 0.0 && t.is_finite()))
        {
            return cfg(format!(
                "temperature {t} is not a finite non-negative number"
            ));
        }
        if self.policies.is_empty() {
            return cfg("at least one replay policy is required".into());
        }
        if self.evictions.is_empty() {
            return cfg("at least one eviction policy is required".into());
        }
        if self.seeds.is_empty() {
            return cfg("at least one seed is required".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) || self.top_k == Some(0) {
            return cfg(format!(
                "top_p must lie in (0, 1] and top_k must be positive (got {}, {:?})",
                self.top_p, self.top_k
            ));
        }
        self.hotspot
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let longest = match &self.workload {
            WorkloadSpec::TotResample(t) => {
                t.validate()?;
                t.longest_request()
            }
            WorkloadSpec::R3aWorkflow(r) => {
                r.shape.validate()?;
                if r.rounds == 0 {
                    return cfg("r3a workload needs at least one round".into());
                }
                gen_r3a_workload(&r.shape, r.rounds, self.seeds[0], self.model.vocab_size)
                    .longest_request()
            }
        };
        if self.capacity_tokens <= longest {
            return cfg(format!(
                "capacity_tokens {} must exceed the longest single request ({longest} tokens)",
                self.capacity_tokens
            ));
        }
        Ok(())
    }

    /// Cells in `(seed, eviction, policy, temperature)` order.
    pub fn cells(&self) -> Vec<CellMeta> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &eviction in &self.evictions {
                for &policy in &self.policies {
                    for &temperature in &self.temperatures {
                        out.push(CellMeta {
                            cell: out.len(),
                            workload: self.workload.name().to_string(),
                            policy: policy.name().to_string(),
                            eviction: eviction.name().to_string(),
                            temperature,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    fn engine(&self, eviction: EvictionPolicy) -> Result<Engine> {
        Engine::new(
            self.model.clone(),
            KvConfig {
                capacity_tokens: self.capacity_tokens,
                policy: eviction,
                ..KvConfig::default()
            },
        )
    }
}

struct Unit {
    rows: Vec<RequestRow>,
    rounds: Vec<RoundRow>,
    scores: Vec<ScoreRow>,
    timing: TimingRow,
}

fn tot_instance(
    cfg: &ExperimentConfig,
    spec: &TotWorkload,
    meta: &CellMeta,
    instance: usize,
    prompt: Vec<u32>,
) -> Result<Unit> {
    let started = Instant::now();
    let policy: ReplayPolicy = meta.policy.parse()?;
    let eviction: EvictionPolicy = meta.eviction.parse()?;
    let mut doc = spec.workflow();
    for state in &mut doc.agents[0].states {
        if state.action == "llm_call" {
            let sampling = &mut state.params["sampling"];
            sampling["top_p"] = cfg.top_p.into();
            if let Some(k) = cfg.top_k {
                sampling["top_k"] = k.into();
            }
        }
    }
    let wf = compile(&doc)?;
    let mut engine = cfg.engine(eviction)?;
    let mut cache = LogitsCache::new(cfg.logits_cache_bytes);
    let opts = RunOptions {
        seed: derive_seed(meta.seed, &[instance as u64]),
        policy: Some(policy),
        temperature: Some(meta.temperature),
        hotspot: Some(cfg.hotspot.clone()),
        ..RunOptions::default()
    };
    let run = Runtime::new(&wf, &mut engine, &mut cache, opts).run(TOT_AGENT, prompt)?;
    let rows = call_rows(meta.cell, instance as u64, &run.transcript.calls);
    Ok(Unit {
        rows,
        rounds: Vec::new(),
        scores: Vec::new(),
        timing: TimingRow {
            cell: meta.cell,
            instance: instance as u64,
            wall_ns: started.elapsed().as_nanos() as u64,
        },
    })
}

/// Request rows of recorded llm calls, in call order. A call is a revisit
/// when an earlier call in the same list had the same prompt.
pub fn call_rows(cell: usize, instance: u64, calls: &[LlmCallRecord]) -> Vec<RequestRow> {
    let mut seen = BTreeSet::new();
    calls
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let revisit = !seen.insert(StateKey::of(&c.prompt));
            RequestRow {
                cell,
                request_id: i as u64,
                instance,
                round: 0,
                agent: c.agent.clone(),
                depth: c.depth as u64,
                revisit,
                prompt_len: c.prompt.len() as u64,
                output_len: c.tokens.len() as u64,
                cache_hit: c.outcome.cache_hit,
                replayed_len: c.outcome.replayed_len as u64,
                hit_ratio: c.outcome.hit_ratio(),
                forward_passes: c.outcome.forward_passes,
                baseline_passes: c.tokens.len() as u64,
                prefill_passes: c.cost.prefill_passes,
                decode_passes: c.cost.decode_passes,
                reprefill_passes: c.cost.reprefill_passes,
                kv_input_tokens: 0,
                kv_matched_tokens: 0,
            }
        })
        .collect()
}

fn r3a_cell(cfg: &ExperimentConfig, spec: &R3aWorkload, meta: &CellMeta) -> Result<Unit> {
    let started = Instant::now();
    let eviction: EvictionPolicy = meta.eviction.parse()?;
    let script = gen_r3a_workload(&spec.shape, spec.rounds, meta.seed, cfg.model.vocab_size);
    let mut engine = cfg.engine(eviction)?;
    let run = run_r3a(
        &script,
        &mut engine,
        meta.temperature,
        meta.seed,
        &spec.hotspot_agents,
    )?;
    let name_of = |id| {
        run.agents
            .iter()
            .find(|(a, _)| *a == id)
            .map(|(_, r)| r.name().to_string())
            .unwrap_or_else(|| format!("{id}"))
    };
    let rows = run
        .calls
        .iter()
        .map(|c| RequestRow {
            cell: meta.cell,
            request_id: 0,
            instance: 0,
            round: c.round as u64 + 1,
            agent: c.role.name().to_string(),
            depth: 1,
            revisit: false,
            prompt_len: c.prompt_len as u64,
            output_len: c.output_len as u64,
            cache_hit: false,
            replayed_len: 0,
            hit_ratio: 0.0,
            forward_passes: c.forward_passes,
            baseline_passes: c.output_len as u64,
            prefill_passes: c.prefill_passes,
            decode_passes: c.decode_passes,
            reprefill_passes: c.reprefill_passes,
            kv_input_tokens: c.kv_input_tokens,
            kv_matched_tokens: c.kv_matched_tokens,
        })
        .collect();
    let mut rounds = Vec::new();
    let mut scores = Vec::new();
    for snap in &run.rounds {
        let k = &snap.counters;
        let m = k.metrics();
        rounds.push(RoundRow {
            cell: meta.cell,
            round: snap.round,
            eviction: meta.eviction.clone(),
            hotspot_hit_rate: m.hotspot_hit_rate,
            non_hotspot_hit_rate: m.non_hotspot_hit_rate,
            evicted_tokens: k.evicted_tokens,
            evicted_hotspot_tokens: k.evicted_hotspot_tokens,
            evicted_non_hotspot_tokens: k.evicted_non_hotspot_tokens,
            resident_tokens: snap.resident_tokens as u64,
            hotspot_input_tokens: k.hotspot_input_tokens,
            hotspot_matched_tokens: k.hotspot_matched_tokens,
            non_hotspot_input_tokens: k.non_hotspot_input_tokens,
            non_hotspot_matched_tokens: k.non_hotspot_matched_tokens,
        });
        for s in &snap.scores {
            scores.push(ScoreRow {
                cell: meta.cell,
                round: snap.round,
                agent: name_of(s.agent_id),
                intrinsic: s.intrinsic,
                collaborative: s.collaborative,
                score: s.score,
            });
        }
    }
    Ok(Unit {
        rows,
        rounds,
        scores,
        timing: TimingRow {
            cell: meta.cell,
            instance: 0,
            wall_ns: started.elapsed().as_nanos() as u64,
        },
    })
}

/// Runs every cell. A failing cell is recorded in the report and the run
/// continues with the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let cells = cfg.cells();
    let results: Vec<(usize, Result<Unit>)> = match &cfg.workload {
        WorkloadSpec::TotResample(spec) => {
            let mut units = Vec::new();
            for meta in &cells {
                let prompts =
                    gen_tot_workload(spec, spec.instances, meta.seed, cfg.model.vocab_size);
                for inst in prompts {
                    units.push((meta, inst));
                }
            }
            par::map(cfg.workers, units, |(meta, inst)| {
                (
                    meta.cell,
                    tot_instance(cfg, spec, meta, inst.id, inst.prompt),
                )
            })
        }
        WorkloadSpec::R3aWorkflow(spec) => par::map(cfg.workers, cells.iter().collect(), |meta| {
            (meta.cell, r3a_cell(cfg, spec, meta))
        }),
    };
    let mut report = RunReport {
        name: cfg.name.clone(),
        cells: cells.clone(),
        ..RunReport::default()
    };
    let mut next_id = vec![0u64; cells.len()];
    for (cell, res) in results {
        match res {
            Ok(unit) => {
                for mut row in unit.rows {
                    row.request_id = next_id[cell];
                    next_id[cell] += 1;
                    report.requests.push(row);
                }
                report.rounds.extend(unit.rounds);
                report.scores.extend(unit.scores);
                report.timings.push(unit.timing);
            }
            Err(e) => {
                if report.error_of(cell).is_none() {
                    report.errors.push((cell, e.to_string()));
                }
            }
        }
    }
    Ok(report)
}
