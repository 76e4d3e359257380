//! Newline-delimited JSON request protocol.
//!
//! Every line is one [`Request`] tagged by `op`. Every response is one line
//! carrying `ok` and the echoed `request_id`; failures carry
//! `error: {kind, message}` and leave the session usable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::flow::{compile, CompiledWorkflow, RunOptions, Runtime, WorkflowDoc};
use crate::harness::experiment::call_rows;
use crate::harness::report::{summarize_cell, CellMeta, CellSummary, RequestRow};
use crate::hash::RngStream;
use crate::kv::{CacheMetrics, KvConfig};
use crate::logits_cache::{generate, GenerateRequest, LogitsCache, ReplayPolicy, StateKey};
use crate::model::{CostReport, ModelConfig};
use crate::sampling::{HotspotParams, SamplingConfig};
use crate::Token;

fn default_policy() -> ReplayPolicy {
    ReplayPolicy::StepWise
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    RegisterAgent {
        #[serde(default)]
        request_id: Option<u64>,
        agent_id: String,
    },
    DefineWorkflow {
        #[serde(default)]
        request_id: Option<u64>,
        workflow: WorkflowDoc,
    },
    Generate {
        #[serde(default)]
        request_id: Option<u64>,
        agent_id: String,
        prompt_tokens: Vec<Token>,
        #[serde(default)]
        sampling: SamplingConfig,
        #[serde(default = "default_policy")]
        replay_policy: ReplayPolicy,
        #[serde(default)]
        hotspot: HotspotParams,
    },
    RunWorkflow {
        #[serde(default)]
        request_id: Option<u64>,
        root_agent: String,
        #[serde(default)]
        input_tokens: Vec<Token>,
        #[serde(default)]
        options: RunOptions,
    },
    Metrics {
        #[serde(default)]
        request_id: Option<u64>,
    },
}

impl Request {
    pub fn request_id(&self) -> Option<u64> {
        match self {
            Request::RegisterAgent { request_id, .. }
            | Request::DefineWorkflow { request_id, .. }
            | Request::Generate { request_id, .. }
            | Request::RunWorkflow { request_id, .. }
            | Request::Metrics { request_id } => *request_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

/// Everything `metrics` reports about a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub requests: usize,
    pub summary: CellSummary,
    pub kv: CacheMetrics,
    pub cost: CostReport,
}

/// Engine state behind one connection.
#[derive(Debug)]
pub struct Session {
    engine: Engine,
    cache: LogitsCache,
    workflow: Option<CompiledWorkflow>,
    rows: Vec<RequestRow>,
    seen: BTreeSet<StateKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub model: ModelConfig,
    pub kv: KvConfig,
    pub logits_cache_bytes: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            kv: KvConfig::default(),
            logits_cache_bytes: 1 << 30,
        }
    }
}

impl Session {
    pub fn new(cfg: &SessionConfig) -> Result<Self> {
        Ok(Self {
            engine: Engine::new(cfg.model.clone(), cfg.kv.clone())?,
            cache: LogitsCache::new(cfg.logits_cache_bytes),
            workflow: None,
            rows: Vec::new(),
            seen: BTreeSet::new(),
        })
    }

    pub fn rows(&self) -> &[RequestRow] {
        &self.rows
    }

    /// Handles one line and returns the response line without its newline.
    pub fn handle_line(&mut self, line: &str) -> String {
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return error_response(None, &Error::invalid(format!("malformed json: {e}"))),
        };
        let id = value.get("request_id").and_then(Value::as_u64);
        let req: Request = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => return error_response(id, &Error::invalid(format!("bad request: {e}"))),
        };
        match self.handle(&req) {
            Ok(mut body) => {
                body["ok"] = Value::Bool(true);
                body["request_id"] = json!(req.request_id());
                body.to_string()
            }
            Err(e) => error_response(req.request_id(), &e),
        }
    }

    pub fn handle(&mut self, req: &Request) -> Result<Value> {
        match req {
            Request::RegisterAgent { agent_id, .. } => {
                let id = self.engine.register_agent(agent_id);
                Ok(json!({"op": "register_agent", "agent_id": agent_id, "id": id.0}))
            }
            Request::DefineWorkflow { workflow, .. } => {
                let wf = compile(workflow)?;
                let agents: Vec<String> = wf.agents().map(str::to_string).collect();
                self.workflow = Some(wf);
                Ok(json!({"op": "define_workflow", "agents": agents}))
            }
            Request::Generate {
                agent_id,
                prompt_tokens,
                sampling,
                replay_policy,
                hotspot,
                ..
            } => {
                let agent = self.engine.kv().agent_id(agent_id)?;
                let greq = GenerateRequest {
                    agent,
                    prompt: prompt_tokens.clone(),
                    sampling: sampling.clone(),
                    policy: *replay_policy,
                    hotspot: hotspot.clone(),
                };
                let mut rng = RngStream::new(sampling.seed);
                let done = generate(&mut self.engine, &mut self.cache, &greq, &mut rng)?;
                let revisit = !self.seen.insert(StateKey::of(prompt_tokens));
                let o = &done.outcome;
                self.rows.push(RequestRow {
                    cell: 0,
                    request_id: self.rows.len() as u64,
                    instance: 0,
                    round: 0,
                    agent: agent_id.clone(),
                    depth: 1,
                    revisit,
                    prompt_len: prompt_tokens.len() as u64,
                    output_len: done.tokens.len() as u64,
                    cache_hit: o.cache_hit,
                    replayed_len: o.replayed_len as u64,
                    hit_ratio: o.hit_ratio(),
                    forward_passes: o.forward_passes,
                    baseline_passes: done.tokens.len() as u64,
                    prefill_passes: done.cost.prefill_passes,
                    decode_passes: done.cost.decode_passes,
                    reprefill_passes: done.cost.reprefill_passes,
                    kv_input_tokens: 0,
                    kv_matched_tokens: 0,
                });
                Ok(json!({
                    "op": "generate",
                    "agent_id": agent_id,
                    "tokens": done.tokens,
                    "hit_ratio": o.hit_ratio(),
                    "replayed_len": o.replayed_len,
                    "cache_hit": o.cache_hit,
                    "forward_passes": o.forward_passes,
                    "prefill_passes": done.cost.prefill_passes,
                    "decode_passes": done.cost.decode_passes,
                }))
            }
            Request::RunWorkflow {
                root_agent,
                input_tokens,
                options,
                ..
            } => {
                let wf = self
                    .workflow
                    .as_ref()
                    .ok_or_else(|| Error::invalid("run_workflow before define_workflow"))?;
                let run = Runtime::new(wf, &mut self.engine, &mut self.cache, options.clone())
                    .run(root_agent, input_tokens.clone())?;
                let base = self.rows.len() as u64;
                for mut row in call_rows(0, 0, &run.transcript.calls) {
                    row.request_id += base;
                    self.rows.push(row);
                }
                for c in &run.transcript.calls {
                    self.seen.insert(StateKey::of(&c.prompt));
                }
                Ok(json!({
                    "op": "run_workflow",
                    "root_agent": root_agent,
                    "output": run.output,
                    "steps": run.steps,
                    "calls": run.transcript.calls.iter().map(|c| json!({
                        "agent": c.agent,
                        "state": c.state,
                        "instance": c.instance,
                        "depth": c.depth,
                        "prompt_tokens": c.prompt,
                        "tokens": c.tokens,
                        "hit_ratio": c.outcome.hit_ratio(),
                        "replayed_len": c.outcome.replayed_len,
                        "forward_passes": c.outcome.forward_passes,
                    })).collect::<Vec<_>>(),
                    "stats": run.stats,
                }))
            }
            Request::Metrics { .. } => {
                let m = self.metrics();
                let mut v = serde_json::to_value(&m)?;
                v["op"] = json!("metrics");
                Ok(v)
            }
        }
    }

    pub fn metrics(&self) -> SessionMetrics {
        let meta = CellMeta {
            cell: 0,
            workload: "serve".into(),
            policy: "per_request".into(),
            eviction: self.engine.kv().config().policy.name().into(),
            temperature: 0.0,
            seed: 0,
        };
        let rows: Vec<&RequestRow> = self.rows.iter().collect();
        let summary = summarize_cell(&meta, None, &rows, &[]);
        SessionMetrics {
            requests: self.rows.len(),
            summary,
            kv: self.engine.kv().cache_metrics(),
            cost: self.engine.cost(),
        }
    }
}

pub fn error_response(request_id: Option<u64>, e: &Error) -> String {
    json!({
        "ok": false,
        "request_id": request_id,
        "error": ErrorBody { kind: e.kind().into(), message: e.to_string() },
    })
    .to_string()
}
