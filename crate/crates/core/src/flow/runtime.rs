//! Step-driven execution of compiled workflows.
//!
//! Each step polls every ready continuation in ascending
//! `(instance id, state name, continuation id)` order, executes the fired
//! transitions, commits them, and finally delivers wake notifications for
//! continuations whose blocking condition cleared during the step.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::hash::{derive_seed, RngStream};
use crate::kv::AgentId;
use crate::logits_cache::{generate, GenerateRequest, LogitsCache, ReplayOutcome, ReplayPolicy};
use crate::model::CostReport;
use crate::sampling::{HotspotParams, SamplingConfig};
use crate::Token;

use super::graph::{
    Action, CompiledWorkflow, FlowGraph, PromptItem, SupervisorSpec, DIALOGUE_SLOT, OUTCOME_DONE,
    OUTCOME_FAIL, OUTCOME_OK, OUTCOME_PASS, PARENT_HANDLE,
};
use super::supervisor::{
    ContId, Continuation, FireDecision, InstanceId, LinearSupervisor, Supervisor, TotSupervisor,
};

/// Per-run knobs that override what the workflow document says.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub seed: u64,
    pub max_steps: u64,
    pub policy: Option<ReplayPolicy>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<usize>,
    pub hotspot: Option<HotspotParams>,
    /// Run queued logits-cache prefetches at the end of every step.
    pub prefetch: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_steps: 100_000,
            policy: None,
            temperature: None,
            max_tokens: None,
            hotspot: None,
            prefetch: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Running,
    Sleeping,
    Finished,
    Cancelled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmCallRecord {
    pub call: usize,
    pub step: u64,
    pub instance: InstanceId,
    pub agent: String,
    pub state: String,
    pub depth: usize,
    pub seed: u64,
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    pub outcome: ReplayOutcome,
    pub cost: CostReport,
    pub sampling: SamplingConfig,
    pub policy: ReplayPolicy,
    pub hotspot: HotspotParams,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub step: u64,
    pub instance: InstanceId,
    pub agent: String,
    pub from: String,
    /// `None` when the transition finished the continuation.
    pub to: Option<String>,
    pub action: String,
    pub outcome: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub events: Vec<TransitionEvent>,
    pub calls: Vec<LlmCallRecord>,
    /// Result dialogue of every finished instance.
    pub results: BTreeMap<InstanceId, Vec<Token>>,
}

/// Callback bookkeeping used to check the supervisor protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolStats {
    pub fired: u64,
    pub commits: u64,
    pub sleeps: u64,
    pub wakes: u64,
    pub deferred: u64,
    pub retired: u64,
    pub pruned: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub fired: usize,
    pub woken: usize,
    pub finished: Vec<InstanceId>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub root: InstanceId,
    pub steps: u64,
    pub output: Vec<Token>,
    pub transcript: Transcript,
    pub stats: ProtocolStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum WaitKey {
    /// Resume log of the instance.
    Inbox(InstanceId),
    /// Yield log (or completion) of the instance.
    Outbox(InstanceId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ContStatus {
    Ready,
    Sleeping(WaitKey),
}

#[derive(Debug)]
struct Instance {
    id: InstanceId,
    agent: String,
    agent_id: AgentId,
    parent: Option<InstanceId>,
    sup: Box<dyn Supervisor>,
    pool: BTreeMap<ContId, (Continuation, ContStatus)>,
    /// Retired and finished continuations, by id.
    finals: BTreeMap<ContId, Continuation>,
    outbox: Vec<Vec<Token>>,
    inbox: Vec<Vec<Token>>,
    status: InstanceStatus,
    calls: u64,
}

impl Instance {
    fn is_live(&self) -> bool {
        matches!(
            self.status,
            InstanceStatus::Running | InstanceStatus::Sleeping
        )
    }
}

pub fn make_supervisor(spec: &SupervisorSpec) -> Box<dyn Supervisor> {
    match spec {
        SupervisorSpec::Linear => Box::new(LinearSupervisor::default()),
        SupervisorSpec::Tot(cfg) => Box::new(TotSupervisor::new(cfg.clone())),
    }
}

pub struct Runtime<'a> {
    wf: &'a CompiledWorkflow,
    engine: &'a mut Engine,
    cache: &'a mut LogitsCache,
    opts: RunOptions,
    instances: Vec<Instance>,
    waiters: BTreeMap<WaitKey, BTreeSet<(InstanceId, ContId)>>,
    notified: BTreeSet<WaitKey>,
    next_cont: ContId,
    step: u64,
    root: Option<InstanceId>,
    transcript: Transcript,
    stats: ProtocolStats,
}

impl<'a> Runtime<'a> {
    pub fn new(
        wf: &'a CompiledWorkflow,
        engine: &'a mut Engine,
        cache: &'a mut LogitsCache,
        opts: RunOptions,
    ) -> Self {
        Self {
            wf,
            engine,
            cache,
            opts,
            instances: Vec::new(),
            waiters: BTreeMap::new(),
            notified: BTreeSet::new(),
            next_cont: 0,
            step: 0,
            root: None,
            transcript: Transcript::default(),
            stats: ProtocolStats::default(),
        }
    }

    pub fn stats(&self) -> ProtocolStats {
        self.stats
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn status(&self, id: InstanceId) -> Option<InstanceStatus> {
        self.instances.get(id as usize).map(|i| i.status)
    }

    /// Continuations currently ready or sleeping in `id`.
    pub fn live_states(&self, id: InstanceId) -> Vec<String> {
        let Some(inst) = self.instances.get(id as usize) else {
            return Vec::new();
        };
        let g = self.wf.graph(&inst.agent).expect("compiled agent");
        inst.pool
            .values()
            .filter_map(|(c, _)| c.state.map(|s| g.state(s).name.clone()))
            .collect()
    }

    fn alloc_cont(&mut self) -> ContId {
        let id = self.next_cont;
        self.next_cont += 1;
        id
    }

    /// Creates an instance of `agent` and runs its supervisor's init.
    pub fn spawn(
        &mut self,
        agent: &str,
        parent: Option<InstanceId>,
        input: Vec<Token>,
    ) -> Result<InstanceId> {
        let g = self.wf.graph(agent)?;
        let id = self.instances.len() as InstanceId;
        let agent_id = self.engine.register_agent(agent);
        let mut sup = make_supervisor(&g.supervisor);
        let mut ctx = BTreeMap::new();
        ctx.insert("input".to_string(), input.clone());
        let root = Continuation {
            id: self.alloc_cont(),
            instance: id,
            state: Some(g.initial),
            ctx,
            handles: BTreeMap::new(),
            dialogue: input,
            depth: 0,
            parent: None,
            cursors: BTreeMap::new(),
            inbox_cursor: 0,
            tool_calls: BTreeMap::new(),
        };
        let pool = sup
            .init(root)
            .into_iter()
            .map(|c| (c.id, (c, ContStatus::Ready)))
            .collect();
        self.instances.push(Instance {
            id,
            agent: agent.to_string(),
            agent_id,
            parent,
            sup,
            pool,
            finals: BTreeMap::new(),
            outbox: Vec::new(),
            inbox: Vec::new(),
            status: InstanceStatus::Running,
            calls: 0,
        });
        if self.root.is_none() {
            self.root = Some(id);
        }
        Ok(id)
    }

    fn peer_of(&self, cont: &Continuation, handle: &str) -> Result<InstanceId> {
        if handle == PARENT_HANDLE {
            return self.instances[cont.instance as usize]
                .parent
                .ok_or_else(|| Error::Runtime("instance has no parent".into()));
        }
        cont.handles
            .get(handle)
            .copied()
            .ok_or_else(|| Error::Runtime(format!("handle '{handle}' is not bound yet")))
    }

    /// What `cont` would block on, if anything.
    fn blocked_on(&self, graph: &FlowGraph, cont: &Continuation) -> Result<Option<WaitKey>> {
        let Some(s) = cont.state else { return Ok(None) };
        Ok(match &graph.state(s).action {
            Action::AwaitValue { .. } => {
                let inst = &self.instances[cont.instance as usize];
                (cont.inbox_cursor >= inst.inbox.len()).then_some(WaitKey::Inbox(inst.id))
            }
            Action::Next { peer, .. } => {
                let p = self.peer_of(cont, peer)?;
                let peer = &self.instances[p as usize];
                let cursor = cont.cursors.get(&p).copied().unwrap_or(0);
                (cursor >= peer.outbox.len() && peer.is_live()).then_some(WaitKey::Outbox(p))
            }
            _ => None,
        })
    }

    fn slot(cont: &Continuation, name: &str) -> Result<Vec<Token>> {
        if name == DIALOGUE_SLOT {
            return Ok(cont.dialogue.clone());
        }
        cont.ctx
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Runtime(format!("context slot '{name}' is unset")))
    }

    /// Executes one transition out of `cont`.
    fn execute(
        &mut self,
        graph: &FlowGraph,
        cont: &Continuation,
    ) -> Result<(Continuation, String)> {
        let state = cont.state.expect("finished continuations are never fired");
        let node = graph.state(state);
        let iid = cont.instance;
        let mut child = cont.clone();
        child.id = self.alloc_cont();
        child.parent = Some(cont.id);
        let outcome: &str = match &node.action {
            Action::LlmCall {
                prompt,
                sampling,
                policy,
                hotspot,
                output,
            } => {
                let mut tokens = Vec::new();
                for item in prompt {
                    match item {
                        PromptItem::Token(t) => tokens.push(*t),
                        PromptItem::Slot { slot } => tokens.extend(Self::slot(cont, slot)?),
                    }
                }
                let mut sampling = sampling.clone();
                if let Some(t) = self.opts.temperature {
                    sampling.temperature = t;
                }
                if let Some(m) = self.opts.max_tokens {
                    sampling.max_tokens = m;
                }
                let inst = &mut self.instances[iid as usize];
                let seed = derive_seed(self.opts.seed, &[sampling.seed, iid as u64, inst.calls]);
                inst.calls += 1;
                let agent = inst.agent_id;
                let req = GenerateRequest {
                    agent,
                    prompt: tokens.clone(),
                    sampling: sampling.clone(),
                    policy: self.opts.policy.unwrap_or(*policy),
                    hotspot: self.opts.hotspot.clone().unwrap_or_else(|| hotspot.clone()),
                };
                let done = generate(self.engine, self.cache, &req, &mut RngStream::new(seed))?;
                child.ctx.insert(output.clone(), done.tokens.clone());
                child.dialogue = tokens.clone();
                child.dialogue.extend_from_slice(&done.tokens);
                child.depth += 1;
                self.transcript.calls.push(LlmCallRecord {
                    call: self.transcript.calls.len(),
                    step: self.step,
                    instance: iid,
                    agent: graph.agent.clone(),
                    state: node.name.clone(),
                    depth: child.depth,
                    seed,
                    prompt: tokens,
                    tokens: done.tokens,
                    outcome: done.outcome,
                    cost: done.cost,
                    sampling,
                    policy: req.policy,
                    hotspot: req.hotspot,
                });
                OUTCOME_OK
            }
            Action::Spawn {
                agent,
                handle,
                input,
            } => {
                let input = match input {
                    Some(s) => Self::slot(cont, s)?,
                    None => Vec::new(),
                };
                let id = self.spawn(agent, Some(iid), input)?;
                child.handles.insert(handle.clone(), id);
                OUTCOME_OK
            }
            Action::YieldValue { value } => {
                let v = Self::slot(cont, value)?;
                self.instances[iid as usize].outbox.push(v);
                self.notified.insert(WaitKey::Outbox(iid));
                OUTCOME_OK
            }
            Action::AwaitValue { output } => {
                let inst = &self.instances[iid as usize];
                let v = inst.inbox[cont.inbox_cursor].clone();
                child.inbox_cursor += 1;
                child.ctx.insert(output.clone(), v);
                OUTCOME_OK
            }
            Action::Resume { peer, value } => {
                let p = self.peer_of(cont, peer)?;
                let v = Self::slot(cont, value)?;
                let target = &mut self.instances[p as usize];
                if target.is_live() {
                    target.inbox.push(v);
                    self.notified.insert(WaitKey::Inbox(p));
                }
                OUTCOME_OK
            }
            Action::Next { peer, output } => {
                let p = self.peer_of(cont, peer)?;
                let cursor = cont.cursors.get(&p).copied().unwrap_or(0);
                match self.instances[p as usize].outbox.get(cursor) {
                    Some(v) => {
                        child.ctx.insert(output.clone(), v.clone());
                        child.cursors.insert(p, cursor + 1);
                        OUTCOME_OK
                    }
                    None => OUTCOME_DONE,
                }
            }
            Action::ToolStub {
                pass_on,
                output,
                result,
                ..
            } => {
                let n = child.tool_calls.entry(state).or_default();
                *n += 1;
                if let Some(o) = output {
                    child.ctx.insert(o.clone(), result.clone());
                }
                if *pass_on != 0 && *n >= *pass_on {
                    OUTCOME_PASS
                } else {
                    OUTCOME_FAIL
                }
            }
            Action::Terminal => {
                child.state = None;
                ""
            }
        };
        if !matches!(node.action, Action::Terminal) {
            child.state = Some(node.next[outcome]);
        }
        self.transcript.events.push(TransitionEvent {
            step: self.step,
            instance: iid,
            agent: graph.agent.clone(),
            from: node.name.clone(),
            to: child.state.map(|s| graph.state(s).name.clone()),
            action: node.action.kind().to_string(),
            outcome: outcome.to_string(),
        });
        Ok((child, outcome.to_string()))
    }

    fn sleep(&mut self, iid: InstanceId, cid: ContId, key: WaitKey) {
        let inst = &mut self.instances[iid as usize];
        if let Some(entry) = inst.pool.get_mut(&cid) {
            entry.1 = ContStatus::Sleeping(key);
            self.waiters.entry(key).or_default().insert((iid, cid));
            self.stats.sleeps += 1;
        }
    }

    /// One scheduler iteration.
    pub fn step(&mut self) -> Result<StepReport> {
        let wf = self.wf;
        self.step += 1;
        let before = {
            let mut b = self.stats;
            // Deferral alone is not progress.
            b.deferred = 0;
            b
        };
        let mut report = StepReport {
            step: self.step,
            ..StepReport::default()
        };
        let mut ready: Vec<(InstanceId, String, ContId)> = Vec::new();
        for inst in self.instances.iter().filter(|i| i.is_live()) {
            let g = wf.graph(&inst.agent)?;
            for (cid, (c, st)) in &inst.pool {
                if *st == ContStatus::Ready {
                    let name = c.state.map(|s| g.state(s).name.clone()).unwrap_or_default();
                    ready.push((inst.id, name, *cid));
                }
            }
        }
        ready.sort();
        for (iid, _, cid) in ready {
            if !self.instances[iid as usize].is_live() {
                continue;
            }
            let Some((cont, ContStatus::Ready)) =
                self.instances[iid as usize].pool.get(&cid).cloned()
            else {
                continue;
            };
            let g = wf.graph(&self.instances[iid as usize].agent)?;
            if let Some(key) = self.blocked_on(g, &cont)? {
                self.sleep(iid, cid, key);
                continue;
            }
            let decision = self.instances[iid as usize].sup.fire(&cont, g);
            match decision {
                FireDecision::Defer => {
                    self.stats.deferred += 1;
                }
                FireDecision::Prune => {
                    self.stats.pruned += 1;
                    self.instances[iid as usize].pool.remove(&cid);
                }
                FireDecision::Retire => {
                    self.stats.retired += 1;
                    let inst = &mut self.instances[iid as usize];
                    inst.pool.remove(&cid);
                    inst.finals.insert(cid, cont);
                }
                FireDecision::Fire { copies } => {
                    self.instances[iid as usize].pool.remove(&cid);
                    for _ in 0..copies {
                        self.stats.fired += 1;
                        report.fired += 1;
                        let (child, _) = self.execute(g, &cont)?;
                        self.stats.commits += 1;
                        let inst = &mut self.instances[iid as usize];
                        inst.sup.commit(&cont, &child, g);
                        if child.is_finished() {
                            inst.finals.insert(child.id, child);
                        } else {
                            inst.pool.insert(child.id, (child, ContStatus::Ready));
                        }
                    }
                }
            }
        }
        if self.opts.prefetch {
            self.cache.run_prefetches();
        }
        // Instances with nothing left are finished; their completion is a
        // notification for anyone pulling from them.
        for i in 0..self.instances.len() {
            let inst = &mut self.instances[i];
            if inst.is_live() && inst.pool.is_empty() {
                inst.status = InstanceStatus::Finished;
                let out = inst
                    .sup
                    .result()
                    .and_then(|id| inst.finals.get(&id))
                    .map(|c| c.dialogue.clone())
                    .unwrap_or_default();
                self.transcript.results.insert(inst.id, out);
                self.notified.insert(WaitKey::Outbox(inst.id));
                report.finished.push(inst.id);
            }
        }
        report.woken = self.deliver_wakes(wf)?;
        for inst in self.instances.iter_mut().filter(|i| i.is_live()) {
            let all_sleep = inst
                .pool
                .values()
                .all(|(_, s)| matches!(s, ContStatus::Sleeping(_)));
            inst.status = if all_sleep {
                InstanceStatus::Sleeping
            } else {
                InstanceStatus::Running
            };
        }
        let root = self
            .root
            .ok_or_else(|| Error::Runtime("no root instance".into()))?;
        if !self.instances[root as usize].is_live() {
            for inst in self.instances.iter_mut().filter(|i| i.is_live()) {
                inst.status = InstanceStatus::Cancelled;
                inst.pool.clear();
            }
            self.waiters.clear();
            report.done = true;
            return Ok(report);
        }
        let mut now = self.stats;
        now.deferred = 0;
        let progress = now != before || !report.finished.is_empty();
        if !progress {
            let any_ready = self
                .instances
                .iter()
                .filter(|i| i.is_live())
                .any(|i| i.pool.values().any(|(_, s)| *s == ContStatus::Ready));
            if any_ready {
                return Err(Error::Runtime(
                    "no progress: every ready state was deferred".into(),
                ));
            }
            return Err(Error::Deadlock(self.describe_waits()));
        }
        Ok(report)
    }

    fn deliver_wakes(&mut self, wf: &CompiledWorkflow) -> Result<usize> {
        let mut woken = 0;
        let keys: Vec<WaitKey> = std::mem::take(&mut self.notified).into_iter().collect();
        for key in keys {
            let Some(set) = self.waiters.remove(&key) else {
                continue;
            };
            let mut still = BTreeSet::new();
            for (iid, cid) in set {
                let inst = &self.instances[iid as usize];
                if !inst.is_live() {
                    continue;
                }
                let Some((cont, ContStatus::Sleeping(_))) = inst.pool.get(&cid).cloned() else {
                    continue;
                };
                let g = wf.graph(&inst.agent)?;
                if self.blocked_on(g, &cont)?.is_some() {
                    still.insert((iid, cid));
                    continue;
                }
                let inst = &mut self.instances[iid as usize];
                inst.sup.wake(&cont);
                if let Some(e) = inst.pool.get_mut(&cid) {
                    e.1 = ContStatus::Ready;
                }
                self.stats.wakes += 1;
                woken += 1;
            }
            if !still.is_empty() {
                self.waiters.insert(key, still);
            }
        }
        Ok(woken)
    }

    fn describe_waits(&self) -> String {
        let mut parts = Vec::new();
        for inst in self.instances.iter().filter(|i| i.is_live()) {
            let g = self.wf.graph(&inst.agent).expect("compiled agent");
            for (c, st) in inst.pool.values() {
                if let ContStatus::Sleeping(key) = st {
                    let state = c.state.map(|s| g.state(s).name.as_str()).unwrap_or("?");
                    let what = match key {
                        WaitKey::Inbox(_) => "a resume".to_string(),
                        WaitKey::Outbox(p) => {
                            let peer = &self.instances[*p as usize];
                            format!("a yield from {}#{}", peer.agent, peer.id)
                        }
                    };
                    parts.push(format!(
                        "{}#{} at '{state}' waits for {what}",
                        inst.agent, inst.id
                    ));
                }
            }
        }
        if parts.is_empty() {
            "no runnable state".to_string()
        } else {
            parts.join("; ")
        }
    }

    /// Spawns `agent` as root and steps until it finishes.
    pub fn run(mut self, agent: &str, input: Vec<Token>) -> Result<RunResult> {
        let root = self.spawn(agent, None, input)?;
        loop {
            if self.step >= self.opts.max_steps {
                return Err(Error::Runtime(format!(
                    "step limit {} reached",
                    self.opts.max_steps
                )));
            }
            if self.step()?.done {
                break;
            }
        }
        Ok(RunResult {
            root,
            steps: self.step,
            output: self
                .transcript
                .results
                .get(&root)
                .cloned()
                .unwrap_or_default(),
            transcript: self.transcript,
            stats: self.stats,
        })
    }
}
