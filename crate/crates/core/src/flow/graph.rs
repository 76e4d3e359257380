//! Workflow documents and their compilation into flow graphs.
//!
//! A document lists agents; each agent is a set of named states, one of which
//! is initial. A state carries one action and the transition(s) taken when
//! the action completes. `next` is either a single state name (every outcome
//! goes there) or a map from outcome to state name.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::logits_cache::ReplayPolicy;
use crate::sampling::{HotspotParams, SamplingConfig};
use crate::Token;

pub const SCHEMA_VERSION: u32 = 1;

/// Handle that always names the spawning instance.
pub const PARENT_HANDLE: &str = "parent";

/// Context slot that always holds the instance's dialogue.
pub const DIALOGUE_SLOT: &str = "dialogue";

pub const OUTCOME_OK: &str = "ok";
pub const OUTCOME_DONE: &str = "done";
pub const OUTCOME_PASS: &str = "pass";
pub const OUTCOME_FAIL: &str = "fail";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowDoc {
    pub schema_version: u32,
    pub agents: Vec<AgentDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<String>,
    #[serde(default)]
    pub supervisor: SupervisorSpec,
    pub states: Vec<StateDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDoc {
    pub name: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<NextDoc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextDoc {
    One(String),
    ByOutcome(BTreeMap<String, String>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SupervisorSpec {
    #[default]
    Linear,
    Tot(ToTConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToTConfig {
    pub branching: u32,
    pub beam: usize,
    pub max_depth: usize,
    #[serde(default)]
    pub evaluator: EvaluatorSpec,
}

impl ToTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching == 0 || self.beam == 0 || self.max_depth == 0 {
            return Err(Error::invalid(
                "tot branching, beam and max_depth must all be >= 1",
            ));
        }
        Ok(())
    }
}

/// Deterministic transcript scorer: a hash of the dialogue mapped to [0, 1).
/// A child whose score exceeds `accept_above` ends the search.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSpec {
    pub salt: u64,
    pub accept_above: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptItem {
    Token(Token),
    Slot { slot: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    LlmCall {
        prompt: Vec<PromptItem>,
        sampling: SamplingConfig,
        policy: ReplayPolicy,
        hotspot: HotspotParams,
        output: String,
    },
    Spawn {
        agent: String,
        handle: String,
        input: Option<String>,
    },
    YieldValue {
        value: String,
    },
    AwaitValue {
        output: String,
    },
    Resume {
        peer: String,
        value: String,
    },
    Next {
        peer: String,
        output: String,
    },
    ToolStub {
        name: String,
        /// Passes on this invocation count (1-based) and every later one;
        /// 0 never passes.
        pass_on: u32,
        output: Option<String>,
        result: Vec<Token>,
    },
    Terminal,
}

impl Action {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::LlmCall { .. } => "llm_call",
            Self::Spawn { .. } => "spawn",
            Self::YieldValue { .. } => "yield_value",
            Self::AwaitValue { .. } => "await_value",
            Self::Resume { .. } => "resume",
            Self::Next { .. } => "next",
            Self::ToolStub { .. } => "tool_stub",
            Self::Terminal => "terminal",
        }
    }

    /// Outcomes the action can produce.
    pub fn outcomes(&self) -> &'static [&'static str] {
        match self {
            Self::Next { .. } => &[OUTCOME_OK, OUTCOME_DONE],
            Self::ToolStub { .. } => &[OUTCOME_PASS, OUTCOME_FAIL],
            Self::Terminal => &[],
            _ => &[OUTCOME_OK],
        }
    }
}

fn default_output() -> String {
    "last".to_string()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LlmParams {
    prompt: Vec<PromptItem>,
    #[serde(default)]
    sampling: SamplingConfig,
    #[serde(default)]
    policy: ReplayPolicy,
    #[serde(default)]
    hotspot: HotspotParams,
    #[serde(default = "default_output")]
    output: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpawnParams {
    agent: String,
    handle: String,
    #[serde(default)]
    input: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueParams {
    #[serde(default = "default_output")]
    value: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputParams {
    #[serde(default = "default_output")]
    output: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PeerValueParams {
    peer: String,
    #[serde(default = "default_output")]
    value: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PeerOutputParams {
    peer: String,
    #[serde(default = "default_output")]
    output: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ToolParams {
    name: String,
    #[serde(default = "one")]
    pass_on: u32,
    #[serde(default)]
    output: Option<String>,
    #[serde(default)]
    result: Vec<Token>,
}

fn one() -> u32 {
    1
}

fn params<T: for<'de> Deserialize<'de>>(agent: &str, state: &str, v: &Value) -> Result<T> {
    let v = if v.is_null() {
        Value::Object(Default::default())
    } else {
        v.clone()
    };
    serde_json::from_value(v)
        .map_err(|e| Error::compile(agent, format!("state '{state}': bad params: {e}")))
}

fn parse_action(agent: &str, s: &StateDoc) -> Result<Action> {
    let p = &s.params;
    let n = s.name.as_str();
    Ok(match s.action.as_str() {
        "llm_call" => {
            let q: LlmParams = params(agent, n, p)?;
            q.sampling
                .validate()
                .and_then(|_| q.hotspot.validate())
                .map_err(|e| Error::compile(agent, format!("state '{n}': {e}")))?;
            Action::LlmCall {
                prompt: q.prompt,
                sampling: q.sampling,
                policy: q.policy,
                hotspot: q.hotspot,
                output: q.output,
            }
        }
        "spawn" => {
            let q: SpawnParams = params(agent, n, p)?;
            Action::Spawn {
                agent: q.agent,
                handle: q.handle,
                input: q.input,
            }
        }
        "yield_value" => Action::YieldValue {
            value: params::<ValueParams>(agent, n, p)?.value,
        },
        "await_value" => Action::AwaitValue {
            output: params::<OutputParams>(agent, n, p)?.output,
        },
        "resume" => {
            let q: PeerValueParams = params(agent, n, p)?;
            Action::Resume {
                peer: q.peer,
                value: q.value,
            }
        }
        "next" => {
            let q: PeerOutputParams = params(agent, n, p)?;
            Action::Next {
                peer: q.peer,
                output: q.output,
            }
        }
        "tool_stub" => {
            let q: ToolParams = params(agent, n, p)?;
            Action::ToolStub {
                name: q.name,
                pass_on: q.pass_on,
                output: q.output,
                result: q.result,
            }
        }
        "terminal" => {
            if !(p.is_null() || p.as_object().is_some_and(|o| o.is_empty())) {
                return Err(Error::compile(
                    agent,
                    format!("state '{n}': terminal takes no params"),
                ));
            }
            Action::Terminal
        }
        other => {
            return Err(Error::compile(
                agent,
                format!("state '{n}': unknown action '{other}'"),
            ))
        }
    })
}

pub type StateIdx = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct StateNode {
    pub name: String,
    pub action: Action,
    /// Outcome to successor; empty for terminal states.
    pub next: BTreeMap<String, StateIdx>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowGraph {
    pub agent: String,
    pub states: Vec<StateNode>,
    pub initial: StateIdx,
    pub supervisor: SupervisorSpec,
    index: BTreeMap<String, StateIdx>,
}

impl FlowGraph {
    pub fn state(&self, idx: StateIdx) -> &StateNode {
        &self.states[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<StateIdx> {
        self.index.get(name).copied()
    }

    /// Distinct directed edges between states.
    pub fn transitions(&self) -> Vec<(StateIdx, StateIdx)> {
        let set: BTreeSet<(StateIdx, StateIdx)> = self
            .states
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.next.values().map(move |&j| (i, j)))
            .collect();
        set.into_iter().collect()
    }

    pub fn has_action(&self, kind: &str) -> bool {
        self.states.iter().any(|s| s.action.kind() == kind)
    }

    /// Handles bound by this agent's spawn states, with the spawned agent.
    pub fn handles(&self) -> BTreeMap<&str, &str> {
        self.states
            .iter()
            .filter_map(|s| match &s.action {
                Action::Spawn { agent, handle, .. } => Some((handle.as_str(), agent.as_str())),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledWorkflow {
    pub doc: WorkflowDoc,
    graphs: BTreeMap<String, FlowGraph>,
}

impl CompiledWorkflow {
    pub fn graph(&self, agent: &str) -> Result<&FlowGraph> {
        self.graphs
            .get(agent)
            .ok_or_else(|| Error::UnknownAgent(agent.to_string()))
    }

    /// Agents in document order.
    pub fn agents(&self) -> impl Iterator<Item = &str> {
        self.doc.agents.iter().map(|a| a.name.as_str())
    }
}

fn compile_agent(a: &AgentDoc) -> Result<FlowGraph> {
    let name = a.name.as_str();
    if let SupervisorSpec::Tot(t) = &a.supervisor {
        t.validate()
            .map_err(|e| Error::compile(name, e.to_string()))?;
    }
    if a.states.is_empty() {
        return Err(Error::compile(name, "agent has no states"));
    }
    let mut index = BTreeMap::new();
    for (i, s) in a.states.iter().enumerate() {
        if index.insert(s.name.clone(), i).is_some() {
            return Err(Error::compile(
                name,
                format!("duplicate state '{}'", s.name),
            ));
        }
    }
    let initial_name = a
        .initial
        .as_deref()
        .ok_or_else(|| Error::compile(name, "missing initial state"))?;
    let initial = *index.get(initial_name).ok_or_else(|| {
        Error::compile(
            name,
            format!("missing initial state: '{initial_name}' is not defined"),
        )
    })?;
    let mut states = Vec::with_capacity(a.states.len());
    for s in &a.states {
        let action = parse_action(name, s)?;
        let outcomes = action.outcomes();
        let resolve = |target: &str| {
            index.get(target).copied().ok_or_else(|| {
                Error::compile(
                    name,
                    format!(
                        "state '{}' transitions to undefined state '{target}'",
                        s.name
                    ),
                )
            })
        };
        let mut next = BTreeMap::new();
        match (&s.next, outcomes.is_empty()) {
            (None, true) => {}
            (Some(_), true) => {
                return Err(Error::compile(
                    name,
                    format!("terminal state '{}' has outgoing transitions", s.name),
                ))
            }
            (None, false) => {
                return Err(Error::compile(
                    name,
                    format!("state '{}' has no transition", s.name),
                ))
            }
            (Some(NextDoc::One(t)), false) => {
                let j = resolve(t)?;
                for o in outcomes {
                    next.insert(o.to_string(), j);
                }
            }
            (Some(NextDoc::ByOutcome(m)), false) => {
                for (o, t) in m {
                    if !outcomes.contains(&o.as_str()) {
                        return Err(Error::compile(
                            name,
                            format!(
                                "state '{}': outcome '{o}' is not produced by {}",
                                s.name,
                                action.kind()
                            ),
                        ));
                    }
                    next.insert(o.clone(), resolve(t)?);
                }
                if let Some(o) = outcomes.iter().find(|o| !m.contains_key(**o)) {
                    return Err(Error::compile(
                        name,
                        format!("state '{}': no transition for outcome '{o}'", s.name),
                    ));
                }
            }
        }
        states.push(StateNode {
            name: s.name.clone(),
            action,
            next,
        });
    }
    let mut seen = vec![false; states.len()];
    let mut queue = VecDeque::from([initial]);
    seen[initial] = true;
    while let Some(i) = queue.pop_front() {
        for &j in states[i].next.values() {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::compile(
            name,
            format!("state '{}' is unreachable", states[i].name),
        ));
    }
    Ok(FlowGraph {
        agent: a.name.clone(),
        states,
        initial,
        supervisor: a.supervisor.clone(),
        index,
    })
}

/// Validates and compiles a document.
pub fn compile(doc: &WorkflowDoc) -> Result<CompiledWorkflow> {
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    if doc.agents.is_empty() {
        return Err(Error::invalid("workflow defines no agents"));
    }
    let mut graphs = BTreeMap::new();
    for a in &doc.agents {
        let g = compile_agent(a)?;
        if graphs.insert(a.name.clone(), g).is_some() {
            return Err(Error::compile(&a.name, "agent defined twice"));
        }
    }
    let spawned: BTreeSet<&str> = graphs
        .values()
        .flat_map(|g| g.handles().into_values())
        .collect();
    for g in graphs.values() {
        let handles = g.handles();
        for h in handles.values() {
            if !graphs.contains_key(*h) {
                return Err(Error::compile(
                    &g.agent,
                    format!("spawns unknown agent '{h}'"),
                ));
            }
        }
        for s in &g.states {
            let (peer, needs) = match &s.action {
                Action::Next { peer, .. } => (peer, "yield_value"),
                Action::Resume { peer, .. } => (peer, "await_value"),
                _ => continue,
            };
            let target = if peer == PARENT_HANDLE {
                if !spawned.contains(g.agent.as_str()) {
                    return Err(Error::compile(
                        &g.agent,
                        format!(
                            "state '{}' addresses a parent but no agent spawns it",
                            s.name
                        ),
                    ));
                }
                None
            } else {
                Some(*handles.get(peer.as_str()).ok_or_else(|| {
                    Error::compile(
                        &g.agent,
                        format!("state '{}' uses unknown handle '{peer}'", s.name),
                    )
                })?)
            };
            if let Some(t) = target {
                if !graphs[t].has_action(needs) {
                    return Err(Error::compile(
                        &g.agent,
                        format!(
                            "state '{}': {} on '{t}' has no matching {needs} state",
                            s.name,
                            s.action.kind()
                        ),
                    ));
                }
            }
        }
    }
    Ok(CompiledWorkflow {
        doc: doc.clone(),
        graphs,
    })
}

pub fn compile_json(text: &str) -> Result<CompiledWorkflow> {
    let doc: WorkflowDoc = serde_json::from_str(text)?;
    compile(&doc)
}
