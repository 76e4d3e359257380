//! Agents as finite-state flow graphs driven by supervisors.

pub mod graph;
pub mod runtime;
pub mod supervisor;

pub use graph::{
    compile, compile_json, Action, AgentDoc, CompiledWorkflow, EvaluatorSpec, FlowGraph, NextDoc,
    PromptItem, StateDoc, StateIdx, StateNode, SupervisorSpec, ToTConfig, WorkflowDoc,
    SCHEMA_VERSION,
};
pub use runtime::{
    InstanceStatus, LlmCallRecord, ProtocolStats, RunOptions, RunResult, Runtime, StepReport,
    Transcript, TransitionEvent,
};
pub use supervisor::{
    evaluate, ContId, Continuation, FireDecision, InstanceId, LinearSupervisor, Supervisor,
    TotSupervisor,
};

/// Closed-form llm_call count of a tree search: `sum over d of kept(d-1) * b`
/// with `kept(0) = 1` and `kept(d) = min(beam, kept(d-1) * b)`.
pub fn tot_call_count(branching: u64, beam: u64, depth: u64) -> u64 {
    let mut kept = 1;
    let mut total = 0;
    for _ in 0..depth {
        let produced = kept * branching;
        total += produced;
        kept = produced.min(beam);
    }
    total
}
