//! Executes a scripted repair loop against one engine.

use crate::engine::Engine;
use crate::error::Result;
use crate::hash::{derive_seed, RngStream};
use crate::kv::{AgentId, RoundSnapshot};
use crate::logits_cache::{generate, GenerateRequest, LogitsCache, ReplayPolicy};
use crate::sampling::{HotspotParams, SamplingConfig};
use crate::Token;

use super::workload::{R3aScript, Role, Segment};

#[derive(Clone, Debug, PartialEq)]
pub struct R3aCallRecord {
    pub round: usize,
    pub call: usize,
    pub role: Role,
    pub prompt_len: usize,
    pub output_len: usize,
    /// Prompt tokens accounted by the scheduler and how many of them hit.
    pub kv_input_tokens: u64,
    pub kv_matched_tokens: u64,
    pub forward_passes: u64,
    pub prefill_passes: u64,
    pub decode_passes: u64,
    pub reprefill_passes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct R3aRun {
    pub calls: Vec<R3aCallRecord>,
    pub rounds: Vec<RoundSnapshot>,
    pub agents: Vec<(AgentId, Role)>,
}

/// Runs every round of `script` in order. The engine's eviction policy and
/// capacity are whatever it was built with.
pub fn run_r3a(
    script: &R3aScript,
    engine: &mut Engine,
    temperature: f64,
    seed: u64,
    hotspot_roles: &[Role],
) -> Result<R3aRun> {
    let agents: Vec<(AgentId, Role)> = Role::ALL
        .iter()
        .map(|&r| (engine.register_agent(r.name()), r))
        .collect();
    let id_of = |role: Role| {
        agents
            .iter()
            .find(|(_, r)| *r == role)
            .expect("registered")
            .0
    };
    engine
        .kv_mut()
        .set_hotspot_agents(hotspot_roles.iter().map(|&r| id_of(r)));
    // Prompts never repeat exactly, so the logits cache stays out of the way.
    let mut cache = LogitsCache::new(0);
    let mut calls = Vec::new();
    let mut rounds = Vec::with_capacity(script.rounds.len());
    let mut prev_prompts: Vec<Vec<Token>> = Vec::new();
    let mut prev_outputs: Vec<Vec<Token>> = Vec::new();
    for round in &script.rounds {
        let mut prompts: Vec<Vec<Token>> = Vec::with_capacity(round.calls.len());
        let mut outputs: Vec<Vec<Token>> = Vec::with_capacity(round.calls.len());
        for (ci, call) in round.calls.iter().enumerate() {
            let mut prompt = Vec::new();
            for seg in &call.segments {
                match seg {
                    Segment::Tokens(t) => prompt.extend_from_slice(t),
                    Segment::PromptOf(i) => prompt.extend_from_slice(&prompts[*i]),
                    Segment::OutputOf(i) => prompt.extend_from_slice(&outputs[*i]),
                    Segment::PrevPromptOf(i) => prompt.extend_from_slice(&prev_prompts[*i]),
                    Segment::PrevOutputOf(i) => prompt.extend_from_slice(&prev_outputs[*i]),
                }
            }
            let req = GenerateRequest {
                agent: id_of(call.role),
                prompt,
                sampling: SamplingConfig {
                    temperature,
                    max_tokens: call.max_tokens,
                    ..SamplingConfig::default()
                },
                policy: ReplayPolicy::None,
                hotspot: HotspotParams::default(),
            };
            let before = engine.kv().counters();
            let mut rng = RngStream::new(derive_seed(seed, &[round.index as u64, ci as u64]));
            let done = generate(engine, &mut cache, &req, &mut rng)?;
            let after = engine.kv().counters();
            let input = after.hotspot_input_tokens + after.non_hotspot_input_tokens
                - before.hotspot_input_tokens
                - before.non_hotspot_input_tokens;
            let matched = after.hotspot_matched_tokens + after.non_hotspot_matched_tokens
                - before.hotspot_matched_tokens
                - before.non_hotspot_matched_tokens;
            calls.push(R3aCallRecord {
                round: round.index,
                call: ci,
                role: call.role,
                prompt_len: req.prompt.len(),
                output_len: done.tokens.len(),
                kv_input_tokens: input,
                kv_matched_tokens: matched,
                forward_passes: done.cost.forward_passes(),
                prefill_passes: done.cost.prefill_passes,
                decode_passes: done.cost.decode_passes,
                reprefill_passes: done.cost.reprefill_passes,
            });
            prompts.push(req.prompt);
            outputs.push(done.tokens);
        }
        rounds.push(engine.kv_mut().end_round());
        prev_prompts = prompts;
        prev_outputs = outputs;
    }
    Ok(R3aRun {
        calls,
        rounds,
        agents,
    })
}
