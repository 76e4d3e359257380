//! Prefill/decode sessions over the synthetic model and the KV scheduler.
//!
//! A [`KvRef`] is a live sequence: it keeps its deepest trie node pinned so
//! nothing on its path can be evicted. A suspended ref drops the pin; the next
//! decode re-matches the trie and re-prefills whatever was evicted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::PrefixHash;
use crate::kv::{AgentId, InsertKind, KvConfig, KvScheduler, NodeId};
use crate::model::{logits_for_hash, CostReport, LogitsVector, ModelConfig};
use crate::Token;

/// Handle to a materialized sequence.
#[derive(Debug)]
pub struct KvRef {
    owner: AgentId,
    tokens: Vec<Token>,
    hash: PrefixHash,
    node: NodeId,
    pinned: bool,
}

impl KvRef {
    pub fn owner(&self) -> AgentId {
        self.owner
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_pinned(&self) -> bool {
        self.pinned
    }
}

/// Engine-wide counters beyond the forward-pass meter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvAccounting {
    /// Tokens newly added to the trie by prefill, re-prefill or decode.
    pub materialized_tokens: u64,
    /// Decode steps whose KV token already existed in the trie.
    pub decode_reused: u64,
}

#[derive(Debug)]
pub struct Engine {
    model: ModelConfig,
    kv: KvScheduler,
    cost: CostReport,
    accounting: KvAccounting,
}

impl Engine {
    pub fn new(model: ModelConfig, kv: KvConfig) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            model,
            kv: KvScheduler::new(kv)?,
            cost: CostReport::default(),
            accounting: KvAccounting::default(),
        })
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    pub fn kv(&self) -> &KvScheduler {
        &self.kv
    }

    pub fn kv_mut(&mut self) -> &mut KvScheduler {
        &mut self.kv
    }

    pub fn cost(&self) -> CostReport {
        self.cost
    }

    pub fn accounting(&self) -> KvAccounting {
        self.accounting
    }

    pub fn register_agent(&mut self, name: &str) -> AgentId {
        self.kv.register_agent(name)
    }

    /// Admission of one request by `agent`.
    pub fn begin_request(&mut self, agent: AgentId) {
        self.kv.profiler_mut().begin_request(agent);
    }

    /// Completion of one request that emitted `output_tokens`.
    pub fn end_request(&mut self, agent: AgentId, output_tokens: usize) {
        let p = self.kv.profiler_mut();
        p.record_output(agent, output_tokens);
        p.end_request(agent);
    }

    /// Materializes `prompt` and returns the logits for the next position.
    pub fn prefill(&mut self, owner: AgentId, prompt: &[Token]) -> Result<(LogitsVector, KvRef)> {
        if prompt.is_empty() {
            return Err(Error::invalid("prefill requires a non-empty prompt"));
        }
        let out = self.kv.insert_tokens(prompt, owner, InsertKind::Prompt)?;
        self.cost.prefill_passes += 1;
        self.cost.prefill_tokens += out.created as u64;
        self.accounting.materialized_tokens += out.created as u64;
        self.kv.pin(out.node);
        let hash = PrefixHash::of(prompt);
        let r = KvRef {
            owner,
            tokens: prompt.to_vec(),
            hash,
            node: out.node,
            pinned: true,
        };
        Ok((logits_for_hash(&self.model, hash), r))
    }

    /// Re-attaches a suspended ref, re-prefilling any evicted suffix.
    fn ensure_resident(&mut self, r: &mut KvRef) -> Result<()> {
        if r.pinned {
            return Ok(());
        }
        let out = self
            .kv
            .insert_tokens(&r.tokens, r.owner, InsertKind::Rematerialize)?;
        if out.created > 0 {
            self.cost.prefill_passes += 1;
            self.cost.prefill_tokens += out.created as u64;
            self.cost.reprefill_passes += 1;
            self.cost.reprefill_tokens += out.created as u64;
            self.accounting.materialized_tokens += out.created as u64;
        }
        self.kv.pin(out.node);
        r.node = out.node;
        r.pinned = true;
        Ok(())
    }

    /// Appends `token` to the sequence and returns the logits after it.
    pub fn decode(&mut self, r: &mut KvRef, token: Token) -> Result<LogitsVector> {
        if token as usize >= self.model.vocab_size {
            return Err(Error::invalid(format!(
                "token {token} outside vocabulary of {}",
                self.model.vocab_size
            )));
        }
        self.ensure_resident(r)?;
        let (node, created) = self.kv.append_token(r.node, token, r.owner)?;
        self.kv.pin(node);
        self.kv.unpin(r.node);
        r.node = node;
        r.tokens.push(token);
        r.hash.push(token);
        self.cost.decode_passes += 1;
        if created {
            self.accounting.materialized_tokens += 1;
        } else {
            self.accounting.decode_reused += 1;
        }
        Ok(logits_for_hash(&self.model, r.hash))
    }

    /// Drops the pin but keeps the token record; eviction may now reclaim it.
    pub fn suspend(&mut self, r: &mut KvRef) {
        if r.pinned {
            self.kv.unpin(r.node);
            r.pinned = false;
        }
    }

    pub fn release(&mut self, mut r: KvRef) {
        self.suspend(&mut r);
    }
}
