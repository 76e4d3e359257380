//! Synthetic workloads: tree-search resampling and a scripted five-agent
//! repair loop.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::flow::{EvaluatorSpec, WorkflowDoc};
use crate::hash::{derive_seed, RngStream};
use crate::Token;

/// Agent that runs the tree search in every ToT instance.
pub const TOT_AGENT: &str = "solver";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TotWorkload {
    pub instances: usize,
    /// Tokens shared by every prompt, like a fixed task instruction.
    pub preamble_len: usize,
    /// Per-instance puzzle length is uniform in `[puzzle_min, puzzle_max]`.
    pub puzzle_min: usize,
    pub puzzle_max: usize,
    pub branching: u32,
    pub beam: usize,
    pub max_depth: usize,
    pub max_tokens: usize,
    pub evaluator: EvaluatorSpec,
}

impl Default for TotWorkload {
    fn default() -> Self {
        Self {
            instances: 100,
            preamble_len: 24,
            puzzle_min: 24,
            puzzle_max: 56,
            branching: 3,
            beam: 2,
            max_depth: 2,
            max_tokens: 500,
            evaluator: EvaluatorSpec::default(),
        }
    }
}

impl TotWorkload {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config(
                "tot workload needs at least one instance".into(),
            ));
        }
        if self.puzzle_min > self.puzzle_max || self.preamble_len + self.puzzle_min == 0 {
            return Err(Error::Config(format!(
                "puzzle length range [{}, {}] with preamble {} is empty",
                self.puzzle_min, self.puzzle_max, self.preamble_len
            )));
        }
        if self.branching == 0 || self.beam == 0 || self.max_depth == 0 || self.max_tokens == 0 {
            return Err(Error::Config(
                "tot branching, beam, max_depth and max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Longest prompt plus output a single request can reach.
    pub fn longest_request(&self) -> usize {
        self.preamble_len + self.puzzle_max + self.max_depth * self.max_tokens
    }

    /// Workflow with one llm_call per depth, each extending the dialogue.
    pub fn workflow(&self) -> WorkflowDoc {
        let mut states: Vec<serde_json::Value> = (0..self.max_depth)
            .map(|d| {
                let next = if d + 1 == self.max_depth {
                    "answer".to_string()
                } else {
                    format!("think{}", d + 1)
                };
                json!({
                    "name": format!("think{d}"),
                    "action": "llm_call",
                    "params": {
                        "prompt": [{"slot": "dialogue"}],
                        "sampling": {"max_tokens": self.max_tokens, "seed": d as u64},
                        "policy": "step_wise"
                    },
                    "next": next
                })
            })
            .collect();
        states.push(json!({"name": "answer", "action": "terminal"}));
        let doc = json!({
            "schema_version": crate::flow::SCHEMA_VERSION,
            "agents": [{
                "name": TOT_AGENT,
                "initial": "think0",
                "supervisor": {
                    "kind": "tot",
                    "branching": self.branching,
                    "beam": self.beam,
                    "max_depth": self.max_depth,
                    "evaluator": self.evaluator
                },
                "states": states
            }]
        });
        serde_json::from_value(doc).expect("generated workflow matches the schema")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TotInstance {
    pub id: usize,
    pub prompt: Vec<Token>,
}

/// `n` arithmetic-puzzle-style prompts: a shared preamble, then digits and
/// operators drawn per instance.
pub fn gen_tot_workload(
    spec: &TotWorkload,
    n: usize,
    seed: u64,
    vocab_size: usize,
) -> Vec<TotInstance> {
    let vocab = vocab_size.max(2) as u64;
    let mut shared = RngStream::new(derive_seed(seed, &[0x70_74]));
    let preamble: Vec<Token> = (0..spec.preamble_len)
        .map(|_| (shared.next_u64() % vocab) as Token)
        .collect();
    (0..n)
        .map(|id| {
            let mut rng = RngStream::new(derive_seed(seed, &[0x70_75, id as u64]));
            let span = (spec.puzzle_max - spec.puzzle_min + 1) as u64;
            let len = spec.puzzle_min + (rng.next_u64() % span) as usize;
            let mut prompt = preamble.clone();
            prompt.extend((0..len).map(|_| (rng.next_u64() % vocab) as Token));
            TotInstance { id, prompt }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Decision,
    Patcher,
    Viewer,
    Searcher,
    Summary,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Decision,
        Role::Patcher,
        Role::Viewer,
        Role::Searcher,
        Role::Summary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Decision => "Decision",
            Role::Patcher => "Patcher",
            Role::Viewer => "Viewer",
            Role::Searcher => "Searcher",
            Role::Summary => "Summary",
        }
    }

    /// Main-path agents that carry most of the traffic.
    pub fn is_main_path(self) -> bool {
        matches!(self, Role::Decision | Role::Patcher | Role::Viewer)
    }
}

/// Piece of a scripted prompt. `PromptOf`/`OutputOf` index earlier calls of
/// the same round; the `Prev*` forms index calls of the previous round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Tokens(Vec<Token>),
    PromptOf(usize),
    OutputOf(usize),
    PrevPromptOf(usize),
    PrevOutputOf(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptCall {
    pub role: Role,
    pub segments: Vec<Segment>,
    pub max_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRound {
    pub index: usize,
    pub calls: Vec<ScriptCall>,
}

/// Segment lengths of the repair loop. Outputs always run to `*_output`
/// tokens because the synthetic model has no stop token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct R3aShape {
    /// Design context read by every Decision call.
    pub context_len: usize,
    /// Source files under repair; Patcher calls rotate through them.
    pub files: usize,
    pub file_len: usize,
    pub system_len: usize,
    pub digest_len: usize,
    pub task_len: usize,
    pub instruction_len: usize,
    pub query_len: usize,
    /// Retrieved documents of one Searcher call; the memory spike.
    pub document_len: usize,
    /// Searcher and then Summary run every `search_every` rounds.
    pub search_every: usize,
    pub patchers: usize,
    pub viewers: usize,
    pub decision_output: usize,
    pub patch_output: usize,
    pub view_output: usize,
    pub search_output: usize,
    pub summary_output: usize,
}

impl Default for R3aShape {
    fn default() -> Self {
        Self {
            context_len: 300,
            files: 4,
            file_len: 400,
            system_len: 16,
            digest_len: 40,
            task_len: 24,
            instruction_len: 8,
            query_len: 16,
            document_len: 1200,
            search_every: 3,
            patchers: 2,
            viewers: 2,
            decision_output: 48,
            patch_output: 96,
            view_output: 32,
            search_output: 64,
            summary_output: 96,
        }
    }
}

impl R3aShape {
    pub fn validate(&self) -> Result<()> {
        if self.patchers == 0 || self.search_every == 0 || self.files == 0 {
            return Err(Error::Config(
                "r3a patchers, files and search_every must be >= 1".into(),
            ));
        }
        if self.viewers > self.patchers {
            return Err(Error::Config(format!(
                "r3a viewers ({}) cannot exceed patchers ({})",
                self.viewers, self.patchers
            )));
        }
        let outputs = [
            self.decision_output,
            self.patch_output,
            self.view_output,
            self.search_output,
            self.summary_output,
        ];
        if outputs.contains(&0) {
            return Err(Error::Config("r3a output lengths must be >= 1".into()));
        }
        if self.context_len + self.system_len + self.digest_len == 0
            || self.system_len + self.query_len + self.document_len == 0
        {
            return Err(Error::Config("r3a prompts must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct R3aScript {
    pub seed: u64,
    pub shape: R3aShape,
    pub rounds: Vec<ScriptRound>,
}

impl R3aScript {
    /// Prompt length of every call of every round, outputs at full length.
    pub fn prompt_lens(&self) -> Vec<Vec<usize>> {
        let mut all: Vec<Vec<usize>> = Vec::with_capacity(self.rounds.len());
        for (ri, round) in self.rounds.iter().enumerate() {
            let mut lens: Vec<usize> = Vec::with_capacity(round.calls.len());
            for call in &round.calls {
                let n = call
                    .segments
                    .iter()
                    .map(|s| match s {
                        Segment::Tokens(t) => t.len(),
                        Segment::PromptOf(i) => lens[*i],
                        Segment::OutputOf(i) => round.calls[*i].max_tokens,
                        Segment::PrevPromptOf(i) => all[ri - 1][*i],
                        Segment::PrevOutputOf(i) => self.rounds[ri - 1].calls[*i].max_tokens,
                    })
                    .sum();
                lens.push(n);
            }
            all.push(lens);
        }
        all
    }

    pub fn longest_request(&self) -> usize {
        self.rounds
            .iter()
            .zip(self.prompt_lens())
            .flat_map(|(r, lens)| {
                lens.into_iter()
                    .zip(r.calls.iter().map(|c| c.max_tokens))
                    .map(|(p, o)| p + o)
                    .collect::<Vec<_>>()
            })
            .max()
            .unwrap_or(0)
    }

    /// Share of invocations issued by main-path agents in each round.
    pub fn main_path_invocation_share(&self) -> Vec<f64> {
        self.rounds
            .iter()
            .map(|r| {
                let hot = r.calls.iter().filter(|c| c.role.is_main_path()).count();
                hot as f64 / r.calls.len() as f64
            })
            .collect()
    }

    /// Share of input plus output tokens from main-path agents over the run.
    pub fn main_path_token_share(&self) -> f64 {
        let (mut hot, mut all) = (0usize, 0usize);
        for (r, lens) in self.rounds.iter().zip(self.prompt_lens()) {
            for (call, p) in r.calls.iter().zip(lens) {
                let n = p + call.max_tokens;
                all += n;
                if call.role.is_main_path() {
                    hot += n;
                }
            }
        }
        hot as f64 / all.max(1) as f64
    }
}

/// Static repair loop. Every round runs Decision, then the Patchers on
/// rotating files, then the Viewers on the first Patchers' results; every `search_every`-th round appends a Searcher call
/// followed by a Summary over its results.
pub fn gen_r3a_workload(
    shape: &R3aShape,
    rounds: usize,
    seed: u64,
    vocab_size: usize,
) -> R3aScript {
    let vocab = vocab_size.max(2) as u64;
    let fresh = |labels: &[u64], n: usize| -> Vec<Token> {
        let mut rng = RngStream::new(derive_seed(seed, labels));
        (0..n).map(|_| (rng.next_u64() % vocab) as Token).collect()
    };
    let context = fresh(&[1], shape.context_len);
    let files: Vec<Vec<Token>> = (0..shape.files)
        .map(|f| fresh(&[7, f as u64], shape.file_len))
        .collect();
    let sys_decision = fresh(&[2, 0], shape.system_len);
    let sys_patcher = fresh(&[2, 1], shape.system_len);
    let sys_viewer = fresh(&[2, 2], shape.instruction_len);
    let sys_searcher = fresh(&[2, 3], shape.system_len);
    let sys_summary = fresh(&[2, 4], shape.instruction_len);

    let rounds = (0..rounds)
        .map(|r| {
            let ru = r as u64;
            // Decision reads the design context in the first round and the
            // last review of the previous round afterwards.
            let mut head = if r == 0 {
                vec![Segment::Tokens(context.clone())]
            } else {
                let v = 1 + shape.patchers;
                vec![Segment::PrevPromptOf(v), Segment::PrevOutputOf(v)]
            };
            head.push(Segment::Tokens(sys_decision.clone()));
            head.push(Segment::Tokens(fresh(&[3, ru], shape.digest_len)));
            let mut calls = vec![ScriptCall {
                role: Role::Decision,
                segments: head,
                max_tokens: shape.decision_output,
            }];
            for p in 0..shape.patchers {
                calls.push(ScriptCall {
                    role: Role::Patcher,
                    segments: vec![
                        Segment::Tokens(sys_patcher.clone()),
                        Segment::Tokens(files[(r * shape.patchers + p) % shape.files].clone()),
                        Segment::OutputOf(0),
                        Segment::Tokens(fresh(&[4, ru, p as u64], shape.task_len)),
                    ],
                    max_tokens: shape.patch_output,
                });
            }
            for p in 0..shape.viewers {
                calls.push(ScriptCall {
                    role: Role::Viewer,
                    segments: vec![
                        Segment::PromptOf(1 + p),
                        Segment::OutputOf(1 + p),
                        Segment::Tokens(sys_viewer.clone()),
                    ],
                    max_tokens: shape.view_output,
                });
            }
            if (r + 1) % shape.search_every == 0 {
                let s = calls.len();
                calls.push(ScriptCall {
                    role: Role::Searcher,
                    segments: vec![
                        Segment::Tokens(sys_searcher.clone()),
                        Segment::Tokens(fresh(&[5, ru], shape.query_len)),
                        Segment::Tokens(fresh(&[6, ru], shape.document_len)),
                    ],
                    max_tokens: shape.search_output,
                });
                calls.push(ScriptCall {
                    role: Role::Summary,
                    segments: vec![
                        Segment::PromptOf(s),
                        Segment::OutputOf(s),
                        Segment::Tokens(sys_summary.clone()),
                    ],
                    max_tokens: shape.summary_output,
                });
            }
            ScriptRound { index: r, calls }
        })
        .collect();
    R3aScript {
        seed,
        shape: shape.clone(),
        rounds,
    }
}
