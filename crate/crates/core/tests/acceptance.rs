//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach the output.
//! Exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use agentcache::engine::Engine;
use agentcache::flow::{compile, tot_call_count, LlmCallRecord, RunOptions, Runtime};
use agentcache::harness::r3a::run_r3a;
use agentcache::harness::report::{CellMeta, RequestRow};
use agentcache::harness::workload::TOT_AGENT;
use agentcache::harness::{
    gen_r3a_workload, gen_tot_workload, run_experiment, ExperimentConfig, RunReport, TotWorkload,
    WorkloadSpec,
};
use agentcache::hash::{derive_seed, RngStream};
use agentcache::kv::profile::{
    collaborative_utilities, combine, contribution_scores, edge_weight, intrinsic_utilities,
    AgentProfile, RawFactors, ReuseEdge, RoundRecord, EPSILON,
};
use agentcache::kv::{AgentId, EvictionEvent, EvictionPolicy, KvConfig};
use agentcache::logits_cache::{generate, GenerateRequest, LogitsCache, ReplayPolicy, StateKey};
use agentcache::model::{LogitsVector, ModelConfig};
use agentcache::sampling::{
    entropy, hotspot_score, max_prob, sample, softmax, truncate, HotspotParams, ProbVector,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const TOT_CONFIG: &str = include_str!("../../../configs/tot.json");
const R3A_CONFIG: &str = include_str!("../../../configs/r3a.json");
const RUNTIME_LIMIT: Duration = Duration::from_secs(120);
const FORMULA_TOL: f64 = 1e-9;
const CHI2_ALPHA: f64 = 0.001;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn tot_config() -> ExperimentConfig {
    ExperimentConfig::from_json(TOT_CONFIG).expect("shipped tot config is valid")
}

fn tot_spec(cfg: &ExperimentConfig) -> TotWorkload {
    match &cfg.workload {
        WorkloadSpec::TotResample(t) => t.clone(),
        other => panic!("tot config has workload {}", other.name()),
    }
}

fn engine_for(model: &ModelConfig, capacity: usize, policy: EvictionPolicy) -> Engine {
    Engine::new(
        model.clone(),
        KvConfig {
            capacity_tokens: capacity,
            policy,
            ..KvConfig::default()
        },
    )
    .expect("engine config is valid")
}

/// Runs the first `n` ToT instances the way the harness does and returns
/// every llm_call in order.
fn tot_calls(
    cfg: &ExperimentConfig,
    spec: &TotWorkload,
    policy: ReplayPolicy,
    temperature: f64,
    n: usize,
) -> Vec<LlmCallRecord> {
    let wf = compile(&spec.workflow()).expect("tot workflow compiles");
    let mut out = Vec::new();
    for inst in gen_tot_workload(spec, n, cfg.seeds[0], cfg.model.vocab_size) {
        let mut engine = engine_for(&cfg.model, cfg.capacity_tokens, EvictionPolicy::Lru);
        let mut cache = LogitsCache::new(cfg.logits_cache_bytes);
        let opts = RunOptions {
            seed: derive_seed(cfg.seeds[0], &[inst.id as u64]),
            policy: Some(policy),
            temperature: Some(temperature),
            hotspot: Some(cfg.hotspot.clone()),
            ..RunOptions::default()
        };
        let run = Runtime::new(&wf, &mut engine, &mut cache, opts)
            .run(TOT_AGENT, inst.prompt)
            .expect("tot instance runs");
        out.extend(run.transcript.calls);
    }
    out
}

fn replay_exactness(cfg: &ExperimentConfig) -> Verdict {
    let spec = tot_spec(cfg);
    let per = tot_call_count(
        spec.branching as u64,
        spec.beam as u64,
        spec.max_depth as u64,
    );
    let n = 100usize.div_ceil(per as usize);
    let mut checked = 0;
    let mut mismatches = 0;
    let mut replayed = 0;
    for t in [0.6, 1.0] {
        let calls = tot_calls(cfg, &spec, ReplayPolicy::StepWise, t, n);
        for c in calls.iter().take(100) {
            let mut engine = engine_for(&cfg.model, cfg.capacity_tokens, EvictionPolicy::Lru);
            let agent = engine.register_agent(&c.agent);
            let mut cache = LogitsCache::new(0);
            let req = GenerateRequest {
                agent,
                prompt: c.prompt.clone(),
                sampling: c.sampling.clone(),
                policy: ReplayPolicy::None,
                hotspot: HotspotParams::default(),
            };
            let fresh = generate(&mut engine, &mut cache, &req, &mut RngStream::new(c.seed))
                .expect("uncached rerun");
            checked += 1;
            replayed += usize::from(c.outcome.replayed_len > 0);
            mismatches += usize::from(fresh.tokens != c.tokens);
        }
    }
    verdict(
        mismatches == 0 && replayed > 0 && checked == 200,
        format!(
            "{checked} requests ({replayed} with replay), {mismatches} mismatches (tolerance 0)"
        ),
    )
}

fn temperature_zero_reuse(cfg: &ExperimentConfig) -> Verdict {
    let spec = tot_spec(cfg);
    let calls = tot_calls(cfg, &spec, ReplayPolicy::StepWise, 0.0, 20);
    let mut seen = BTreeSet::new();
    let mut revisits = 0;
    let mut bad = 0;
    for c in &calls {
        if !seen.insert(StateKey::of(&c.prompt)) {
            revisits += 1;
            if c.outcome.hit_ratio() != 1.0 || c.cost.decode_passes != 0 {
                bad += 1;
            }
        }
    }
    verdict(
        revisits > 0 && bad == 0,
        format!("{revisits} revisits at T=0, {bad} without hit_ratio 1.0 and zero decode passes"),
    )
}

fn cell<'a>(report: &'a RunReport, policy: &str, t: f64) -> &'a CellMeta {
    report
        .cells
        .iter()
        .find(|m| m.policy == policy && m.temperature == t)
        .unwrap_or_else(|| panic!("no cell for {policy} at T={t}"))
}

fn hit_regime(report: &RunReport, elapsed: Duration) -> Verdict {
    let s = report.summary();
    let at = |p: &str| {
        s.cells[cell(report, p, 0.6).cell]
            .mean_hit_ratio
            .unwrap_or(f64::NAN)
    };
    let (step, hot) = (at("step_wise"), at("hotspot"));
    let pass =
        (0.05..=0.15).contains(&step) && (0.20..=0.45).contains(&hot) && elapsed < RUNTIME_LIMIT;
    verdict(
        pass,
        format!(
            "T=0.6 step_wise {step:.4} in [0.05, 0.15], hotspot {hot:.4} in [0.20, 0.45], grid runtime {:.1}s < 120s",
            elapsed.as_secs_f64()
        ),
    )
}

fn pass_speedup(report: &RunReport) -> Verdict {
    let s = report.summary();
    let at = |p: &str| {
        s.cells[cell(report, p, 0.6).cell]
            .mean_speedup
            .unwrap_or(f64::NAN)
    };
    let (none, step, hot) = (at("none"), at("step_wise"), at("hotspot"));
    verdict(
        hot >= 1.3 && step >= 1.05,
        format!("T=0.6 speedup hotspot {hot:.3}x >= 1.3, step_wise {step:.3}x >= 1.05 (baseline {none:.3}x)"),
    )
}

fn overlap_trend(report: &RunReport) -> Verdict {
    let grid = [0.1, 0.4, 0.7, 1.0, 1.3];
    // Every revisit counts here, full hits included.
    let means: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let rows: Vec<&RequestRow> = report
                .cell_requests(cell(report, "step_wise", t).cell)
                .into_iter()
                .filter(|r| r.revisit)
                .collect();
            rows.iter().map(|r| r.replayed_len as f64).sum::<f64>() / rows.len().max(1) as f64
        })
        .collect();
    let rises: Vec<f64> = means
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[1] - w[0]) / w[0].max(f64::MIN_POSITIVE))
        .collect();
    let pass = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.02);
    let shown: Vec<String> = grid
        .iter()
        .zip(&means)
        .map(|(t, m)| format!("{t}:{m:.1}"))
        .collect();
    verdict(
        pass,
        format!(
            "step_wise mean replayed_len [{}], {} rises (allowed: one of <= 2%)",
            shown.join(", "),
            rises.len()
        ),
    )
}

fn scheduler_improvement() -> Verdict {
    let cfg = ExperimentConfig::from_json(R3A_CONFIG).expect("shipped r3a config is valid");
    let started = Instant::now();
    let report = run_experiment(&cfg).expect("r3a experiment runs");
    let elapsed = started.elapsed();
    let s = report.summary();
    let by = |e: &str| {
        s.cells
            .iter()
            .find(|c| c.meta.eviction == e)
            .unwrap_or_else(|| panic!("no {e} cell"))
    };
    let (lru, aa) = (by("lru"), by("agent_aware"));
    let miss = |c: &agentcache::harness::CellSummary| 1.0 - c.hotspot_hit_rate.unwrap_or(f64::NAN);
    let miss_red = 1.0 - miss(aa) / miss(lru);
    let ev = |c: &agentcache::harness::CellSummary| c.evicted_tokens.unwrap_or(0) as f64;
    let ev_red = 1.0 - ev(aa) / ev(lru);
    verdict(
        miss_red >= 0.20 && ev_red >= 0.10 && elapsed < RUNTIME_LIMIT,
        format!(
            "capacity {}: hotspot miss {:.4} -> {:.4} ({:.1}% >= 20%), evicted {} -> {} ({:.1}% >= 10%), runtime {:.1}s",
            cfg.capacity_tokens,
            miss(lru),
            miss(aa),
            100.0 * miss_red,
            ev(lru),
            ev(aa),
            100.0 * ev_red,
            elapsed.as_secs_f64()
        ),
    )
}

fn eviction_trace(policy: EvictionPolicy, score: Option<f64>) -> Vec<EvictionEvent> {
    let cfg = ExperimentConfig::from_json(R3A_CONFIG).expect("shipped r3a config is valid");
    let WorkloadSpec::R3aWorkflow(spec) = &cfg.workload else {
        panic!("r3a config has another workload");
    };
    let script = gen_r3a_workload(&spec.shape, spec.rounds, cfg.seeds[0], cfg.model.vocab_size);
    let mut engine = engine_for(&cfg.model, cfg.capacity_tokens, policy);
    engine.kv_mut().record_evictions();
    engine.kv_mut().set_score_override(score);
    run_r3a(
        &script,
        &mut engine,
        cfg.temperatures[0],
        cfg.seeds[0],
        &spec.hotspot_agents,
    )
    .expect("golden trace runs");
    engine.kv().eviction_log().to_vec()
}

fn lru_equivalence() -> Verdict {
    let lru = eviction_trace(EvictionPolicy::Lru, None);
    let forced = eviction_trace(EvictionPolicy::AgentAware, Some(0.5));
    let unforced = eviction_trace(EvictionPolicy::AgentAware, None);
    verdict(
        !lru.is_empty() && lru == forced && unforced != lru,
        format!(
            "{} LRU events, equal-score agent-aware identical: {}, scored agent-aware differs: {}",
            lru.len(),
            lru == forced,
            unforced != lru
        ),
    )
}

// Oracles below are written out longhand, independently of the library.

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= FORMULA_TOL
}

fn prob(v: &[f64]) -> ProbVector {
    ProbVector(v.to_vec())
}

/// Twenty distributions: uniforms, two-point, and literal vectors.
fn distributions() -> Vec<(Vec<f64>, f64, f64)> {
    let ln2 = std::f64::consts::LN_2;
    let mut cases: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    for n in 1..=8usize {
        cases.push((vec![1.0 / n as f64; n], (n as f64).ln(), 1.0 / n as f64));
    }
    for p in [0.5f64, 0.9, 0.99, 0.3, 0.75, 0.6] {
        let q = 1.0 - p;
        let h = -(p * p.ln() + q * q.ln());
        cases.push((vec![p, q], h, p.max(q)));
    }
    cases.push((vec![0.5, 0.25, 0.25], 1.5 * ln2, 0.5));
    cases.push((vec![0.5, 0.25, 0.125, 0.125], 1.75 * ln2, 0.5));
    cases.push((vec![1.0, 0.0, 0.0], 0.0, 1.0));
    cases.push((vec![0.0, 0.5, 0.0, 0.5], ln2, 0.5));
    cases.push((
        vec![0.125; 8].into_iter().chain([0.0; 8]).collect(),
        3.0 * ln2,
        0.125,
    ));
    cases.push((vec![0.4, 0.3, 0.2, 0.1], 1.279_854_225_833_667_4, 0.4));
    cases
}

fn factor_cases() -> Vec<Vec<RawFactors>> {
    let f = |a: f64, w: f64, e: f64, q: f64| RawFactors {
        activity: a,
        workload: w,
        efficiency: e,
        concurrency: q,
    };
    let mut cases = vec![
        vec![f(1.0, 10.0, 0.5, 1.0), f(2.0, 20.0, 0.25, 1.0)],
        vec![
            f(3.0, 300.0, 0.9, 1.0),
            f(1.0, 100.0, 0.1, 1.0),
            f(2.0, 200.0, 0.5, 1.0),
        ],
        vec![f(5.0, 50.0, 0.0, 2.0), f(5.0, 50.0, 0.0, 2.0)],
        vec![f(0.0, 0.0, 0.0, 0.0), f(4.0, 1000.0, 1.0, 3.0)],
        vec![f(1.0, 1.0, 1.0, 1.0)],
    ];
    for k in 0..15u64 {
        let mut rng = RngStream::new(derive_seed(0xFAC7, &[k]));
        let n = 2 + (rng.next_u64() % 4) as usize;
        cases.push(
            (0..n)
                .map(|_| {
                    f(
                        (rng.next_u64() % 20) as f64,
                        (rng.next_u64() % 5000) as f64,
                        rng.next_f64(),
                        1.0 + rng.next_f64() * 3.0,
                    )
                })
                .collect(),
        );
    }
    cases
}

fn oracle_scale(xs: &[f64], floor: f64) -> Vec<f64> {
    let mut lo = xs[0];
    let mut hi = xs[0];
    for &x in xs {
        if x < lo {
            lo = x;
        }
        if x > hi {
            hi = x;
        }
    }
    xs.iter()
        .map(|&x| {
            if hi == lo {
                1.0
            } else {
                floor + (1.0 - floor) * ((x - lo) / (hi - lo))
            }
        })
        .collect()
}

fn oracle_intrinsic(fs: &[RawFactors]) -> Vec<f64> {
    let cols = [
        oracle_scale(&fs.iter().map(|f| f.activity).collect::<Vec<_>>(), EPSILON),
        oracle_scale(&fs.iter().map(|f| f.workload).collect::<Vec<_>>(), EPSILON),
        oracle_scale(
            &fs.iter().map(|f| f.efficiency).collect::<Vec<_>>(),
            EPSILON,
        ),
        oracle_scale(
            &fs.iter().map(|f| f.concurrency).collect::<Vec<_>>(),
            EPSILON,
        ),
    ];
    let prods: Vec<f64> = (0..fs.len())
        .map(|i| cols[0][i] * cols[1][i] * cols[2][i] * cols[3][i])
        .collect();
    oracle_scale(&prods, 0.0)
}

fn edge(p: u32, c: u32, shared: u64, events: u64) -> ReuseEdge {
    ReuseEdge {
        provider: AgentId(p),
        consumer: AgentId(c),
        shared_tokens: shared,
        events,
    }
}

fn edge_cases() -> Vec<(usize, Vec<ReuseEdge>)> {
    let mut cases = vec![
        (2, vec![edge(0, 1, 100, 3)]),
        (3, vec![edge(0, 1, 100, 3), edge(1, 2, 400, 1)]),
        (3, vec![edge(0, 0, 900, 9), edge(1, 2, 16, 2)]),
        (2, vec![]),
        (
            4,
            vec![edge(0, 1, 64, 7), edge(1, 0, 64, 7), edge(2, 3, 1, 1)],
        ),
    ];
    for k in 0..15u64 {
        let mut rng = RngStream::new(derive_seed(0xED6E, &[k]));
        let n = 2 + (rng.next_u64() % 4) as usize;
        let m = (rng.next_u64() % 8) as usize;
        let edges = (0..m)
            .map(|_| {
                edge(
                    (rng.next_u64() % n as u64) as u32,
                    (rng.next_u64() % n as u64) as u32,
                    rng.next_u64() % 3000,
                    1 + rng.next_u64() % 12,
                )
            })
            .collect();
        cases.push((n, edges));
    }
    cases
}

fn oracle_edge_weight(e: &ReuseEdge) -> f64 {
    (e.shared_tokens as f64).powf(0.5) * (1.0 + e.events as f64).ln()
}

fn oracle_collaborative(n: usize, edges: &[ReuseEdge]) -> Vec<f64> {
    let mut raw = vec![0.0; n];
    for e in edges {
        if e.provider == e.consumer {
            continue;
        }
        let w = oracle_edge_weight(e);
        raw[e.provider.0 as usize] += w;
        raw[e.consumer.0 as usize] += w;
    }
    oracle_scale(&raw, 0.0)
}

fn formula_suites() -> Verdict {
    let mut failures: Vec<String> = Vec::new();
    let mut counts = [0usize; 7];
    let dists = distributions();
    for (i, (p, h, m)) in dists.iter().enumerate() {
        counts[0] += 1;
        if !close(entropy(&prob(p)), *h) {
            failures.push(format!("entropy case {i}"));
        }
        counts[1] += 1;
        if !close(max_prob(&prob(p)), *m) {
            failures.push(format!("max_prob case {i}"));
        }
    }
    for (i, (p, h, m)) in dists.iter().enumerate() {
        let lambda = [0.0, 0.01, 0.0005, 0.5][i % 4];
        let t = [0usize, 1, 7, 42, 499][i % 5];
        let params = HotspotParams {
            lambda,
            ..HotspotParams::default()
        };
        counts[2] += 1;
        let want = h * (1.0 - m) / (1.0 + lambda * t as f64);
        if !close(hotspot_score(&prob(p), t, &params), want) {
            failures.push(format!("hotspot_score case {i}"));
        }
    }
    let edges = edge_cases();
    for (i, (n, es)) in edges.iter().enumerate() {
        for e in es {
            counts[3] += 1;
            if !close(edge_weight(e), oracle_edge_weight(e)) {
                failures.push(format!("edge_weight case {i}"));
            }
        }
        counts[4] += 1;
        let ids: Vec<AgentId> = (0..*n as u32).map(AgentId).collect();
        let got = collaborative_utilities(&ids, es);
        let want = oracle_collaborative(*n, es);
        if got.len() != want.len() || got.iter().zip(&want).any(|(a, b)| !close(*a, *b)) {
            failures.push(format!("collaborative case {i}"));
        }
    }
    // Literal weights: sqrt(100) ln 4 and sqrt(400) ln 2.
    if !close(edge_weight(&edge(0, 1, 100, 3)), 10.0 * 4f64.ln())
        || !close(edge_weight(&edge(0, 1, 400, 1)), 20.0 * 2f64.ln())
    {
        failures.push("edge_weight literals".into());
    }
    for (i, fs) in factor_cases().iter().enumerate() {
        counts[5] += 1;
        let got = intrinsic_utilities(fs);
        let want = oracle_intrinsic(fs);
        if got.iter().zip(&want).any(|(a, b)| !close(*a, *b)) {
            failures.push(format!("intrinsic case {i}"));
        }
    }
    // Two agents, one dominating every factor: utilities are exactly 1 and 0.
    let two = intrinsic_utilities(&[
        RawFactors {
            activity: 4.0,
            workload: 400.0,
            efficiency: 0.8,
            concurrency: 2.0,
        },
        RawFactors {
            activity: 1.0,
            workload: 100.0,
            efficiency: 0.2,
            concurrency: 1.0,
        },
    ]);
    if !close(two[0], 1.0) || !close(two[1], 0.0) {
        failures.push("intrinsic literal".into());
    }
    for k in 0..20u64 {
        let mut rng = RngStream::new(derive_seed(0x5C0E, &[k]));
        let (u, c) = (rng.next_f64(), rng.next_f64());
        let alpha = [0.4, 0.0, 1.0, 0.25, 0.9][k as usize % 5];
        counts[6] += 1;
        let s = combine(AgentId(0), u, c, alpha);
        if !close(s.score, alpha * u + (1.0 - alpha) * c) {
            failures.push(format!("score case {k}"));
        }
    }
    // End to end through profiles: Score = 0.4 U + 0.6 C from independent oracles.
    let mut profiles = Vec::new();
    for a in 0..3u32 {
        let mut p = AgentProfile::new(AgentId(a), 5);
        p.push(RoundRecord {
            invocations: 1 + a as u64,
            input_tokens: 100 * (a as u64 + 1),
            output_tokens: 10,
            cached_prefix_tokens: 30 * a as u64,
            concurrency_sum: 1,
            concurrency_samples: 1,
            peak_concurrency: 1,
        });
        profiles.push(p);
    }
    let es = vec![edge(0, 1, 100, 3), edge(2, 1, 25, 1)];
    let refs: Vec<&AgentProfile> = profiles.iter().collect();
    let scores = contribution_scores(&refs, &es, 0.4);
    let u = oracle_intrinsic(&profiles.iter().map(|p| p.raw_factors()).collect::<Vec<_>>());
    let c = oracle_collaborative(3, &es);
    for (i, s) in scores.iter().enumerate() {
        counts[6] += 1;
        if !close(s.score, 0.4 * u[i] + 0.6 * c[i]) {
            failures.push(format!("contribution score agent {i}"));
        }
    }
    let min = *counts.iter().min().expect("seven suites");
    verdict(
        failures.is_empty() && min >= 20,
        format!(
            "cases entropy {} max_prob {} hotspot {} edge {} collaborative {} intrinsic {} score {} at 1e-9, failures: {}",
            counts[0],
            counts[1],
            counts[2],
            counts[3],
            counts[4],
            counts[5],
            counts[6],
            if failures.is_empty() { "none".into() } else { failures.join(", ") }
        ),
    )
}

fn sampler_statistics() -> Verdict {
    const DRAWS: usize = 100_000;
    let mut worst_p = 1.0f64;
    let mut fewest_bins = usize::MAX;
    let mut total_dof = 0;
    let mut leaked = 0;
    let mut details = Vec::new();
    for k in 0..10u64 {
        let mut rng = RngStream::new(derive_seed(0xC412, &[k]));
        let vocab = 8 + (rng.next_u64() % 57) as usize;
        let z = LogitsVector(
            (0..vocab)
                .map(|_| (rng.next_f64() * 6.0 - 3.0) as f32)
                .collect(),
        );
        let temperature = 0.8 + rng.next_f64() * 1.2;
        let top_k = if k % 2 == 0 {
            Some(4 + (rng.next_u64() as usize % vocab))
        } else {
            None
        };
        let top_p = [1.0, 0.9, 0.8, 0.95, 0.85][k as usize % 5];
        let p = truncate(&softmax(&z, temperature), top_k, top_p);
        let mut counts = vec![0u64; vocab];
        let mut draws = RngStream::new(derive_seed(0xC413, &[k]));
        for _ in 0..DRAWS {
            counts[sample(&p, &mut draws).expect("positive mass") as usize] += 1;
        }
        leaked +=
            p.0.iter()
                .zip(&counts)
                .filter(|(q, c)| **q == 0.0 && **c > 0)
                .count();
        // Pool bins expected below 5 draws so the statistic stays chi-square.
        let mut bins: Vec<(f64, f64)> = Vec::new();
        let mut pool = (0.0, 0.0);
        for (q, c) in p.0.iter().zip(&counts) {
            if *q <= 0.0 {
                continue;
            }
            let e = q * DRAWS as f64;
            if e < 5.0 {
                pool.0 += e;
                pool.1 += *c as f64;
            } else {
                bins.push((e, *c as f64));
            }
        }
        if pool.0 > 0.0 {
            bins.push(pool);
        }
        let stat: f64 = bins.iter().map(|(e, o)| (o - e).powi(2) / e).sum();
        let pvalue = if bins.len() < 2 {
            1.0
        } else {
            let chi = ChiSquared::new((bins.len() - 1) as f64).expect("positive dof");
            1.0 - chi.cdf(stat)
        };
        worst_p = worst_p.min(pvalue);
        fewest_bins = fewest_bins.min(bins.len());
        total_dof += bins.len().saturating_sub(1);
        details.push(format!("{}", bins.len()));
    }
    verdict(
        // Every test needs one degree of freedom; together they need many.
        worst_p >= CHI2_ALPHA && leaked == 0 && fewest_bins >= 2 && total_dof >= 50,
        format!(
            "10 distributions x {DRAWS} draws, bins [{}] ({total_dof} dof), min p-value {worst_p:.4} >= {CHI2_ALPHA}, draws outside support {leaked}",
            details.join(" ")
        ),
    )
}

fn oracle_tot_calls(b: u64, beam: u64, depth: u64) -> u64 {
    // Expand every kept node; keep the best `beam` of the children.
    fn go(frontier: u64, b: u64, beam: u64, left: u64) -> u64 {
        if left == 0 {
            return 0;
        }
        let children: u64 = (0..frontier).map(|_| b).sum();
        children + go(children.min(beam), b, beam, left - 1)
    }
    go(1, b, beam, depth)
}

fn tot_accounting(cfg: &ExperimentConfig) -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for (b, beam, depth) in [(2u32, 2usize, 2usize), (3, 2, 3), (1, 1, 4)] {
        let spec = TotWorkload {
            branching: b,
            beam,
            max_depth: depth,
            max_tokens: 24,
            ..tot_spec(cfg)
        };
        let calls = tot_calls(cfg, &spec, ReplayPolicy::StepWise, 0.7, 1).len() as u64;
        let closed = tot_call_count(b as u64, beam as u64, depth as u64);
        let enumerated = oracle_tot_calls(b as u64, beam as u64, depth as u64);
        pass &= calls == closed && closed == enumerated;
        lines.push(format!(
            "({b},{beam},{depth}): {calls} calls, closed form {closed}"
        ));
    }
    verdict(pass, lines.join("; "))
}

fn main() {
    let cfg = tot_config();
    let started = Instant::now();
    let tot_report = run_experiment(&cfg).expect("tot experiment runs");
    let tot_elapsed = started.elapsed();
    assert!(
        tot_report.errors.is_empty(),
        "tot cells failed: {:?}",
        tot_report.errors
    );

    let criteria: Vec<(&str, Verdict)> = vec![
        ("replay exactness", replay_exactness(&cfg)),
        ("temperature-0 full reuse", temperature_zero_reuse(&cfg)),
        ("hit-ratio regime", hit_regime(&tot_report, tot_elapsed)),
        ("pass-count speedup", pass_speedup(&tot_report)),
        ("overlap trend", overlap_trend(&tot_report)),
        ("scheduler improvement", scheduler_improvement()),
        ("lru equivalence", lru_equivalence()),
        ("formula unit suites", formula_suites()),
        ("sampler statistics", sampler_statistics()),
        ("tot accounting", tot_accounting(&cfg)),
    ];
    let mut failed = 0;
    for (name, v) in &criteria {
        println!(
            "{} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
