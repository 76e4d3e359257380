use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::thread;

use agentcache::engine::Engine;
use agentcache::flow::{compile, RunOptions, Runtime, WorkflowDoc};
use agentcache::harness::workload::TOT_AGENT;
use agentcache::harness::{gen_tot_workload, run_experiment, ExperimentConfig, WorkloadSpec};
use agentcache::hash::derive_seed;
use agentcache::kv::{EvictionPolicy, KvConfig};
use agentcache::logits_cache::{LogitsCache, ReplayPolicy};
use agentcache::protocol::{Request, Session, SessionConfig};
use agentcache::sampling::{HotspotParams, SamplingConfig};
use agentcache::server;
use proptest::prelude::*;
use serde_json::{json, Value};

fn session() -> Session {
    Session::new(&SessionConfig::default()).unwrap()
}

fn call(s: &mut Session, req: Value) -> Value {
    serde_json::from_str(&s.handle_line(&req.to_string())).unwrap()
}

fn generate(agent: &str, prompt: &[u32], seed: u64, id: u64) -> Value {
    json!({
        "op": "generate",
        "request_id": id,
        "agent_id": agent,
        "prompt_tokens": prompt,
        "sampling": {"temperature": 0.8, "max_tokens": 12, "seed": seed},
    })
}

#[test]
fn unknown_agent_is_an_error_and_the_session_survives() {
    let mut s = session();
    let r = call(&mut s, generate("ghost", &[1, 2], 0, 7));
    assert_eq!(r["ok"], json!(false));
    assert_eq!(r["request_id"], json!(7));
    assert_eq!(r["error"]["kind"], json!("unknown_agent"));
    assert!(r["error"]["message"].as_str().unwrap().contains("ghost"));
    assert_eq!(
        call(&mut s, json!({"op": "register_agent", "agent_id": "ghost"}))["ok"],
        json!(true)
    );
    assert_eq!(
        call(&mut s, generate("ghost", &[1, 2], 0, 8))["ok"],
        json!(true)
    );
}

#[test]
fn malformed_lines_get_invalid_input() {
    let mut s = session();
    for line in [
        "",
        "{",
        "[1,2]",
        r#"{"op":"teleport","request_id":3}"#,
        r#"{"op":"generate"}"#,
    ] {
        let r: Value = serde_json::from_str(&s.handle_line(line)).unwrap();
        assert_eq!(r["ok"], json!(false), "{line}");
        assert_eq!(r["error"]["kind"], json!("invalid_input"), "{line}");
    }
    let r: Value =
        serde_json::from_str(&s.handle_line(r#"{"op":"teleport","request_id":3}"#)).unwrap();
    assert_eq!(r["request_id"], json!(3));
}

#[test]
fn run_workflow_requires_a_definition() {
    let r = call(
        &mut session(),
        json!({"op": "run_workflow", "root_agent": "solver"}),
    );
    assert_eq!(r["error"]["kind"], json!("invalid_input"));
}

#[test]
fn bad_workflow_documents_are_compile_errors() {
    let doc = json!({"schema_version": 1, "agents": [{
        "name": "a", "initial": "s0",
        "states": [{"name": "s0", "action": "llm_call", "next": "nowhere"}]}]});
    let r = call(
        &mut session(),
        json!({"op": "define_workflow", "workflow": doc}),
    );
    assert_eq!(r["ok"], json!(false));
    assert_eq!(r["error"]["kind"], json!("compile"));
}

#[test]
fn shipped_workflow_defines() {
    let doc: Value =
        serde_json::from_str(include_str!("../../../configs/workflows/bug_repair.json")).unwrap();
    let r = call(
        &mut session(),
        json!({"op": "define_workflow", "request_id": 1, "workflow": doc}),
    );
    assert_eq!(r["ok"], json!(true), "{r}");
    assert_eq!(r["agents"].as_array().unwrap().len(), 2);
}

#[test]
fn sessions_are_deterministic() {
    let script: Vec<String> = vec![
        json!({"op": "register_agent", "agent_id": "a"}),
        generate("a", &[5, 6, 7], 3, 1),
        generate("a", &[5, 6, 7], 3, 2),
        generate("a", &[5, 6, 7, 8], 4, 3),
        json!({"op": "metrics", "request_id": 4}),
    ]
    .into_iter()
    .map(|v| v.to_string())
    .collect();
    let run = || {
        let mut s = session();
        script.iter().map(|l| s.handle_line(l)).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    // The repeat is a full logits-cache hit with identical tokens.
    let first: Value = serde_json::from_str(&a[1]).unwrap();
    let again: Value = serde_json::from_str(&a[2]).unwrap();
    assert_eq!(first["tokens"], again["tokens"]);
    assert_eq!(again["hit_ratio"], json!(1.0));
    assert_eq!(again["forward_passes"], json!(0));
}

fn tot_fixture() -> (
    ExperimentConfig,
    WorkflowDoc,
    Vec<u32>,
    RunOptions,
    SessionConfig,
) {
    let mut cfg = ExperimentConfig::from_json(include_str!("../../../configs/tot.json")).unwrap();
    let WorkloadSpec::TotResample(spec) = &mut cfg.workload else {
        panic!("tot config");
    };
    spec.instances = 1;
    spec.max_tokens = 120;
    let spec = spec.clone();
    cfg.temperatures = vec![0.6];
    cfg.policies = vec![ReplayPolicy::Hotspot];
    let prompt = gen_tot_workload(&spec, 1, cfg.seeds[0], cfg.model.vocab_size)
        .remove(0)
        .prompt;
    let opts = RunOptions {
        seed: derive_seed(cfg.seeds[0], &[0]),
        policy: Some(ReplayPolicy::Hotspot),
        temperature: Some(0.6),
        hotspot: Some(cfg.hotspot.clone()),
        ..RunOptions::default()
    };
    let session = SessionConfig {
        model: cfg.model.clone(),
        kv: KvConfig {
            capacity_tokens: cfg.capacity_tokens,
            policy: EvictionPolicy::Lru,
            ..KvConfig::default()
        },
        logits_cache_bytes: cfg.logits_cache_bytes,
    };
    (cfg, spec.workflow(), prompt, opts, session)
}

#[test]
fn metrics_match_the_harness_summary() {
    let (cfg, doc, prompt, opts, scfg) = tot_fixture();
    let mut s = Session::new(&scfg).unwrap();
    assert_eq!(
        call(&mut s, json!({"op": "define_workflow", "workflow": doc}))["ok"],
        json!(true)
    );
    let r = call(
        &mut s,
        json!({
            "op": "run_workflow", "root_agent": TOT_AGENT, "input_tokens": prompt, "options": opts,
        }),
    );
    assert_eq!(r["ok"], json!(true), "{r}");
    let m = call(&mut s, json!({"op": "metrics", "request_id": 2}));
    let served = &m["summary"];
    let report = run_experiment(&cfg).unwrap();
    let want = serde_json::to_value(&report.summary().cells[0]).unwrap();
    assert!(want["measured"].as_u64().unwrap() > 0);
    for key in [
        "requests",
        "filtered_full_hits",
        "measured",
        "mean_hit_ratio",
        "mean_replayed_len",
        "mean_speedup",
        "p50_speedup",
        "mean_tokens_per_pass",
        "forward_passes",
        "baseline_passes",
    ] {
        assert_eq!(served[key], want[key], "{key}");
    }
}

#[test]
fn served_transcript_matches_native_run() {
    let (_, doc, prompt, opts, scfg) = tot_fixture();
    let mut s = Session::new(&scfg).unwrap();
    call(&mut s, json!({"op": "define_workflow", "workflow": doc}));
    let served = call(
        &mut s,
        json!({
            "op": "run_workflow", "root_agent": TOT_AGENT, "input_tokens": prompt, "options": opts,
        }),
    );
    let wf = compile(&doc).unwrap();
    let mut engine = Engine::new(scfg.model.clone(), scfg.kv.clone()).unwrap();
    let mut cache = LogitsCache::new(scfg.logits_cache_bytes);
    let native = Runtime::new(&wf, &mut engine, &mut cache, opts)
        .run(TOT_AGENT, prompt)
        .unwrap();
    assert_eq!(served["output"], json!(native.output));
    let calls = served["calls"].as_array().unwrap();
    assert_eq!(calls.len(), native.transcript.calls.len());
    for (a, b) in calls.iter().zip(&native.transcript.calls) {
        assert_eq!(a["tokens"], json!(b.tokens));
        assert_eq!(a["prompt_tokens"], json!(b.prompt));
        assert_eq!(a["state"], json!(b.state));
    }
}

#[test]
fn tcp_connections_get_independent_sessions() {
    let listener = server::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || server::serve_tcp(&SessionConfig::default(), listener));
    let talk = |lines: &[Value]| -> Vec<Value> {
        let mut stream = TcpStream::connect(addr).unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        lines
            .iter()
            .map(|l| {
                writeln!(stream, "{l}").unwrap();
                let mut resp = String::new();
                reader.read_line(&mut resp).unwrap();
                serde_json::from_str(&resp).unwrap()
            })
            .collect()
    };
    let first = talk(&[
        json!({"op": "register_agent", "agent_id": "a"}),
        generate("a", &[1, 2, 3], 1, 1),
    ]);
    assert_eq!(first[1]["ok"], json!(true));
    // A new connection has never seen agent "a".
    let second = talk(&[generate("a", &[1, 2, 3], 1, 2)]);
    assert_eq!(second[0]["error"]["kind"], json!("unknown_agent"));
}

#[test]
fn stdio_transport_answers_every_nonblank_line() {
    let input = format!(
        "{}\n\n{}\nnot json\n",
        json!({"op": "register_agent", "agent_id": "a", "request_id": 1}),
        json!({"op": "metrics", "request_id": 2})
    );
    let mut out = Vec::new();
    server::serve_lines(&SessionConfig::default(), input.as_bytes(), &mut out).unwrap();
    let lines: Vec<Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["request_id"], json!(1));
    assert_eq!(lines[1]["op"], json!("metrics"));
    assert_eq!(lines[2]["ok"], json!(false));
}

fn request() -> impl Strategy<Value = Request> {
    let id = prop::option::of(any::<u64>());
    let name = "[a-z][a-z0-9_]{0,8}";
    let policy = prop_oneof![
        Just(ReplayPolicy::None),
        Just(ReplayPolicy::StepWise),
        Just(ReplayPolicy::Hotspot)
    ];
    prop_oneof![
        (id.clone(), name).prop_map(|(request_id, agent_id)| Request::RegisterAgent {
            request_id,
            agent_id
        }),
        (
            id.clone(),
            name,
            prop::collection::vec(0u32..256, 0..16),
            0.0f64..2.0,
            1usize..64,
            any::<u64>(),
            policy,
            0.0f64..1.0
        )
            .prop_map(
                |(
                    request_id,
                    agent_id,
                    prompt_tokens,
                    temperature,
                    max_tokens,
                    seed,
                    replay_policy,
                    threshold,
                )| {
                    Request::Generate {
                        request_id,
                        agent_id,
                        prompt_tokens,
                        sampling: SamplingConfig {
                            temperature,
                            max_tokens,
                            seed,
                            ..SamplingConfig::default()
                        },
                        replay_policy,
                        hotspot: HotspotParams {
                            threshold,
                            ..HotspotParams::default()
                        },
                    }
                }
            ),
        (
            id.clone(),
            name,
            prop::collection::vec(0u32..256, 0..8),
            any::<u64>()
        )
            .prop_map(|(request_id, root_agent, input_tokens, seed)| {
                Request::RunWorkflow {
                    request_id,
                    root_agent,
                    input_tokens,
                    options: RunOptions {
                        seed,
                        ..RunOptions::default()
                    },
                }
            }),
        id.prop_map(|request_id| Request::Metrics { request_id }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn requests_round_trip_through_json(req in request()) {
        let line = serde_json::to_string(&req).unwrap();
        prop_assert!(!line.contains('\n'));
        let back: Request = serde_json::from_str(&line).unwrap();
        prop_assert_eq!(back, req);
    }

    #[test]
    fn every_line_gets_one_wellformed_response(lines in prop::collection::vec(
        prop_oneof![
            "\\PC{0,40}".prop_map(|s| s),
            request().prop_map(|r| serde_json::to_string(&r).unwrap()),
        ],
        1..12,
    )) {
        let mut s = session();
        s.handle_line(&json!({"op": "register_agent", "agent_id": "a"}).to_string());
        for line in &lines {
            let resp = s.handle_line(line);
            prop_assert!(!resp.contains('\n'));
            let v: Value = serde_json::from_str(&resp).unwrap();
            prop_assert!(v["ok"].is_boolean());
            if v["ok"] == json!(false) {
                prop_assert!(v["error"]["kind"].is_string());
            }
        }
    }
}
