mod common;

use std::time::Duration;

use common::stub::{Stub, StubConfig};
use contamscope::backend::{
    ApiStyle, BackendConfig, BackendErrorKind, Client, Degraded, NO_LOGPROBS,
};
use contamscope::trace::{ItemRecord, Label};
use contamscope::{Error, Execution};

fn item(i: usize) -> ItemRecord {
    ItemRecord {
        item_id: format!("q{i:03}"),
        prompt: format!("Question {i}: what is it?"),
        reference_answer: "alpha beta gamma".into(),
        label: if i.is_multiple_of(2) {
            Label::Contaminated
        } else {
            Label::Clean
        },
        domain_tag: None,
    }
}

fn config(stub: &Stub) -> BackendConfig {
    let mut cfg = BackendConfig::new(stub.url.clone());
    cfg.model_name = "stub-model".into();
    cfg.num_samples = 4;
    cfg.max_tokens = 16;
    cfg.seed_base = Some(7 << 20);
    cfg.backoff_base = Duration::from_millis(1);
    cfg.api_key = Some("test-key".into());
    cfg
}

#[test]
fn completion_requests_are_well_formed() {
    let stub = Stub::start(StubConfig::default());
    let client = Client::connect(config(&stub)).unwrap();
    let outcome = client.collect_trace(&item(1)).unwrap();
    let trace = &outcome.trace;
    assert_eq!(trace.samples.len(), 4);
    assert!(trace.greedy.is_some());
    assert_eq!(
        outcome.degraded_fields.len(),
        0,
        "{:?}",
        outcome.degraded_fields
    );
    assert_eq!(trace.reference_scored.as_ref().unwrap().len(), 3);
    let reference: String = trace
        .reference_scored
        .as_ref()
        .unwrap()
        .iter()
        .map(|t| t.token_text.as_str())
        .collect();
    assert_eq!(reference, " alpha beta gamma");

    let reqs = stub.requests();
    // 4 samples + greedy + echo + one embeddings call
    assert_eq!(reqs.len(), 7);
    assert_eq!(outcome.request_count, 7);
    assert_eq!(client.total_requests(), 7);
    for r in &reqs {
        assert_eq!(r.method, "POST");
        assert_eq!(r.authorization.as_deref(), Some("Bearer test-key"));
        assert!(r
            .content_type
            .as_deref()
            .unwrap_or("")
            .starts_with("application/json"));
        assert_eq!(r.body["model"], "stub-model");
    }
    let samples: Vec<_> = reqs
        .iter()
        .filter(|r| {
            r.path == "/v1/completions"
                && r.body.get("echo").is_none()
                && r.body["temperature"] != 0.0
        })
        .collect();
    assert_eq!(samples.len(), 4);
    let mut seeds: Vec<u64> = samples
        .iter()
        .map(|r| r.body["seed"].as_u64().unwrap())
        .collect();
    seeds.sort();
    assert_eq!(seeds, (0..4).map(|i| (7 << 20) + i).collect::<Vec<_>>());
    for r in &samples {
        assert_eq!(r.body["prompt"], "Question 1: what is it?");
        assert_eq!(r.body["temperature"], 0.8);
        assert_eq!(r.body["max_tokens"], 16);
        assert_eq!(r.body["n"], 1);
        assert_eq!(r.body["logprobs"], 5);
    }
    let echo = reqs.iter().find(|r| r.body.get("echo").is_some()).unwrap();
    assert_eq!(
        echo.body["prompt"],
        "Question 1: what is it? alpha beta gamma"
    );
    assert_eq!(echo.body["max_tokens"], 1);
    let greedy = reqs
        .iter()
        .find(|r| r.body.get("echo").is_none() && r.body["temperature"] == 0.0)
        .unwrap();
    assert!(greedy.body.get("seed").is_none());
    let emb = reqs.iter().find(|r| r.path == "/v1/embeddings").unwrap();
    let input = emb.body["input"].as_array().unwrap();
    assert_eq!(input.len(), 2);
    assert_eq!(input[1], "alpha beta gamma");
    assert_eq!(input[0], trace.greedy.as_ref().unwrap().text.as_str());
}

#[test]
fn tokens_carry_position_stats_and_reproduce_text() {
    let stub = Stub::start(StubConfig::default());
    let client = Client::connect(config(&stub)).unwrap();
    let trace = client.collect_trace(&item(2)).unwrap().trace;
    for s in &trace.samples {
        let joined: String = s.tokens.iter().map(|t| t.token_text.as_str()).collect();
        assert_eq!(joined, s.text);
        assert!(s
            .tokens
            .iter()
            .all(|t| t.pos_mu.is_some() && t.pos_sigma.is_some()));
        assert!(s
            .tokens
            .iter()
            .all(|t| t.logprob <= -1.2 && t.logprob >= -4.0));
    }
    // identical requests give identical samples
    let again = client.collect_trace(&item(2)).unwrap().trace;
    assert_eq!(trace, again);
}

#[test]
fn concurrency_bound_is_honored() {
    let stub = Stub::start(StubConfig {
        delay: Duration::from_millis(15),
        ..Default::default()
    });
    let mut cfg = config(&stub);
    cfg.max_concurrent_requests = 3;
    cfg.num_samples = 6;
    let client = Client::connect(cfg).unwrap();
    let items: Vec<_> = (0..6).map(item).collect();
    let report = client.collect_all(&items, Execution::Parallel).unwrap();
    assert_eq!(report.outcomes.len(), 6);
    assert!(stub.max_in_flight() <= 3, "{}", stub.max_in_flight());
    assert_eq!(stub.max_in_flight(), 3, "pool never filled");
    assert_eq!(report.request_count() as usize, stub.request_count());
}

#[test]
fn rate_limits_are_retried() {
    let stub = Stub::start(StubConfig {
        rate_limited: 3,
        ..Default::default()
    });
    let mut cfg = config(&stub);
    cfg.max_concurrent_requests = 1;
    let client = Client::connect(cfg).unwrap();
    let outcome = client.collect_trace(&item(3)).unwrap();
    assert_eq!(stub.rate_limited(), 3);
    assert_eq!(outcome.request_count, 7 + 3);
    assert_eq!(outcome.trace.samples.len(), 4);
}

#[test]
fn exhausted_retries_fail_the_item() {
    let stub = Stub::start(StubConfig {
        rate_limited: 1000,
        ..Default::default()
    });
    let mut cfg = config(&stub);
    cfg.retry_limit = 2;
    cfg.max_concurrent_requests = 1;
    let client = Client::connect(cfg).unwrap();
    let err = client.collect_trace(&item(4)).unwrap_err();
    assert!(err.to_string().contains("429"), "{err}");
}

#[test]
fn missing_logprobs_is_a_hard_error() {
    let stub = Stub::start(StubConfig {
        logprobs: false,
        ..Default::default()
    });
    let client = Client::connect(config(&stub)).unwrap();
    let items: Vec<_> = (0..5).map(item).collect();
    match client.collect_all(&items, Execution::Parallel) {
        Err(Error::Backend(e)) => {
            assert_eq!(e.kind, BackendErrorKind::Capability);
            assert!(e.to_string().contains(NO_LOGPROBS));
            assert_eq!(Error::Backend(e).exit_code(), 2);
        }
        other => panic!("expected capability error, got {other:?}"),
    }
    // the run stops early rather than hammering every item
    assert!(stub.request_count() < 5 * 7);
}

#[test]
fn missing_endpoints_degrade() {
    let stub = Stub::start(StubConfig {
        embeddings: false,
        echo: false,
        ..Default::default()
    });
    let client = Client::connect(config(&stub)).unwrap();
    let items: Vec<_> = (0..3).map(item).collect();
    let report = client.collect_all(&items, Execution::Parallel).unwrap();
    assert!(report.failures.is_empty());
    for o in &report.outcomes {
        assert!(o.degraded_fields.contains(&Degraded::NoEmbeddings));
        assert!(o.degraded_fields.contains(&Degraded::NoReferenceScoring));
        assert!(!o.degraded_fields.contains(&Degraded::NoPosStats));
        assert!(o.trace.reference_scored.is_none());
        assert!(o.trace.greedy_embedding.is_none());
    }
    let probes = stub
        .requests()
        .iter()
        .filter(|r| r.path == "/v1/embeddings")
        .count();
    assert!(probes <= 3);

    // with one worker the endpoint is probed once, then remembered as absent
    let serial = Stub::start(StubConfig {
        embeddings: false,
        ..Default::default()
    });
    let mut cfg = config(&serial);
    cfg.max_concurrent_requests = 1;
    let client = Client::connect(cfg).unwrap();
    client.collect_all(&items, Execution::Parallel).unwrap();
    let probes = serial
        .requests()
        .iter()
        .filter(|r| r.path == "/v1/embeddings")
        .count();
    assert_eq!(probes, 1);
}

#[test]
fn chat_style_has_no_reference_scoring() {
    let stub = Stub::start(StubConfig::default());
    let mut cfg = config(&stub);
    cfg.api_style = ApiStyle::Chat;
    let client = Client::connect(cfg).unwrap();
    let outcome = client.collect_trace(&item(5)).unwrap();
    assert!(outcome
        .degraded_fields
        .contains(&Degraded::NoReferenceScoring));
    assert_eq!(outcome.trace.samples.len(), 4);
    let reqs = stub.requests();
    assert!(reqs.iter().all(|r| r.path != "/v1/completions"));
    let chat = reqs
        .iter()
        .find(|r| r.path == "/v1/chat/completions")
        .unwrap();
    assert_eq!(
        chat.body["messages"][0]["content"],
        "Question 5: what is it?"
    );
    assert_eq!(chat.body["logprobs"], true);
    assert_eq!(chat.body["top_logprobs"], 5);
}

#[test]
fn permanent_item_failures_are_partial() {
    let stub = Stub::start(StubConfig {
        reject_prompts: vec!["Question 17:".into(), "Question 58:".into()],
        ..Default::default()
    });
    let mut cfg = config(&stub);
    cfg.num_samples = 2;
    let client = Client::connect(cfg).unwrap();
    let items: Vec<_> = (0..100).map(item).collect();
    let report = client.collect_all(&items, Execution::Parallel).unwrap();
    assert_eq!(report.outcomes.len(), 98);
    let mut failed: Vec<_> = report.failures.iter().map(|f| f.item_id.as_str()).collect();
    failed.sort();
    assert_eq!(failed, vec!["q017", "q058"]);
    // dataset order is preserved among the survivors
    let ids: Vec<_> = report
        .outcomes
        .iter()
        .map(|o| o.trace.item.item_id.clone())
        .collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
}

#[test]
fn empty_prompt_is_rejected_before_the_wire() {
    let stub = Stub::start(StubConfig::default());
    let client = Client::connect(config(&stub)).unwrap();
    let mut bad = item(0);
    bad.prompt.clear();
    assert!(client.sample_generations(&bad).is_err());
    assert_eq!(stub.request_count(), 0);
}
