//! Remote policy and scorer against a local stub HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use callstep::policy::{complete_sampled, GenRequest, Policy, RemotePolicy, RemotePolicyConfig};
use callstep::remote::RemoteConfig;
use callstep::scorer::{PrmProtocol, RemotePrmConfig, RemotePrmScorer, ScoreRequest, StepScorer};
use callstep::{
    CallSequence, FunctionCall, FunctionSpec, MachineState, ParamKind, ParamSpec, Query,
    ScorerError, StepKind, ToolUniverse,
};
use serde_json::{json, Value};

type Handler = Box<dyn Fn(&Value) -> (u16, String, Duration) + Send>;

/// Serves each request with `handler` and records the parsed bodies.
fn stub(handler: Handler) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            if reader.read_exact(&mut body).is_err() {
                continue;
            }
            let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, reply, delay) = handler(&value);
            log.lock().unwrap().push(value);
            thread::sleep(delay);
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn query() -> Query {
    Query {
        id: "q7".into(),
        text: "Weather in Oslo".into(),
        universe: ToolUniverse::new(vec![FunctionSpec::new("get_weather", "Weather")
            .with_param(ParamSpec::new("city", ParamKind::String, true))]),
        ground_truths: vec![CallSequence::new(vec![
            FunctionCall::new("get_weather").with_arg("city", json!("Oslo"))
        ])],
        category: None,
    }
}

fn remote(endpoint: String) -> RemoteConfig {
    RemoteConfig {
        endpoint,
        timeout_secs: 2.0,
        retries: 0,
        ..RemoteConfig::default()
    }
}

fn scorer(endpoint: String, protocol: PrmProtocol) -> RemotePrmScorer {
    RemotePrmScorer::new(RemotePrmConfig {
        remote: remote(endpoint),
        protocol,
        ..RemotePrmConfig::default()
    })
    .unwrap()
}

fn request<'a>(q: &'a Query) -> ScoreRequest<'a> {
    ScoreRequest {
        query: q,
        prefix: "[{\"name\":\"get_weather\",",
        step: "\"arguments\":{\"city\":\"Oslo\"",
        kind: StepKind::ArgValue,
    }
}

#[test]
fn logits_protocol_round_trip() {
    let (url, seen) = stub(Box::new(|_| {
        (
            200,
            json!({"logit_pos": 3f64.ln(), "logit_neg": 0.0}).to_string(),
            Duration::ZERO,
        )
    }));
    let q = query();
    let s = scorer(url, PrmProtocol::Logits)
        .score(&request(&q))
        .unwrap();
    assert!((s.prob - 0.75).abs() < 1e-12);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["query"], "Weather in Oslo");
    assert_eq!(body["kind"], "ARG_VALUE");
    assert_eq!(body["step"], "\"arguments\":{\"city\":\"Oslo\"");
    assert_eq!(body["tools"][0]["name"], "get_weather");
}

#[test]
fn logprobs_protocol_reads_top_alternatives() {
    let (url, seen) = stub(Box::new(|_| {
        let reply = json!({"choices": [{"text": "+", "logprobs": {"top_logprobs": [{" +": -0.1, " -": -2.4, "x": -5.0}]}}]});
        (200, reply.to_string(), Duration::ZERO)
    }));
    let q = query();
    let s = scorer(url, PrmProtocol::CompletionLogprobs)
        .score(&request(&q))
        .unwrap();
    let expected = (-0.1f64).exp() / ((-0.1f64).exp() + (-2.4f64).exp());
    assert!((s.prob - expected).abs() < 1e-12);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["max_tokens"], 1);
    assert_eq!(body["logprobs"], 20);
    assert!(body["prompt"].as_str().unwrap().contains("Weather in Oslo"));
}

#[test]
fn server_error_is_protocol_error_with_context() {
    let (url, _) = stub(Box::new(|_| (500, "{}".into(), Duration::ZERO)));
    let q = query();
    let err = scorer(url, PrmProtocol::Logits)
        .score(&request(&q))
        .unwrap_err();
    match err {
        ScorerError::Protocol(m) => assert!(m.contains("q7"), "{m}"),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn slow_server_times_out() {
    let (url, _) = stub(Box::new(|_| {
        (200, "{}".into(), Duration::from_millis(1500))
    }));
    let q = query();
    let mut cfg = RemotePrmConfig {
        remote: remote(url),
        ..RemotePrmConfig::default()
    };
    cfg.remote.timeout_secs = 0.3;
    let err = RemotePrmScorer::new(cfg)
        .unwrap()
        .score(&request(&q))
        .unwrap_err();
    assert!(matches!(err, ScorerError::Timeout(_)), "{err:?}");
}

#[test]
fn refused_connection_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let q = query();
    let err = scorer(format!("http://127.0.0.1:{port}/v1"), PrmProtocol::Logits)
        .score(&request(&q))
        .unwrap_err();
    assert!(matches!(err, ScorerError::Transport(_)), "{err:?}");
}

#[test]
fn remote_policy_cuts_at_boundary_and_restores_stop() {
    // The server drops the matched stop string, as completion servers do.
    let (url, seen) = stub(Box::new(|_| {
        (
            200,
            json!({"choices": [{"text": "[{\"name\":\"get_weather", "stop_reason": "\","}]})
                .to_string(),
            Duration::ZERO,
        )
    }));
    let p = RemotePolicy::new(RemotePolicyConfig {
        remote: remote(url),
        ..RemotePolicyConfig::default()
    })
    .unwrap();
    let q = query();
    let m = MachineState::default();
    let d = p
        .generate_step(&GenRequest {
            query: &q,
            prefix: "",
            machine: &m,
            temperature: 0.5,
            seed: 10,
            sample_index: 3,
            max_chars: 2048,
        })
        .unwrap();
    assert_eq!(d.text, "[{\"name\":\"get_weather\",");
    assert!(!d.boundary_missing);
    let body = &seen.lock().unwrap()[0];
    assert_eq!(body["seed"], 13);
    assert_eq!(body["temperature"], 0.5);
    assert!(body["stop"].as_array().is_some_and(|s| !s.is_empty()));
}

#[test]
fn remote_policy_resumes_after_stop_inside_a_value() {
    let (url, seen) = stub(Box::new(|body| {
        let prompt = body["prompt"].as_str().unwrap_or_default();
        let reply = if prompt.ends_with("\"Oslo,") {
            json!({"text": " Norway\"", "stop_reason": "}"})
        } else {
            json!({"text": "\"arguments\":{\"city\":\"Oslo", "stop_reason": ","})
        };
        (200, reply.to_string(), Duration::ZERO)
    }));
    let p = RemotePolicy::new(RemotePolicyConfig {
        remote: remote(url),
        ..RemotePolicyConfig::default()
    })
    .unwrap();
    let q = query();
    let mut m = MachineState::default();
    let prefix = "[{\"name\":\"get_weather\",";
    m.feed(prefix).unwrap();
    let d = p
        .generate_step(&GenRequest {
            query: &q,
            prefix,
            machine: &m,
            temperature: 0.0,
            seed: 0,
            sample_index: 0,
            max_chars: 2048,
        })
        .unwrap();
    assert_eq!(d.text, "\"arguments\":{\"city\":\"Oslo, Norway\"");
    assert!(!d.boundary_missing);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn remote_policy_completes_a_response() {
    // Always offers the whole answer; each step keeps only up to its boundary.
    let full = "[{\"name\":\"get_weather\",\"arguments\":{\"city\":\"Oslo\"}}]";
    let (url, _) = stub(Box::new(move |body| {
        let prompt = body["prompt"].as_str().unwrap_or_default();
        let done = full
            .char_indices()
            .map(|(i, _)| i)
            .filter(|&i| i > 0 && prompt.ends_with(&full[..i]))
            .max();
        let rest = &full[done.unwrap_or(0)..];
        (200, json!({"text": rest}).to_string(), Duration::ZERO)
    }));
    let p = RemotePolicy::new(RemotePolicyConfig {
        remote: remote(url),
        ..RemotePolicyConfig::default()
    })
    .unwrap();
    let c = complete_sampled(&p, &query(), 0.0, 1, 0, 32).unwrap();
    assert_eq!(c.text, full);
    assert_eq!(c.steps, 5);
}
