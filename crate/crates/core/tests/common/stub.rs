//! A minimal OpenAI-compatible HTTP server on a loopback port, recording every
//! request it receives. Responses are deterministic functions of the request.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Map, Value};

#[derive(Clone, Debug)]
pub struct StubConfig {
    /// The first this-many requests are answered with 429.
    pub rate_limited: usize,
    /// Include a logprobs block in generations.
    pub logprobs: bool,
    /// Serve /v1/embeddings (404 otherwise).
    pub embeddings: bool,
    /// Accept `echo: true` (400 otherwise).
    pub echo: bool,
    /// Prompts containing any of these get a permanent 422.
    pub reject_prompts: Vec<String>,
    /// Held while a request is "in flight".
    pub delay: Duration,
    /// Tokens per generation.
    pub length: usize,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            rate_limited: 0,
            logprobs: true,
            embeddings: true,
            echo: true,
            reject_prompts: Vec::new(),
            delay: Duration::ZERO,
            length: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub authorization: Option<String>,
    pub content_type: Option<String>,
    pub body: Value,
}

#[derive(Default)]
struct State {
    requests: Mutex<Vec<Recorded>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    served: AtomicUsize,
    rate_limited: AtomicUsize,
}

pub struct Stub {
    pub url: String,
    cfg: StubConfig,
    state: Arc<State>,
}

const WORDS: [&str; 8] = [
    "alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta",
];

impl Stub {
    pub fn start(cfg: StubConfig) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let state = Arc::new(State::default());
        let (c, s) = (cfg.clone(), state.clone());
        thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(conn) = conn else { break };
                let (c, s) = (c.clone(), s.clone());
                thread::spawn(move || serve(conn, &c, &s));
            }
        });
        Stub { url, cfg, state }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.state.requests.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.served.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn rate_limited(&self) -> usize {
        self.state.rate_limited.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> &StubConfig {
        &self.cfg
    }
}

fn serve(conn: TcpStream, cfg: &StubConfig, state: &State) {
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    let mut writer = conn;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut parts = request_line.split_whitespace();
        let method = parts.next().unwrap_or_default().to_string();
        let path = parts.next().unwrap_or_default().to_string();
        let mut length = 0usize;
        let mut authorization = None;
        let mut content_type = None;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let (name, value) = line.split_once(':').unwrap_or((line, ""));
            let value = value.trim().to_string();
            match name.to_ascii_lowercase().as_str() {
                "content-length" => length = value.parse().unwrap_or(0),
                "authorization" => authorization = Some(value),
                "content-type" => content_type = Some(value),
                _ => {}
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);

        let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        state.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let index = state.served.fetch_add(1, Ordering::SeqCst);
        state.requests.lock().unwrap().push(Recorded {
            method,
            path: path.clone(),
            authorization,
            content_type,
            body: body.clone(),
        });
        if !cfg.delay.is_zero() {
            thread::sleep(cfg.delay);
        }
        let (status, reply) = if index < cfg.rate_limited {
            state.rate_limited.fetch_add(1, Ordering::SeqCst);
            (429, json!({"error": {"message": "slow down"}}))
        } else {
            respond(&path, &body, cfg)
        };
        state.in_flight.fetch_sub(1, Ordering::SeqCst);

        let text = reply.to_string();
        let reason = match status {
            200 => "OK",
            400 => "Bad Request",
            404 => "Not Found",
            422 => "Unprocessable Entity",
            429 => "Too Many Requests",
            _ => "Status",
        };
        let head = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            text.len()
        );
        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(text.as_bytes()).is_err()
        {
            return;
        }
        let _ = writer.flush();
    }
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// Split text into word tokens, each carrying its leading space.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch == ' ' && !cur.is_empty() && !cur.ends_with(' ') {
            out.push(std::mem::take(&mut cur));
        }
        cur.push(ch);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Deterministic log-prob in [-4.0, -1.2] for a key.
fn logprob(key: &str) -> f64 {
    -1.2 - (fnv(key.as_bytes()) % 57) as f64 * 0.05
}

fn top_map(token: &str, lp: f64) -> Value {
    let mut m = Map::new();
    m.insert(token.to_string(), json!(lp));
    m.insert(format!("{token}#"), json!(lp - 0.5));
    m.insert(format!("{token}##"), json!(lp - 1.0));
    Value::Object(m)
}

fn generation(key: &str, temperature: f64, length: usize) -> Vec<(String, f64)> {
    (0..length)
        .map(|i| {
            let h = if temperature == 0.0 {
                fnv(format!("{key}|{i}|greedy").as_bytes())
            } else {
                fnv(format!("{key}|{i}").as_bytes())
            };
            let w = WORDS[(h % WORDS.len() as u64) as usize];
            let tok = if i == 0 {
                w.to_string()
            } else {
                format!(" {w}")
            };
            let lp = logprob(&format!("{key}|{i}|lp"));
            (tok, lp)
        })
        .collect()
}

fn error(status: u16, message: &str) -> (u16, Value) {
    (status, json!({"error": {"message": message}}))
}

fn respond(path: &str, body: &Value, cfg: &StubConfig) -> (u16, Value) {
    let prompt = body
        .get("prompt")
        .and_then(Value::as_str)
        .map(str::to_string)
        .or_else(|| {
            body.pointer("/messages/0/content")
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_default();
    if cfg
        .reject_prompts
        .iter()
        .any(|r| prompt.contains(r.as_str()))
    {
        return error(422, "rejected");
    }
    match path {
        "/v1/completions" if body.get("echo") == Some(&Value::Bool(true)) => {
            if !cfg.echo {
                return error(400, "echo not supported");
            }
            let mut toks = word_tokens(&prompt);
            toks.push(" eos".into());
            let lps: Vec<Value> = toks
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == 0 {
                        Value::Null
                    } else {
                        json!(logprob(t))
                    }
                })
                .collect();
            let tops: Vec<Value> = toks
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == 0 {
                        Value::Null
                    } else {
                        top_map(t, logprob(t))
                    }
                })
                .collect();
            let text: String = toks.concat();
            (
                200,
                json!({"choices": [{"text": text, "finish_reason": "length",
                "logprobs": {"tokens": toks, "token_logprobs": lps, "top_logprobs": tops}}]}),
            )
        }
        "/v1/completions" => {
            let temperature = body
                .get("temperature")
                .and_then(Value::as_f64)
                .unwrap_or(1.0);
            let key = format!(
                "{prompt}|{}",
                body.get("seed").map(Value::to_string).unwrap_or_default()
            );
            let gen = generation(&key, temperature, cfg.length);
            let text: String = gen.iter().map(|g| g.0.as_str()).collect();
            if !cfg.logprobs {
                return (
                    200,
                    json!({"choices": [{"text": text, "finish_reason": "length", "logprobs": null}]}),
                );
            }
            let toks: Vec<&str> = gen.iter().map(|g| g.0.as_str()).collect();
            let lps: Vec<f64> = gen.iter().map(|g| g.1).collect();
            let tops: Vec<Value> = gen.iter().map(|g| top_map(&g.0, g.1)).collect();
            (
                200,
                json!({"choices": [{"text": text, "finish_reason": "length",
                "logprobs": {"tokens": toks, "token_logprobs": lps, "top_logprobs": tops}}]}),
            )
        }
        "/v1/chat/completions" => {
            let temperature = body
                .get("temperature")
                .and_then(Value::as_f64)
                .unwrap_or(1.0);
            let key = format!(
                "{prompt}|{}",
                body.get("seed").map(Value::to_string).unwrap_or_default()
            );
            let gen = generation(&key, temperature, cfg.length);
            let text: String = gen.iter().map(|g| g.0.as_str()).collect();
            if !cfg.logprobs {
                return (
                    200,
                    json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]}),
                );
            }
            let content: Vec<Value> = gen
                .iter()
                .map(|(t, lp)| json!({"token": t, "logprob": lp,
                    "top_logprobs": [{"token": t, "logprob": lp}, {"token": format!("{t}#"), "logprob": lp - 0.5}]}))
                .collect();
            (
                200,
                json!({"choices": [{"message": {"role": "assistant", "content": text},
                "finish_reason": "stop", "logprobs": {"content": content}}]}),
            )
        }
        "/v1/embeddings" => {
            if !cfg.embeddings {
                return error(404, "no such endpoint");
            }
            let inputs: Vec<String> = body
                .get("input")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(Value::as_str)
                        .map(str::to_string)
                        .collect()
                })
                .unwrap_or_default();
            // listed in reverse to exercise index ordering
            let data: Vec<Value> = inputs
                .iter()
                .enumerate()
                .rev()
                .map(|(i, t)| {
                    let v: Vec<f64> = WORDS
                        .iter()
                        .map(|w| t.matches(w).count() as f64 + 0.5)
                        .collect();
                    json!({"index": i, "embedding": v})
                })
                .collect();
            (200, json!({"data": data}))
        }
        _ => error(404, "no such endpoint"),
    }
}
