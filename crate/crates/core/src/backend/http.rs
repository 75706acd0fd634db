//! OpenAI-compatible wire protocol.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Map, Value};

use super::{
    ApiStyle, BackendConfig, BackendError, BackendErrorKind, BackendIdentity, PositionStats,
    NO_LOGPROBS,
};
use crate::error::Result;
use crate::trace::{Decoding, FinishReason, GenerationSample, ItemRecord, TokenEvidence};

/// Temperature sent when a server rejects an exact 0.
const GREEDY_FALLBACK_TEMPERATURE: f64 = 1e-4;

pub(super) struct HttpBackend {
    agent: ureq::Agent,
    base: String,
    model: String,
    style: ApiStyle,
    auth: Option<String>,
    embeddings_absent: AtomicBool,
    greedy_needs_fallback: AtomicBool,
}

fn err(kind: BackendErrorKind, message: impl Into<String>) -> crate::Error {
    BackendError::new(kind, message).into()
}

fn protocol(message: impl Into<String>) -> crate::Error {
    err(BackendErrorKind::Protocol, message)
}

impl HttpBackend {
    pub(super) fn new(cfg: &BackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            base: cfg.base_url.trim_end_matches('/').to_string(),
            model: cfg.model_name.clone(),
            style: cfg.api_style,
            auth: cfg.api_key.as_ref().map(|k| format!("Bearer {k}")),
            embeddings_absent: AtomicBool::new(!cfg.embeddings),
            greedy_needs_fallback: AtomicBool::new(false),
        }
    }

    pub(super) fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            scheme: self.base.split("://").next().unwrap_or("http").to_string(),
            location: self.base.clone(),
            model: self.model.clone(),
            api_style: Some(self.style),
            position_stats: PositionStats::Approximate,
            logprob_source: "as reported by the server".into(),
        }
    }

    /// POST with retries on 429, 5xx and transport errors. Every attempt is
    /// counted in `calls`. Returns the final status and parsed body
    /// (`Null` when the body is not JSON).
    fn post(
        &self,
        path: &str,
        body: &Value,
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<(u16, Value)> {
        let url = format!("{}{path}", self.base);
        let mut attempt = 0u32;
        loop {
            calls.fetch_add(1, Ordering::Relaxed);
            let mut req = self.agent.post(&url);
            if let Some(auth) = &self.auth {
                req = req.header("Authorization", auth);
            }
            let failure = match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let retryable = status == 429 || (status >= 500 && status != 501);
                    if !retryable {
                        let value = resp.body_mut().read_json::<Value>().unwrap_or(Value::Null);
                        return Ok((status, value));
                    }
                    format!("HTTP {status}")
                }
                Err(e) => e.to_string(),
            };
            if attempt >= cfg.retry_limit {
                return Err(err(
                    BackendErrorKind::Transport,
                    format!(
                        "POST {url} failed after {} attempts: {failure}",
                        attempt + 1
                    ),
                ));
            }
            log::debug!("POST {url}: {failure}, retrying");
            std::thread::sleep(backoff(cfg.backoff_base, attempt));
            attempt += 1;
        }
    }

    fn generation_body(
        &self,
        prompt: &str,
        cfg: &BackendConfig,
        temperature: f64,
        seed: Option<u64>,
    ) -> Value {
        let mut body = match self.style {
            ApiStyle::Completions => json!({
                "model": self.model,
                "prompt": prompt,
                "temperature": temperature,
                "max_tokens": cfg.max_tokens,
                "n": 1,
                "logprobs": cfg.top_logprobs,
            }),
            ApiStyle::Chat => json!({
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": temperature,
                "max_tokens": cfg.max_tokens,
                "n": 1,
                "logprobs": true,
                "top_logprobs": cfg.top_logprobs,
            }),
        };
        if let Some(seed) = seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn endpoint(&self) -> &'static str {
        match self.style {
            ApiStyle::Completions => "/v1/completions",
            ApiStyle::Chat => "/v1/chat/completions",
        }
    }

    fn generate(
        &self,
        body: &Value,
        decoding: Decoding,
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<GenerationSample> {
        let (status, value) = self.post(self.endpoint(), body, cfg, calls)?;
        check_status(status, &value)?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| protocol("response has no choices"))?;
        let parsed = match self.style {
            ApiStyle::Completions => parse_completion_choice(choice)?,
            ApiStyle::Chat => parse_chat_choice(choice)?,
        };
        Ok(GenerationSample {
            sample_index: 0,
            text: parsed.text,
            decoding,
            temperature: None,
            seed: None,
            tokens: parsed.tokens,
            finish_reason: parsed.finish_reason,
        })
    }

    pub(super) fn sample(
        &self,
        item: &ItemRecord,
        index: usize,
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<GenerationSample> {
        let seed = cfg.sample_seed(index);
        let body = self.generation_body(&item.prompt, cfg, cfg.temperature, seed);
        let mut s = self.generate(&body, Decoding::Temperature, cfg, calls)?;
        s.sample_index = index;
        s.temperature = Some(cfg.temperature);
        s.seed = seed;
        Ok(s)
    }

    pub(super) fn greedy(
        &self,
        item: &ItemRecord,
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<GenerationSample> {
        if !self.greedy_needs_fallback.load(Ordering::Relaxed) {
            let body = self.generation_body(&item.prompt, cfg, 0.0, None);
            match self.generate(&body, Decoding::Greedy, cfg, calls) {
                Err(crate::Error::Backend(e)) if e.kind == BackendErrorKind::Status(400) => {
                    log::info!("server rejected temperature 0 ({e}); using {GREEDY_FALLBACK_TEMPERATURE} with top_k 1");
                    self.greedy_needs_fallback.store(true, Ordering::Relaxed);
                }
                other => return other,
            }
        }
        let mut body = self.generation_body(&item.prompt, cfg, GREEDY_FALLBACK_TEMPERATURE, None);
        body["top_k"] = json!(1);
        self.generate(&body, Decoding::Greedy, cfg, calls)
    }

    /// Echo scoring of `prompt + " " + reference`. Tokens starting before the
    /// end of the prompt are dropped, as is anything generated past the
    /// supplied text.
    pub(super) fn score_reference(
        &self,
        item: &ItemRecord,
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<Option<Vec<TokenEvidence>>> {
        if self.style == ApiStyle::Chat {
            return Ok(None);
        }
        let full = join_prompt(&item.prompt, &item.reference_answer);
        let body = json!({
            "model": self.model,
            "prompt": full,
            "temperature": 0.0,
            "max_tokens": 1,
            "n": 1,
            "echo": true,
            "logprobs": cfg.top_logprobs,
        });
        let (status, value) = self.post("/v1/completions", &body, cfg, calls)?;
        if matches!(status, 400 | 404 | 422 | 501) {
            log::warn!("echo scoring unavailable (HTTP {status})");
            return Ok(None);
        }
        check_status(status, &value)?;
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| protocol("response has no choices"))?;
        let echoed = parse_logprob_block(choice)?;
        Ok(select_reference(
            &echoed,
            item.prompt.chars().count(),
            full.chars().count(),
        ))
    }

    pub(super) fn embed(
        &self,
        texts: &[&str],
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<Option<Vec<Vec<f64>>>> {
        if self.embeddings_absent.load(Ordering::Relaxed) {
            return Ok(None);
        }
        let body = json!({"model": self.model, "input": texts});
        let (status, value) = self.post("/v1/embeddings", &body, cfg, calls)?;
        if matches!(status, 404 | 405 | 501) {
            log::warn!("embeddings endpoint unavailable (HTTP {status})");
            self.embeddings_absent.store(true, Ordering::Relaxed);
            return Ok(None);
        }
        check_status(status, &value)?;
        parse_embeddings(&value).map(Some)
    }
}

fn backoff(base: Duration, attempt: u32) -> Duration {
    let step = base.saturating_mul(1u32 << attempt.min(16));
    let jitter = rand::rng().random_range(0.0..=1.0);
    step + step.mul_f64(jitter)
}

fn check_status(status: u16, body: &Value) -> Result<()> {
    if (200..300).contains(&status) {
        return Ok(());
    }
    let detail = body
        .pointer("/error/message")
        .and_then(Value::as_str)
        .unwrap_or("");
    Err(err(
        BackendErrorKind::Status(status),
        format!("HTTP {status} {detail}").trim_end().to_string(),
    ))
}

pub(super) fn join_prompt(prompt: &str, reference: &str) -> String {
    if prompt.ends_with(char::is_whitespace) {
        format!("{prompt}{reference}")
    } else {
        format!("{prompt} {reference}")
    }
}

#[derive(Debug)]
struct Parsed {
    text: String,
    tokens: Vec<TokenEvidence>,
    finish_reason: Option<FinishReason>,
}

/// Mean and standard deviation of log-probability over a next-token
/// distribution known only through its top entries: the listed outcomes plus
/// one outcome carrying the remaining mass. `None` for an empty list.
pub fn approximate_position_stats(top: &[f64]) -> Option<(f64, f64)> {
    if top.is_empty() {
        return None;
    }
    let mut outcomes: Vec<(f64, f64)> = top.iter().map(|&lp| (lp.exp(), lp)).collect();
    let tail = 1.0 - outcomes.iter().map(|o| o.0).sum::<f64>();
    if tail > 1e-12 {
        outcomes.push((tail, tail.ln()));
    }
    let z: f64 = outcomes.iter().map(|o| o.0).sum();
    let mu = outcomes.iter().map(|(p, lp)| p * lp).sum::<f64>() / z;
    let var = outcomes
        .iter()
        .map(|(p, lp)| p * (lp - mu).powi(2))
        .sum::<f64>()
        / z;
    Some((mu, var.sqrt()))
}

fn finish_reason(choice: &Value) -> Option<FinishReason> {
    match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") => Some(FinishReason::Stop),
        Some("length") => Some(FinishReason::Length),
        _ => None,
    }
}

fn no_logprobs() -> crate::Error {
    err(BackendErrorKind::Capability, NO_LOGPROBS)
}

/// Token text, its log-prob and position stats `(mu, sigma)`.
type EchoedToken = (String, Option<f64>, Option<(f64, f64)>);

/// Tokens of a completions-style `logprobs` block; a `None` log-prob is a
/// JSON null (the first echoed token).
fn parse_logprob_block(choice: &Value) -> Result<Vec<EchoedToken>> {
    let block = choice
        .get("logprobs")
        .filter(|v| v.is_object())
        .ok_or_else(no_logprobs)?;
    let tokens = block
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(no_logprobs)?;
    let lps = block
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(no_logprobs)?;
    if tokens.len() != lps.len() {
        return Err(protocol("tokens and token_logprobs differ in length"));
    }
    let tops = block.get("top_logprobs").and_then(Value::as_array);
    tokens
        .iter()
        .zip(lps)
        .enumerate()
        .map(|(i, (tok, lp))| {
            let tok = tok
                .as_str()
                .ok_or_else(|| protocol("token is not a string"))?;
            let lp = match lp {
                Value::Null => None,
                v => Some(
                    v.as_f64()
                        .ok_or_else(|| protocol("log-prob is not a number"))?,
                ),
            };
            let stats = tops
                .and_then(|t| t.get(i))
                .and_then(Value::as_object)
                .and_then(|m| approximate_position_stats(&map_values(m)));
            Ok((tok.to_string(), lp, stats))
        })
        .collect()
}

fn map_values(m: &Map<String, Value>) -> Vec<f64> {
    m.values().filter_map(Value::as_f64).collect()
}

fn evidence(token: String, logprob: f64, stats: Option<(f64, f64)>) -> Result<TokenEvidence> {
    if logprob.is_nan() || logprob > 0.0 {
        return Err(protocol(format!(
            "log-prob {logprob} for {token:?} is not <= 0"
        )));
    }
    let t = TokenEvidence::new(token, logprob);
    Ok(match stats {
        Some((mu, sigma)) => t.with_position_stats(mu, sigma),
        None => t,
    })
}

fn settle_text(text: &str, tokens: &[TokenEvidence]) -> String {
    let joined: String = tokens.iter().map(|t| t.token_text.as_str()).collect();
    if joined != text {
        log::debug!("token texts do not reproduce the returned text; using their concatenation");
    }
    joined
}

fn parse_completion_choice(choice: &Value) -> Result<Parsed> {
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .unwrap_or_default();
    let tokens = parse_logprob_block(choice)?
        .into_iter()
        .map(|(tok, lp, stats)| {
            evidence(
                tok,
                lp.ok_or_else(|| protocol("null log-prob in a sample"))?,
                stats,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Parsed {
        text: settle_text(text, &tokens),
        tokens,
        finish_reason: finish_reason(choice),
    })
}

fn parse_chat_choice(choice: &Value) -> Result<Parsed> {
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default();
    let content = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .ok_or_else(no_logprobs)?;
    let tokens = content
        .iter()
        .map(|entry| {
            let tok = entry
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| protocol("token is not a string"))?;
            let lp = entry
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or_else(no_logprobs)?;
            let top: Vec<f64> = entry
                .get("top_logprobs")
                .and_then(Value::as_array)
                .map(|a| {
                    a.iter()
                        .filter_map(|e| e.get("logprob").and_then(Value::as_f64))
                        .collect()
                })
                .unwrap_or_default();
            evidence(tok.to_string(), lp, approximate_position_stats(&top))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Parsed {
        text: settle_text(text, &tokens),
        tokens,
        finish_reason: finish_reason(choice),
    })
}

/// Keep echoed tokens lying in `[prompt_chars, full_chars)`. `None` when the
/// echo does not cover the supplied text.
fn select_reference(
    echoed: &[EchoedToken],
    prompt_chars: usize,
    full_chars: usize,
) -> Option<Vec<TokenEvidence>> {
    let mut out = Vec::new();
    let mut offset = 0usize;
    for (tok, lp, stats) in echoed {
        let start = offset;
        offset += tok.chars().count();
        if start < prompt_chars {
            continue;
        }
        if offset > full_chars {
            break;
        }
        out.push(evidence(tok.clone(), (*lp)?, *stats).ok()?);
    }
    (offset >= full_chars && !out.is_empty()).then_some(out)
}

fn parse_embeddings(value: &Value) -> Result<Vec<Vec<f64>>> {
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("embeddings response has no data"))?;
    let mut rows: Vec<(u64, Vec<f64>)> = data
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let index = row.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
            let v = row
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| protocol("embedding is not an array"))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| protocol("embedding entry is not a number"))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((index, v))
        })
        .collect::<Result<_>>()?;
    rows.sort_by_key(|r| r.0);
    Ok(rows.into_iter().map(|r| r.1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::log_stats;

    #[test]
    fn full_top_list_gives_exact_stats() {
        let p = [0.5, 0.25, 0.125, 0.125];
        let lps: Vec<f64> = p.iter().map(|x: &f64| x.ln()).collect();
        let (mu, sigma) = approximate_position_stats(&lps).unwrap();
        let (emu, esigma) = log_stats(&p);
        assert!((mu - emu).abs() < 1e-12 && (sigma - esigma).abs() < 1e-12);
    }

    #[test]
    fn tail_mass_is_lumped() {
        // listed 0.5 + 0.25, remaining 0.25 as one outcome
        let (mu, _) = approximate_position_stats(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        let expected = 0.5 * 0.5f64.ln() + 0.5 * 0.25f64.ln();
        assert!((mu - expected).abs() < 1e-12);
        assert!(approximate_position_stats(&[]).is_none());
    }

    #[test]
    fn completion_choice_parses() {
        let choice = json!({
            "text": "Hello world",
            "finish_reason": "length",
            "logprobs": {
                "tokens": ["Hello", " world"],
                "token_logprobs": [-0.5, -1.25],
                "top_logprobs": [{"Hello": -0.5, "Hi": -1.5}, null],
            }
        });
        let p = parse_completion_choice(&choice).unwrap();
        assert_eq!(p.text, "Hello world");
        assert_eq!(p.tokens[1].logprob, -1.25);
        assert!(p.tokens[0].pos_mu.is_some() && p.tokens[1].pos_mu.is_none());
        assert_eq!(p.finish_reason, Some(FinishReason::Length));
    }

    #[test]
    fn missing_logprobs_is_a_capability_error() {
        let choice = json!({"text": "x", "logprobs": null});
        match parse_completion_choice(&choice) {
            Err(crate::Error::Backend(e)) => {
                assert!(e.is_fatal());
                assert_eq!(e.message, NO_LOGPROBS);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chat_choice_parses() {
        let choice = json!({
            "message": {"content": "ab"},
            "logprobs": {"content": [
                {"token": "a", "logprob": -0.1, "top_logprobs": [{"token": "a", "logprob": -0.1}]},
                {"token": "b", "logprob": -0.2, "top_logprobs": []},
            ]}
        });
        let p = parse_chat_choice(&choice).unwrap();
        assert_eq!(p.tokens.len(), 2);
        assert!(p.tokens[0].pos_sigma.is_some() && p.tokens[1].pos_sigma.is_none());
    }

    #[test]
    fn reference_selection_by_offset() {
        let echoed = vec![
            ("Q".to_string(), None, None),
            (":".to_string(), Some(-1.0), None),
            (" a".to_string(), Some(-0.5), None),
            (" b".to_string(), Some(-0.25), None),
            (" gen".to_string(), Some(-3.0), None),
        ];
        let full = join_prompt("Q:", "a b");
        assert_eq!(full, "Q: a b");
        let r = select_reference(&echoed, 2, full.chars().count()).unwrap();
        let lps: Vec<f64> = r.iter().map(|t| t.logprob).collect();
        assert_eq!(lps, vec![-0.5, -0.25]);
        // echo that stops inside the prompt covers nothing
        assert!(select_reference(&echoed[..2], 2, 6).is_none());
    }

    #[test]
    fn embeddings_sorted_by_index() {
        let v = json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]},
        ]});
        assert_eq!(
            parse_embeddings(&v).unwrap(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0]]
        );
    }

    #[test]
    fn backoff_grows() {
        let base = Duration::from_millis(10);
        let d0 = backoff(base, 0);
        let d3 = backoff(base, 3);
        assert!(d0 >= base && d0 <= base * 2);
        assert!(d3 >= base * 8 && d3 <= base * 16);
    }
}
