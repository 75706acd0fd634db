//! Trace acquisition from a model backend.
//!
//! Two backends sit behind [`Client`]: an OpenAI-compatible HTTP server
//! (`http://` / `https://` base URLs) and the in-process toy model
//! (`toy:<spec path>`). Both produce the same [`ItemTrace`] shape; fields a
//! backend cannot supply are left absent and listed in
//! [`SamplingOutcome::degraded_fields`].

mod http;
mod toy;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::toy::ToyModel;
use crate::trace::{GenerationSample, ItemRecord, ItemTrace, TokenEvidence};

pub use http::approximate_position_stats;

pub const API_KEY_ENV: &str = "CONTAMSCOPE_API_KEY";
pub const BASE_URL_ENV: &str = "CONTAMSCOPE_BASE_URL";

/// Message of the hard error raised when a backend returns no log-probs.
pub const NO_LOGPROBS: &str = "backend does not expose token log-probs";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// `/v1/completions`, with echo scoring of reference answers.
    #[default]
    Completions,
    /// `/v1/chat/completions`; no reference scoring.
    Chat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    /// Never serialized.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub temperature: f64,
    pub num_samples: usize,
    pub max_tokens: usize,
    pub request_timeout: Duration,
    pub max_concurrent_requests: usize,
    pub retry_limit: u32,
    pub seed_base: Option<u64>,
    pub top_logprobs: usize,
    pub api_style: ApiStyle,
    /// Request greedy/reference embeddings.
    pub embeddings: bool,
    /// Also embed every temperature sample (pairwise embedding mode).
    pub embed_samples: bool,
    /// First retry delay; doubles per attempt, plus jitter.
    pub backoff_base: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: String::new(),
            model_name: String::new(),
            api_key: None,
            temperature: 0.8,
            num_samples: 50,
            max_tokens: 512,
            request_timeout: Duration::from_secs(60),
            max_concurrent_requests: 8,
            retry_limit: 3,
            seed_base: None,
            top_logprobs: 5,
            api_style: ApiStyle::Completions,
            embeddings: true,
            embed_samples: false,
            backoff_base: Duration::from_millis(500),
        }
    }
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        BackendConfig {
            base_url: base_url.into(),
            ..Default::default()
        }
    }

    /// Fill `api_key` and an empty `base_url` from the environment.
    pub fn with_env(mut self) -> Self {
        if self.api_key.is_none() {
            self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        }
        if self.base_url.is_empty() {
            if let Ok(url) = std::env::var(BASE_URL_ENV) {
                self.base_url = url;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_url.is_empty() {
            return fail(format!(
                "no backend URL (set --backend-url or {BASE_URL_ENV})"
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.num_samples < 2 {
            return fail(format!(
                "num_samples must be >= 2, got {}",
                self.num_samples
            ));
        }
        if self.max_tokens == 0 {
            return fail("max_tokens must be > 0".into());
        }
        if self.max_concurrent_requests == 0 {
            return fail("max_concurrent_requests must be >= 1".into());
        }
        if self.request_timeout.is_zero() {
            return fail("request_timeout must be > 0".into());
        }
        Ok(())
    }

    /// Seed for temperature sample `index`, if seeds are pinned.
    pub fn sample_seed(&self, index: usize) -> Option<u64> {
        self.seed_base.map(|b| b.wrapping_add(index as u64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degraded {
    NoPosStats,
    NoReferenceScoring,
    NoEmbeddings,
}

/// Degraded capabilities implied by the optional fields missing from `trace`.
pub fn degraded_fields(trace: &ItemTrace) -> BTreeSet<Degraded> {
    let mut out = BTreeSet::new();
    let has_stats = |t: &TokenEvidence| t.pos_mu.is_some() && t.pos_sigma.is_some();
    let sample_tokens = trace
        .samples
        .iter()
        .chain(&trace.greedy)
        .flat_map(|s| &s.tokens);
    let reference_tokens = trace.reference_scored.iter().flatten();
    if !sample_tokens.chain(reference_tokens).all(has_stats) {
        out.insert(Degraded::NoPosStats);
    }
    if trace.reference_scored.is_none() {
        out.insert(Degraded::NoReferenceScoring);
    }
    if trace.greedy_embedding.is_none() || trace.reference_embedding.is_none() {
        out.insert(Degraded::NoEmbeddings);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingOutcome {
    pub trace: ItemTrace,
    /// Wire calls made for this item, retries included.
    pub request_count: u64,
    pub degraded_fields: BTreeSet<Degraded>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollectReport {
    /// Successful items, in dataset order.
    pub outcomes: Vec<SamplingOutcome>,
    pub failures: Vec<ItemFailure>,
}

impl CollectReport {
    pub fn request_count(&self) -> u64 {
        self.outcomes.iter().map(|o| o.request_count).sum()
    }

    pub fn traces(&self) -> Vec<ItemTrace> {
        self.outcomes.iter().map(|o| o.trace.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionStats {
    Exact,
    /// Top-K log-probs plus one lumped tail outcome.
    Approximate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub scheme: String,
    pub location: String,
    pub model: String,
    pub api_style: Option<ApiStyle>,
    pub position_stats: PositionStats,
    /// Which distribution reported log-probs come from.
    pub logprob_source: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendErrorKind {
    /// Connection failure or retryable status, after all retries.
    Transport,
    /// Non-retryable HTTP status.
    Status(u16),
    /// The backend lacks a required capability.
    Capability,
    /// Malformed or inconsistent response.
    Protocol,
    /// The request was rejected before any wire call.
    Precondition,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub message: String,
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, message: impl Into<String>) -> Self {
        BackendError {
            kind,
            message: message.into(),
        }
    }

    /// Fatal errors abort the whole run; the rest fail only the item.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self.kind,
            BackendErrorKind::Capability | BackendErrorKind::Status(401 | 403 | 404)
        )
    }
}

fn is_fatal(e: &Error) -> bool {
    matches!(e, Error::Backend(b) if b.is_fatal())
}

fn precondition(item: &ItemRecord) -> Result<()> {
    if item.prompt.is_empty() {
        return Err(BackendError::new(
            BackendErrorKind::Precondition,
            format!("item {:?} has an empty prompt", item.item_id),
        )
        .into());
    }
    Ok(())
}

enum Kind {
    Toy(toy::ToyBackend),
    Http(http::HttpBackend),
}

/// A configured backend connection.
pub struct Client {
    cfg: BackendConfig,
    kind: Kind,
    total_requests: AtomicU64,
}

/// The reference-scoring and embedding parts of one item's evidence.
struct Extras {
    reference: Option<Vec<TokenEvidence>>,
    embeddings: Option<[Vec<f64>; 2]>,
    sample_embeddings: Option<Vec<Vec<f64>>>,
}

impl Client {
    /// Open a backend from `cfg.base_url`: `toy:<path>` loads a toy model
    /// spec (its temperature is replaced by `cfg.temperature`), `http(s)://`
    /// talks to an OpenAI-compatible server.
    pub fn connect(cfg: BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let kind = if let Some(path) = cfg.base_url.strip_prefix("toy:") {
            let path = PathBuf::from(path);
            let model = ToyModel::from_file(&path)?;
            Kind::Toy(toy::ToyBackend::new(model, &cfg, Some(path))?)
        } else if cfg.base_url.starts_with("http://") || cfg.base_url.starts_with("https://") {
            Kind::Http(http::HttpBackend::new(&cfg))
        } else {
            return Err(Error::Config(format!(
                "unsupported backend URL {:?} (expected toy:<path>, http:// or https://)",
                cfg.base_url
            )));
        };
        Ok(Client {
            cfg,
            kind,
            total_requests: AtomicU64::new(0),
        })
    }

    /// Wrap an in-memory toy model.
    pub fn toy(model: ToyModel, mut cfg: BackendConfig) -> Result<Self> {
        if cfg.base_url.is_empty() {
            cfg.base_url = "toy:<memory>".into();
        }
        cfg.validate()?;
        Ok(Client {
            kind: Kind::Toy(toy::ToyBackend::new(model, &cfg, None)?),
            cfg,
            total_requests: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    pub fn is_in_process(&self) -> bool {
        matches!(self.kind, Kind::Toy(_))
    }

    pub fn identity(&self) -> BackendIdentity {
        match &self.kind {
            Kind::Toy(t) => t.identity(),
            Kind::Http(h) => h.identity(),
        }
    }

    /// Wire calls made through this client so far.
    pub fn total_requests(&self) -> u64 {
        self.total_requests.load(Ordering::Relaxed)
    }

    fn record(&self, counter: &AtomicU64) {
        self.total_requests
            .fetch_add(counter.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    fn sample_one(
        &self,
        item: &ItemRecord,
        index: usize,
        calls: &AtomicU64,
    ) -> Result<GenerationSample> {
        match &self.kind {
            Kind::Toy(t) => t.sample(item, index, &self.cfg, calls),
            Kind::Http(h) => h.sample(item, index, &self.cfg, calls),
        }
    }

    fn greedy_one(&self, item: &ItemRecord, calls: &AtomicU64) -> Result<GenerationSample> {
        match &self.kind {
            Kind::Toy(t) => t.greedy(item, &self.cfg, calls),
            Kind::Http(h) => h.greedy(item, &self.cfg, calls),
        }
    }

    fn reference_one(
        &self,
        item: &ItemRecord,
        calls: &AtomicU64,
    ) -> Result<Option<Vec<TokenEvidence>>> {
        match &self.kind {
            Kind::Toy(t) => t.score_reference(item, calls),
            Kind::Http(h) => h.score_reference(item, &self.cfg, calls),
        }
    }

    fn embed(&self, texts: &[&str], calls: &AtomicU64) -> Result<Option<Vec<Vec<f64>>>> {
        let out = match &self.kind {
            Kind::Toy(t) => t.embed(texts, calls),
            Kind::Http(h) => h.embed(texts, &self.cfg, calls)?,
        };
        if let Some(vs) = &out {
            check_embeddings(vs, texts.len())?;
        }
        Ok(out)
    }

    /// `num_samples` temperature samples for `item`, indexed from 0.
    pub fn sample_generations(&self, item: &ItemRecord) -> Result<Vec<GenerationSample>> {
        precondition(item)?;
        let calls = AtomicU64::new(0);
        let results = bounded_map(
            self.cfg.num_samples,
            self.workers(),
            |j| self.sample_one(item, j, &calls),
            |r| r.as_ref().is_err_and(is_fatal),
        );
        self.record(&calls);
        results
            .into_iter()
            .map(|r| r.unwrap_or_else(|| Err(Error::Config("sampling aborted".into()))))
            .collect()
    }

    pub fn greedy_generation(&self, item: &ItemRecord) -> Result<GenerationSample> {
        precondition(item)?;
        let calls = AtomicU64::new(0);
        let out = self.greedy_one(item, &calls);
        self.record(&calls);
        out
    }

    /// Teacher-forced log-probs of the reference answer. `Ok(None)` when the
    /// backend cannot score supplied text.
    pub fn score_reference(&self, item: &ItemRecord) -> Result<Option<Vec<TokenEvidence>>> {
        precondition(item)?;
        let calls = AtomicU64::new(0);
        let out = self.reference_one(item, &calls);
        self.record(&calls);
        out
    }

    /// Embeddings of two texts. `Ok(None)` when the backend has no
    /// embeddings endpoint.
    pub fn fetch_embeddings(&self, texts: [&str; 2]) -> Result<Option<[Vec<f64>; 2]>> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(BackendError::new(
                BackendErrorKind::Precondition,
                "cannot embed empty text",
            )
            .into());
        }
        let calls = AtomicU64::new(0);
        let out = self.embed(&texts, &calls);
        self.record(&calls);
        Ok(out?.map(|mut v| {
            let b = v.pop().expect("two vectors");
            let a = v.pop().expect("two vectors");
            [a, b]
        }))
    }

    /// All evidence for one item.
    pub fn collect_trace(&self, item: &ItemRecord) -> Result<SamplingOutcome> {
        let mut report = self.collect_all(std::slice::from_ref(item), Execution::Sequential)?;
        match (report.outcomes.pop(), report.failures.pop()) {
            (Some(outcome), _) => Ok(outcome),
            (None, Some(failure)) => Err(Error::InvalidTrace {
                item_id: failure.item_id,
                reason: failure.error,
            }),
            (None, None) => unreachable!("one item in, one result out"),
        }
    }

    /// Collect every item. Item-level errors become [`ItemFailure`]s; a fatal
    /// backend error aborts the run and is returned.
    pub fn collect_all(&self, items: &[ItemRecord], exec: Execution) -> Result<CollectReport> {
        let results = match &self.kind {
            Kind::Toy(_) => exec.map(items, |item| {
                let calls = AtomicU64::new(0);
                let r = self.collect_sequential(item, &calls);
                self.record(&calls);
                r.map(|trace| (trace, calls.load(Ordering::Relaxed)))
            }),
            Kind::Http(_) => self.collect_pooled(items)?,
        };
        let mut report = CollectReport::default();
        for (item, result) in items.iter().zip(results) {
            match result {
                Ok((trace, request_count)) => report.outcomes.push(SamplingOutcome {
                    degraded_fields: degraded_fields(&trace),
                    trace,
                    request_count,
                }),
                Err(e) if is_fatal(&e) => return Err(e),
                Err(e) => {
                    log::warn!("item {} failed: {e}", item.item_id);
                    report.failures.push(ItemFailure {
                        item_id: item.item_id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        if report.outcomes.is_empty() {
            if let Some(first) = report.failures.first() {
                return Err(BackendError::new(
                    BackendErrorKind::Transport,
                    format!(
                        "all {} items failed; first: {}",
                        report.failures.len(),
                        first.error
                    ),
                )
                .into());
            }
        }
        Ok(report)
    }

    fn workers(&self) -> usize {
        match self.kind {
            Kind::Toy(_) => 1,
            Kind::Http(_) => self.cfg.max_concurrent_requests,
        }
    }

    fn collect_sequential(&self, item: &ItemRecord, calls: &AtomicU64) -> Result<ItemTrace> {
        precondition(item)?;
        let samples = (0..self.cfg.num_samples)
            .map(|j| self.sample_one(item, j, calls))
            .collect::<Result<Vec<_>>>()?;
        let greedy = self.greedy_one(item, calls)?;
        let reference = self.reference_one(item, calls)?;
        let extras = self.extras(item, &greedy, &samples, reference, calls)?;
        assemble(item, samples, greedy, extras)
    }

    fn extras(
        &self,
        item: &ItemRecord,
        greedy: &GenerationSample,
        samples: &[GenerationSample],
        reference: Option<Vec<TokenEvidence>>,
        calls: &AtomicU64,
    ) -> Result<Extras> {
        let mut extras = Extras {
            reference,
            embeddings: None,
            sample_embeddings: None,
        };
        if !self.cfg.embeddings {
            return Ok(extras);
        }
        let embeddable = |t: &str| self.is_in_process() || !t.is_empty();
        if embeddable(&greedy.text) && embeddable(&item.reference_answer) {
            extras.embeddings = self
                .embed(&[&greedy.text, &item.reference_answer], calls)?
                .map(|mut v| {
                    let b = v.pop().expect("two vectors");
                    [v.pop().expect("two vectors"), b]
                });
        }
        if self.cfg.embed_samples && samples.iter().all(|s| embeddable(&s.text)) {
            let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
            extras.sample_embeddings = self.embed(&texts, calls)?;
        }
        Ok(extras)
    }

    /// Bounded-concurrency collection over HTTP: every sample, greedy and
    /// reference call of every item is one job for a pool of
    /// `max_concurrent_requests` workers; embeddings follow in a second pass
    /// because they need the greedy text.
    fn collect_pooled(&self, items: &[ItemRecord]) -> Result<Vec<Result<(ItemTrace, u64)>>> {
        #[derive(Clone, Copy)]
        enum Job {
            Sample(usize, usize),
            Greedy(usize),
            Reference(usize),
        }
        enum Done {
            Sample(GenerationSample),
            Greedy(GenerationSample),
            Reference(Option<Vec<TokenEvidence>>),
        }

        let n = self.cfg.num_samples;
        let counters: Vec<AtomicU64> = items.iter().map(|_| AtomicU64::new(0)).collect();
        let failed: Vec<AtomicBool> = items.iter().map(|_| AtomicBool::new(false)).collect();
        let mut errors: Vec<Option<Error>> =
            items.iter().map(|item| precondition(item).err()).collect();
        for (flag, e) in failed.iter().zip(&errors) {
            flag.store(e.is_some(), Ordering::Relaxed);
        }

        let mut jobs = Vec::new();
        for (i, _) in items
            .iter()
            .enumerate()
            .filter(|(i, _)| errors[*i].is_none())
        {
            jobs.extend((0..n).map(|j| Job::Sample(i, j)));
            jobs.push(Job::Greedy(i));
            jobs.push(Job::Reference(i));
        }
        let item_of = |job: &Job| match *job {
            Job::Sample(i, _) | Job::Greedy(i) | Job::Reference(i) => i,
        };

        let results = bounded_map(
            jobs.len(),
            self.cfg.max_concurrent_requests,
            |k| {
                let job = jobs[k];
                let i = item_of(&job);
                if failed[i].load(Ordering::Relaxed) {
                    return None;
                }
                let item = &items[i];
                let calls = &counters[i];
                let r = match job {
                    Job::Sample(_, j) => self.sample_one(item, j, calls).map(Done::Sample),
                    Job::Greedy(_) => self.greedy_one(item, calls).map(Done::Greedy),
                    Job::Reference(_) => self.reference_one(item, calls).map(Done::Reference),
                };
                if r.is_err() {
                    failed[i].store(true, Ordering::Relaxed);
                }
                Some(r)
            },
            |r| matches!(r, Some(Err(e)) if is_fatal(e)),
        );

        let mut samples: Vec<Vec<Option<GenerationSample>>> =
            items.iter().map(|_| vec![None; n]).collect();
        let mut greedy: Vec<Option<GenerationSample>> = vec![None; items.len()];
        let mut reference: Vec<Option<Option<Vec<TokenEvidence>>>> = vec![None; items.len()];
        for (job, result) in jobs.iter().zip(results) {
            let i = item_of(job);
            match result.flatten() {
                Some(Ok(Done::Sample(s))) => {
                    if let Job::Sample(_, j) = job {
                        samples[i][*j] = Some(s);
                    }
                }
                Some(Ok(Done::Greedy(s))) => greedy[i] = Some(s),
                Some(Ok(Done::Reference(r))) => reference[i] = Some(r),
                Some(Err(e)) => {
                    if is_fatal(&e) {
                        self.record_all(&counters);
                        return Err(e);
                    }
                    errors[i].get_or_insert(e);
                }
                None => {}
            }
        }

        let pending: Vec<usize> = (0..items.len()).filter(|&i| errors[i].is_none()).collect();
        let extras = bounded_map(
            pending.len(),
            self.cfg.max_concurrent_requests,
            |k| {
                let i = pending[k];
                let g = greedy[i].as_ref().expect("greedy collected");
                let s: Vec<GenerationSample> = samples[i].iter().flatten().cloned().collect();
                let r = reference[i].clone().expect("reference collected");
                self.extras(&items[i], g, &s, r, &counters[i])
            },
            |r| r.as_ref().is_err_and(is_fatal),
        );
        self.record_all(&counters);

        let mut extras_by_item: Vec<Option<Result<Extras>>> =
            (0..items.len()).map(|_| None).collect();
        for (k, e) in extras.into_iter().enumerate() {
            extras_by_item[pending[k]] = e;
        }

        let mut out = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let r = match (errors[i].take(), extras_by_item[i].take()) {
                (Some(e), _) => Err(e),
                (None, None) => Err(Error::Config("collection aborted".into())),
                (None, Some(Err(e))) => Err(e),
                (None, Some(Ok(extras))) => {
                    let s = std::mem::take(&mut samples[i])
                        .into_iter()
                        .flatten()
                        .collect();
                    let g = greedy[i].take().expect("greedy collected");
                    assemble(item, s, g, extras).map(|t| (t, counters[i].load(Ordering::Relaxed)))
                }
            };
            match r {
                Err(e) if is_fatal(&e) => return Err(e),
                r => out.push(r),
            }
        }
        Ok(out)
    }

    fn record_all(&self, counters: &[AtomicU64]) {
        for c in counters {
            self.record(c);
        }
    }
}

fn check_embeddings(vs: &[Vec<f64>], expected: usize) -> Result<()> {
    let bad = |m: String| Err(BackendError::new(BackendErrorKind::Protocol, m).into());
    if vs.len() != expected {
        return bad(format!("expected {expected} embeddings, got {}", vs.len()));
    }
    let dim = vs.first().map_or(0, Vec::len);
    if dim == 0 {
        return bad("backend returned a zero-dimensional embedding".into());
    }
    if vs.iter().any(|v| v.len() != dim) {
        return bad("embedding dimensions differ".into());
    }
    Ok(())
}

fn assemble(
    item: &ItemRecord,
    mut samples: Vec<GenerationSample>,
    greedy: GenerationSample,
    extras: Extras,
) -> Result<ItemTrace> {
    for (j, s) in samples.iter_mut().enumerate() {
        s.sample_index = j;
    }
    let mut trace = ItemTrace::new(item.clone(), samples);
    trace.greedy = Some(greedy);
    trace.reference_scored = extras.reference;
    if let Some([g, r]) = extras.embeddings {
        trace.greedy_embedding = Some(g);
        trace.reference_embedding = Some(r);
    }
    trace.sample_embeddings = extras.sample_embeddings;
    trace.validate()?;
    Ok(trace)
}

/// Run `f(0..n)` on at most `workers` threads, returning results in index
/// order. Once `stop` holds for any result, unstarted jobs are skipped and
/// come back as `None`.
fn bounded_map<R, F, S>(n: usize, workers: usize, f: F, stop: S) -> Vec<Option<R>>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
    S: Fn(&R) -> bool + Sync,
{
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let halt = AtomicBool::new(false);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                if halt.load(Ordering::Relaxed) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= n {
                    break;
                }
                let r = f(k);
                if stop(&r) {
                    halt.store(true, Ordering::Relaxed);
                }
                *slots[k].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock"))
        .collect()
}
