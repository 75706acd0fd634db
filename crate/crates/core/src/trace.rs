//! Items, generation evidence, and their line-delimited file formats.
//!
//! A dataset file holds one [`ItemRecord`] per line. A trace file holds one
//! [`ItemTrace`] per line. Both are UTF-8 JSON objects; reals are written in
//! shortest round-trip form so a trace read back from disk is bit-identical
//! to the one written.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Contaminated,
    Clean,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Contaminated => "contaminated",
            Label::Clean => "clean",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub prompt: String,
    pub reference_answer: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

impl ItemRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.item_id.is_empty() {
            return Err("item_id is empty".into());
        }
        if self.prompt.is_empty() {
            return Err("prompt is empty".into());
        }
        if self.reference_answer.is_empty() {
            return Err("reference_answer is empty".into());
        }
        Ok(())
    }
}

/// One token with its natural-log conditional probability.
///
/// `pos_mu` / `pos_sigma` are the probability-weighted mean and standard
/// deviation of the log-probabilities of the full next-token distribution at
/// this position (the calibration statistics used by Min-K%++).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEvidence {
    pub token_text: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_sigma: Option<f64>,
}

impl TokenEvidence {
    pub fn new(token_text: impl Into<String>, logprob: f64) -> Self {
        TokenEvidence {
            token_text: token_text.into(),
            logprob,
            pos_mu: None,
            pos_sigma: None,
        }
    }

    pub fn with_position_stats(mut self, mu: f64, sigma: f64) -> Self {
        self.pos_mu = Some(mu);
        self.pos_sigma = Some(sigma);
        self
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.logprob.is_finite() || self.logprob > 0.0 {
            return Err(format!(
                "token {:?} has logprob {} (must be finite and <= 0)",
                self.token_text, self.logprob
            ));
        }
        if let Some(mu) = self.pos_mu {
            if !mu.is_finite() {
                return Err(format!("token {:?} has non-finite pos_mu", self.token_text));
            }
        }
        if let Some(sigma) = self.pos_sigma {
            if !sigma.is_finite() || sigma < 0.0 {
                return Err(format!(
                    "token {:?} has pos_sigma {sigma} (must be finite and >= 0)",
                    self.token_text
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Temperature,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub sample_index: usize,
    pub text: String,
    pub decoding: Decoding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tokens: Vec<TokenEvidence>,
    /// `length` when generation was cut by the token budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
}

impl GenerationSample {
    /// Token count `T` used by every length-normalized detector.
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.tokens.iter().map(|t| t.logprob)
    }

    pub fn is_truncated(&self) -> bool {
        self.finish_reason == Some(FinishReason::Length)
    }

    pub fn detokenized(&self) -> String {
        self.tokens.iter().map(|t| t.token_text.as_str()).collect()
    }

    fn validate(&self, mode: WhitespaceMode) -> std::result::Result<(), String> {
        match (self.decoding, self.temperature) {
            (Decoding::Temperature, Some(t)) if t.is_finite() && t > 0.0 => {}
            (Decoding::Temperature, t) => {
                return Err(format!(
                    "sample {} is temperature-decoded with temperature {t:?}",
                    self.sample_index
                ))
            }
            (Decoding::Greedy, None) => {}
            (Decoding::Greedy, Some(_)) => {
                return Err(format!(
                    "greedy sample {} carries a temperature",
                    self.sample_index
                ))
            }
        }
        if self.tokens.is_empty() && !self.text.is_empty() {
            return Err(format!(
                "sample {} has text but no tokens",
                self.sample_index
            ));
        }
        for t in &self.tokens {
            t.validate()?;
        }
        let joined = self.detokenized();
        if !mode.matches(&joined, &self.text) {
            return Err(format!(
                "sample {} tokens do not concatenate to its text",
                self.sample_index
            ));
        }
        Ok(())
    }
}

/// How strictly token texts must reproduce the sample text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhitespaceMode {
    #[default]
    Exact,
    TrimTrailing,
}

impl WhitespaceMode {
    pub fn matches(self, detokenized: &str, text: &str) -> bool {
        match self {
            WhitespaceMode::Exact => detokenized == text,
            WhitespaceMode::TrimTrailing => detokenized.trim_end() == text.trim_end(),
        }
    }
}

/// All generation evidence gathered for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemTrace {
    pub item: ItemRecord,
    pub whitespace: WhitespaceMode,
    pub samples: Vec<GenerationSample>,
    pub greedy: Option<GenerationSample>,
    pub reference_scored: Option<Vec<TokenEvidence>>,
    pub greedy_embedding: Option<Vec<f64>>,
    pub reference_embedding: Option<Vec<f64>>,
    /// Per-sample embeddings, index-aligned with `samples`, for the
    /// pairwise-similarity embedding mode.
    pub sample_embeddings: Option<Vec<Vec<f64>>>,
}

impl ItemTrace {
    pub fn new(item: ItemRecord, samples: Vec<GenerationSample>) -> Self {
        ItemTrace {
            item,
            whitespace: WhitespaceMode::Exact,
            samples,
            greedy: None,
            reference_scored: None,
            greedy_embedding: None,
            reference_embedding: None,
            sample_embeddings: None,
        }
    }

    pub fn item_id(&self) -> &str {
        &self.item.item_id
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|reason| Error::InvalidTrace {
            item_id: self.item.item_id.clone(),
            reason,
        })
    }

    fn check(&self) -> std::result::Result<(), String> {
        self.item.validate()?;

        let n = self.samples.len();
        let mut seen = vec![false; n];
        for s in &self.samples {
            if s.decoding != Decoding::Temperature {
                return Err(format!(
                    "sample {} is not temperature-decoded",
                    s.sample_index
                ));
            }
            match seen.get_mut(s.sample_index) {
                Some(slot) if !*slot => *slot = true,
                Some(_) => return Err(format!("duplicate sample_index {}", s.sample_index)),
                None => {
                    return Err(format!(
                        "sample_index {} out of range for {n} samples",
                        s.sample_index
                    ))
                }
            }
            s.validate(self.whitespace)?;
        }
        if let Some(first) = self.samples.first() {
            let t = first.temperature.map(f64::to_bits);
            if self
                .samples
                .iter()
                .any(|s| s.temperature.map(f64::to_bits) != t)
            {
                return Err("samples use different temperatures".into());
            }
        }

        if let Some(g) = &self.greedy {
            if g.decoding != Decoding::Greedy {
                return Err("greedy sample is not greedy-decoded".into());
            }
            g.validate(self.whitespace)?;
        }
        if let Some(r) = &self.reference_scored {
            for t in r {
                t.validate()?;
            }
        }

        for (name, v) in [
            ("greedy_embedding", &self.greedy_embedding),
            ("reference_embedding", &self.reference_embedding),
        ] {
            if let Some(v) = v {
                check_vector(name, v)?;
            }
        }
        if let (Some(a), Some(b)) = (&self.greedy_embedding, &self.reference_embedding) {
            if a.len() != b.len() {
                return Err(format!(
                    "embedding dimensions differ ({} vs {})",
                    a.len(),
                    b.len()
                ));
            }
        }
        if let Some(es) = &self.sample_embeddings {
            if es.len() != n {
                return Err(format!("{} sample embeddings for {n} samples", es.len()));
            }
            for e in es {
                check_vector("sample_embedding", e)?;
                if e.len() != es[0].len() {
                    return Err("sample embeddings differ in dimension".into());
                }
            }
        }
        Ok(())
    }
}

fn check_vector(name: &str, v: &[f64]) -> std::result::Result<(), String> {
    if v.is_empty() {
        return Err(format!("{name} has dimension 0"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(format!("{name} has non-finite entries"));
    }
    Ok(())
}

/// On-disk shape of one trace line.
#[derive(Serialize, Deserialize)]
struct TraceLine {
    item_id: String,
    prompt: String,
    reference_answer: String,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain_tag: Option<String>,
    #[serde(default, skip_serializing_if = "is_exact")]
    whitespace: WhitespaceMode,
    samples: Vec<GenerationSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    greedy: Option<GenerationSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_scored: Option<Vec<TokenEvidence>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    greedy_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample_embeddings: Option<Vec<Vec<f64>>>,
}

fn is_exact(m: &WhitespaceMode) -> bool {
    *m == WhitespaceMode::Exact
}

impl From<&ItemTrace> for TraceLine {
    fn from(t: &ItemTrace) -> Self {
        TraceLine {
            item_id: t.item.item_id.clone(),
            prompt: t.item.prompt.clone(),
            reference_answer: t.item.reference_answer.clone(),
            label: t.item.label,
            domain_tag: t.item.domain_tag.clone(),
            whitespace: t.whitespace,
            samples: t.samples.clone(),
            greedy: t.greedy.clone(),
            reference_scored: t.reference_scored.clone(),
            greedy_embedding: t.greedy_embedding.clone(),
            reference_embedding: t.reference_embedding.clone(),
            sample_embeddings: t.sample_embeddings.clone(),
        }
    }
}

impl From<TraceLine> for ItemTrace {
    fn from(l: TraceLine) -> Self {
        ItemTrace {
            item: ItemRecord {
                item_id: l.item_id,
                prompt: l.prompt,
                reference_answer: l.reference_answer,
                label: l.label,
                domain_tag: l.domain_tag,
            },
            whitespace: l.whitespace,
            samples: l.samples,
            greedy: l.greedy,
            reference_scored: l.reference_scored,
            greedy_embedding: l.greedy_embedding,
            reference_embedding: l.reference_embedding,
            sample_embeddings: l.sample_embeddings,
        }
    }
}

/// Serialize one trace as a single line (without the trailing newline).
/// Validation runs first; nothing is produced for an invalid trace.
pub fn trace_to_line(trace: &ItemTrace) -> Result<String> {
    trace.validate()?;
    serde_json::to_string(&TraceLine::from(trace)).map_err(|e| Error::InvalidTrace {
        item_id: trace.item.item_id.clone(),
        reason: e.to_string(),
    })
}

pub fn write_trace<W: Write>(trace: &ItemTrace, sink: &mut W) -> Result<()> {
    let mut line = trace_to_line(trace)?;
    line.push('\n');
    sink.write_all(line.as_bytes())
        .map_err(|e| Error::io("<trace sink>", e))
}

pub fn write_traces<W: Write>(traces: &[ItemTrace], sink: &mut W) -> Result<()> {
    traces.iter().try_for_each(|t| write_trace(t, sink))
}

/// Read the first trace from `source`.
pub fn read_trace<R: BufRead>(source: R) -> Result<ItemTrace> {
    TraceReader::new(source)
        .next()
        .unwrap_or(Err(Error::TraceFormat {
            offset: 0,
            line: 1,
            message: "no trace found".into(),
        }))
}

pub fn read_traces<R: BufRead>(source: R) -> Result<Vec<ItemTrace>> {
    TraceReader::new(source).collect()
}

pub fn load_traces(path: &Path) -> Result<Vec<ItemTrace>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_traces(std::io::BufReader::new(f))
}

/// Streaming reader over a trace file, tracking byte offsets for error reports.
pub struct TraceReader<R> {
    source: R,
    offset: usize,
    line: usize,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(source: R) -> Self {
        TraceReader {
            source,
            offset: 0,
            line: 0,
            buf: String::new(),
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<ItemTrace>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            let start = self.offset;
            self.line += 1;
            let read = match self.source.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(n) => n,
                Err(e) => {
                    return Some(Err(Error::TraceFormat {
                        offset: start,
                        line: self.line,
                        message: e.to_string(),
                    }))
                }
            };
            self.offset += read;
            if self.buf.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<TraceLine>(self.buf.trim_end_matches(['\n', '\r']))
                .map_err(|e| Error::TraceFormat {
                    offset: start + e.column().saturating_sub(1),
                    line: self.line,
                    message: e.to_string(),
                })
                .map(ItemTrace::from)
                .and_then(|t| t.validate().map(|_| t));
            return Some(parsed);
        }
    }
}

pub fn parse_dataset(path: &Path) -> Result<Vec<ItemRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(f))
}

/// Parse a dataset from any line source. Blank lines are skipped.
pub fn read_dataset<R: BufRead>(source: R) -> Result<Vec<ItemRecord>> {
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ItemRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        item.validate().map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        if !ids.insert(item.item_id.clone()) {
            return Err(Error::DuplicateItem(item.item_id));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(items)
}

pub fn dataset_to_string(items: &[ItemRecord]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("item serializes"));
        out.push('\n');
    }
    out
}
