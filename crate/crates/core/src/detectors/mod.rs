//! The variance-of-synthetic-difficulty detector and seven baselines.
//!
//! Every detector is a pure function from an [`ItemTrace`] to either a
//! [`DetectorScore`] or an [`Unavailable`] record. Missing evidence is never
//! scored as zero; it is reported so evaluation can exclude and count it.
//!
//! Sums always run in a canonical order (token position, then sample index)
//! so values are bit-identical under any permutation of the stored samples.

mod levenshtein;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::trace::{GenerationSample, ItemTrace, Label, TokenEvidence};

pub use levenshtein::levenshtein;

/// Minimum `pos_sigma` for which Min-K%++ calibration is applied.
pub const DEGENERATE_SIGMA: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorId {
    Dvd,
    Perplexity,
    Loss,
    Zlib,
    MinK,
    MinKPp,
    Cdd,
    EmbeddingSim,
}

impl DetectorId {
    pub const ALL: [DetectorId; 8] = [
        DetectorId::Dvd,
        DetectorId::Perplexity,
        DetectorId::Loss,
        DetectorId::Zlib,
        DetectorId::MinK,
        DetectorId::MinKPp,
        DetectorId::Cdd,
        DetectorId::EmbeddingSim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorId::Dvd => "dvd",
            DetectorId::Perplexity => "perplexity",
            DetectorId::Loss => "loss",
            DetectorId::Zlib => "zlib",
            DetectorId::MinK => "min_k",
            DetectorId::MinKPp => "min_k_pp",
            DetectorId::Cdd => "cdd",
            DetectorId::EmbeddingSim => "embedding_sim",
        }
    }

    /// Fixed direction in which this detector's value signals contamination.
    pub fn orientation(self) -> Orientation {
        match self {
            DetectorId::Dvd | DetectorId::Cdd | DetectorId::EmbeddingSim => {
                Orientation::HigherMeansContaminated
            }
            DetectorId::Perplexity
            | DetectorId::Loss
            | DetectorId::Zlib
            | DetectorId::MinK
            | DetectorId::MinKPp => Orientation::LowerMeansContaminated,
        }
    }
}

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorId::ALL
            .into_iter()
            .find(|d| d.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown detector {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherMeansContaminated,
    LowerMeansContaminated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub detector: DetectorId,
    pub item_id: String,
    pub value: f64,
    pub orientation: Orientation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnavailableReason {
    InsufficientSamples { usable: usize, required: usize },
    NoReferenceScoring,
    EmptyReference,
    NoPositionStats,
    NoGreedy,
    NoEmbeddings,
    ZeroNorm,
    DimensionMismatch,
}

impl fmt::Display for UnavailableReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnavailableReason::InsufficientSamples { usable, required } => {
                write!(
                    f,
                    "insufficient samples ({usable} usable, {required} required)"
                )
            }
            UnavailableReason::NoReferenceScoring => f.write_str("no reference scoring"),
            UnavailableReason::EmptyReference => f.write_str("empty reference"),
            UnavailableReason::NoPositionStats => f.write_str("no position statistics"),
            UnavailableReason::NoGreedy => f.write_str("no greedy sample"),
            UnavailableReason::NoEmbeddings => f.write_str("no embeddings"),
            UnavailableReason::ZeroNorm => f.write_str("zero-norm"),
            UnavailableReason::DimensionMismatch => f.write_str("embedding dimension mismatch"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unavailable {
    pub detector: DetectorId,
    pub item_id: String,
    pub reason: UnavailableReason,
}

pub type Outcome = std::result::Result<DetectorScore, Unavailable>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DvdConfig {
    /// Number of least-probable tokens summed per sample.
    pub min_tokens_m: usize,
    /// Minimum usable samples for the variance (and for CDD).
    pub require_samples: usize,
}

impl Default for DvdConfig {
    fn default() -> Self {
        DvdConfig {
            min_tokens_m: 20,
            require_samples: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Cosine between the greedy output and the reference answer.
    #[default]
    GreedyReference,
    /// Mean pairwise cosine among the temperature samples.
    PairwiseSamples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub dvd: DvdConfig,
    pub k_percent: f64,
    pub cdd_alpha: f64,
    pub embedding_mode: EmbeddingMode,
    pub detectors: Vec<DetectorId>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            dvd: DvdConfig::default(),
            k_percent: 20.0,
            cdd_alpha: 0.05,
            embedding_mode: EmbeddingMode::default(),
            detectors: DetectorId::ALL.to_vec(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dvd.min_tokens_m == 0 {
            return Err(Error::Config("min_tokens_m must be >= 1".into()));
        }
        if self.dvd.require_samples < 2 {
            return Err(Error::Config("require_samples must be >= 2".into()));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::Config(format!(
                "k_percent {} outside (0, 100]",
                self.k_percent
            )));
        }
        if !(self.cdd_alpha > 0.0 && self.cdd_alpha <= 1.0) {
            return Err(Error::Config(format!(
                "cdd_alpha {} outside (0, 1]",
                self.cdd_alpha
            )));
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("no detectors selected".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDifficulty {
    pub sample_index: usize,
    /// Nats per token; never positive.
    pub value: f64,
    pub tokens_used: usize,
    pub sequence_length: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegenerateSample {
    pub sample_index: usize,
}

impl fmt::Display for DegenerateSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "degenerate sample {} (no tokens)", self.sample_index)
    }
}

/// Positions of the `count` smallest log-probabilities, ties broken by the
/// earlier position, returned in position order.
fn smallest_positions(logprobs: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logprobs.len()).collect();
    order.sort_by(|&a, &b| logprobs[a].total_cmp(&logprobs[b]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

fn sum_at(values: &[f64], positions: &[usize]) -> f64 {
    positions.iter().map(|&i| values[i]).sum()
}

/// Sum of the `m` least likely token log-probabilities divided by the
/// sample's token count `T` (all tokens when `T < m`).
pub fn synthetic_difficulty(
    sample: &GenerationSample,
    cfg: &DvdConfig,
) -> std::result::Result<SyntheticDifficulty, DegenerateSample> {
    let t = sample.token_count();
    if t == 0 {
        return Err(DegenerateSample {
            sample_index: sample.sample_index,
        });
    }
    let logprobs: Vec<f64> = sample.logprobs().collect();
    let used = cfg.min_tokens_m.min(t);
    let picked = smallest_positions(&logprobs, used);
    Ok(SyntheticDifficulty {
        sample_index: sample.sample_index,
        value: sum_at(&logprobs, &picked) / t as f64,
        tokens_used: used,
        sequence_length: t,
    })
}

/// Synthetic difficulty of every usable sample, ordered by sample index.
pub fn synthetic_difficulties(trace: &ItemTrace, cfg: &DvdConfig) -> Vec<SyntheticDifficulty> {
    let mut ds: Vec<SyntheticDifficulty> = trace
        .samples
        .iter()
        .filter_map(|s| synthetic_difficulty(s, cfg).ok())
        .collect();
    ds.sort_by_key(|d| d.sample_index);
    ds
}

/// Population variance (divisor `N`).
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

fn score(detector: DetectorId, trace: &ItemTrace, value: f64) -> Outcome {
    Ok(DetectorScore {
        detector,
        item_id: trace.item.item_id.clone(),
        value,
        orientation: detector.orientation(),
    })
}

fn unavailable(detector: DetectorId, trace: &ItemTrace, reason: UnavailableReason) -> Outcome {
    Err(Unavailable {
        detector,
        item_id: trace.item.item_id.clone(),
        reason,
    })
}

pub fn dvd_score(trace: &ItemTrace, cfg: &DvdConfig) -> Outcome {
    let ds: Vec<f64> = synthetic_difficulties(trace, cfg)
        .iter()
        .map(|d| d.value)
        .collect();
    if ds.len() < cfg.require_samples {
        return unavailable(
            DetectorId::Dvd,
            trace,
            UnavailableReason::InsufficientSamples {
                usable: ds.len(),
                required: cfg.require_samples,
            },
        );
    }
    score(DetectorId::Dvd, trace, population_variance(&ds))
}

fn reference_tokens(
    detector: DetectorId,
    trace: &ItemTrace,
) -> std::result::Result<&[TokenEvidence], Unavailable> {
    let reason = match &trace.reference_scored {
        None => UnavailableReason::NoReferenceScoring,
        Some(r) if r.is_empty() => UnavailableReason::EmptyReference,
        Some(r) => return Ok(r),
    };
    Err(Unavailable {
        detector,
        item_id: trace.item.item_id.clone(),
        reason,
    })
}

fn mean_nll(tokens: &[TokenEvidence]) -> f64 {
    let total: f64 = tokens.iter().map(|t| -t.logprob).sum();
    total / tokens.len() as f64
}

pub fn loss_score(trace: &ItemTrace) -> Outcome {
    let tokens = reference_tokens(DetectorId::Loss, trace)?;
    score(DetectorId::Loss, trace, mean_nll(tokens))
}

pub fn perplexity_score(trace: &ItemTrace) -> Outcome {
    let tokens = reference_tokens(DetectorId::Perplexity, trace)?;
    score(DetectorId::Perplexity, trace, mean_nll(tokens).exp())
}

/// Byte length of the zlib stream (default level) for `text`.
pub fn zlib_compressed_len(text: &str) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text.as_bytes()).expect("in-memory write");
    enc.finish().expect("in-memory finish").len()
}

pub fn zlib_score(trace: &ItemTrace) -> Outcome {
    if trace.item.reference_answer.is_empty() {
        return unavailable(DetectorId::Zlib, trace, UnavailableReason::EmptyReference);
    }
    let tokens = reference_tokens(DetectorId::Zlib, trace)?;
    let nll: f64 = tokens.iter().map(|t| -t.logprob).sum();
    let compressed = zlib_compressed_len(&trace.item.reference_answer);
    score(DetectorId::Zlib, trace, nll / compressed as f64)
}

/// `⌈k% · T⌉`, at least one token and at most `T`.
pub fn k_percent_count(k_percent: f64, t: usize) -> usize {
    let raw = (k_percent * t as f64) / 100.0;
    // absorb representation error such as 20% of 5 landing a hair above 1
    let c = (raw - 1e-9).ceil();
    (c.max(1.0) as usize).min(t.max(1))
}

fn mean_lowest_k(values: &[f64], k_percent: f64) -> f64 {
    let count = k_percent_count(k_percent, values.len());
    let picked = smallest_positions(values, count);
    sum_at(values, &picked) / count as f64
}

pub fn min_k_score(trace: &ItemTrace, k_percent: f64) -> Outcome {
    let tokens = reference_tokens(DetectorId::MinK, trace)?;
    let lps: Vec<f64> = tokens.iter().map(|t| t.logprob).collect();
    score(DetectorId::MinK, trace, mean_lowest_k(&lps, k_percent))
}

/// `(logprob - pos_mu) / pos_sigma`, or 0 at a degenerate position.
pub fn calibrated_logprob(t: &TokenEvidence) -> Option<f64> {
    let (mu, sigma) = (t.pos_mu?, t.pos_sigma?);
    Some(if sigma < DEGENERATE_SIGMA {
        0.0
    } else {
        (t.logprob - mu) / sigma
    })
}

pub fn min_k_pp_score(trace: &ItemTrace, k_percent: f64) -> Outcome {
    let tokens = reference_tokens(DetectorId::MinKPp, trace)?;
    let Some(calibrated) = tokens
        .iter()
        .map(calibrated_logprob)
        .collect::<Option<Vec<f64>>>()
    else {
        return unavailable(
            DetectorId::MinKPp,
            trace,
            UnavailableReason::NoPositionStats,
        );
    };
    score(
        DetectorId::MinKPp,
        trace,
        mean_lowest_k(&calibrated, k_percent),
    )
}

/// Fraction of temperature samples whose token sequence lies within
/// `alpha · max(1, |greedy|)` edits of the greedy output.
pub fn cdd_score(trace: &ItemTrace, alpha: f64, cfg: &DvdConfig) -> Outcome {
    let Some(greedy) = &trace.greedy else {
        return unavailable(DetectorId::Cdd, trace, UnavailableReason::NoGreedy);
    };
    let n = trace.samples.len();
    if n < cfg.require_samples {
        return unavailable(
            DetectorId::Cdd,
            trace,
            UnavailableReason::InsufficientSamples {
                usable: n,
                required: cfg.require_samples,
            },
        );
    }
    let g: Vec<&str> = greedy
        .tokens
        .iter()
        .map(|t| t.token_text.as_str())
        .collect();
    let radius = alpha * g.len().max(1) as f64;
    let within = trace
        .samples
        .iter()
        .filter(|s| {
            let toks: Vec<&str> = s.tokens.iter().map(|t| t.token_text.as_str()).collect();
            levenshtein(&g, &toks) as f64 <= radius
        })
        .count();
    score(DetectorId::Cdd, trace, within as f64 / n as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na * nb))
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

pub fn embedding_sim_score(trace: &ItemTrace, mode: EmbeddingMode) -> Outcome {
    let id = DetectorId::EmbeddingSim;
    match mode {
        EmbeddingMode::GreedyReference => {
            let (Some(a), Some(b)) = (&trace.greedy_embedding, &trace.reference_embedding) else {
                return unavailable(id, trace, UnavailableReason::NoEmbeddings);
            };
            if a.len() != b.len() {
                return unavailable(id, trace, UnavailableReason::DimensionMismatch);
            }
            if is_zero(a) || is_zero(b) {
                return unavailable(id, trace, UnavailableReason::ZeroNorm);
            }
            score(
                id,
                trace,
                cosine_similarity(a, b).expect("checked dims and norms"),
            )
        }
        EmbeddingMode::PairwiseSamples => {
            let Some(es) = &trace.sample_embeddings else {
                return unavailable(id, trace, UnavailableReason::NoEmbeddings);
            };
            if es.len() < 2 {
                return unavailable(
                    id,
                    trace,
                    UnavailableReason::InsufficientSamples {
                        usable: es.len(),
                        required: 2,
                    },
                );
            }
            let mut order: Vec<usize> = (0..es.len()).collect();
            order.sort_by_key(|&i| trace.samples.get(i).map_or(i, |s| s.sample_index));
            let mut total = 0.0;
            let mut pairs = 0usize;
            for (x, &i) in order.iter().enumerate() {
                for &j in &order[x + 1..] {
                    match cosine_similarity(&es[i], &es[j]) {
                        Some(c) => total += c,
                        None if es[i].len() != es[j].len() => {
                            return unavailable(id, trace, UnavailableReason::DimensionMismatch)
                        }
                        None => return unavailable(id, trace, UnavailableReason::ZeroNorm),
                    }
                    pairs += 1;
                }
            }
            score(id, trace, total / pairs as f64)
        }
    }
}

pub fn run_detector(trace: &ItemTrace, detector: DetectorId, cfg: &DetectorConfig) -> Outcome {
    match detector {
        DetectorId::Dvd => dvd_score(trace, &cfg.dvd),
        DetectorId::Perplexity => perplexity_score(trace),
        DetectorId::Loss => loss_score(trace),
        DetectorId::Zlib => zlib_score(trace),
        DetectorId::MinK => min_k_score(trace, cfg.k_percent),
        DetectorId::MinKPp => min_k_pp_score(trace, cfg.k_percent),
        DetectorId::Cdd => cdd_score(trace, cfg.cdd_alpha, &cfg.dvd),
        DetectorId::EmbeddingSim => embedding_sim_score(trace, cfg.embedding_mode),
    }
}

/// One outcome per selected detector, in `cfg.detectors` order.
pub fn run_all_detectors(trace: &ItemTrace, cfg: &DetectorConfig) -> Vec<Outcome> {
    cfg.detectors
        .iter()
        .map(|&d| run_detector(trace, d, cfg))
        .collect()
}

/// Score many traces; output is item-major in input order.
pub fn score_traces(traces: &[ItemTrace], cfg: &DetectorConfig, exec: Execution) -> Vec<Outcome> {
    exec.map(traces, |t| run_all_detectors(t, cfg))
        .into_iter()
        .flatten()
        .collect()
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub item_id: String,
    pub detector: DetectorId,
    pub value: Option<f64>,
    pub orientation: Orientation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unavailable_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl ScoreRecord {
    pub fn from_outcome(outcome: &Outcome, label: Option<Label>) -> Self {
        match outcome {
            Ok(s) => ScoreRecord {
                item_id: s.item_id.clone(),
                detector: s.detector,
                value: Some(s.value),
                orientation: s.orientation,
                unavailable_reason: None,
                label,
            },
            Err(u) => ScoreRecord {
                item_id: u.item_id.clone(),
                detector: u.detector,
                value: None,
                orientation: u.detector.orientation(),
                unavailable_reason: Some(u.reason.to_string()),
                label,
            },
        }
    }
}

pub fn records_to_string(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("score record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_score_records<R: BufRead>(source: R) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.value.is_none() == rec.unavailable_reason.is_none() {
            return Err(Error::Parse {
                line: i + 1,
                message: "exactly one of value and unavailable_reason must be set".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
