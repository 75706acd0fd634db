//! A seedable two-state toy language model.
//!
//! Each temperature sample draws a latent state once. In the memory state the
//! next-token distribution puts `lambda_hi` on the item's memorized template
//! token and spreads the rest over the tempered base unigram; in the drift
//! state it is the tempered base unigram alone. Items without a template are
//! always in the drift state.
//!
//! Teacher-forced scoring uses the state-marginal per step,
//! `pi_m * P_M + (1 - pi_m) * P_U`, so a single forced pass cannot see which
//! state a trajectory was in.

mod world;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Decoding, FinishReason, GenerationSample, TokenEvidence};

pub use world::{ToyWorld, ToyWorldConfig};

fn default_answer_length() -> usize {
    32
}

/// Declarative description of a toy model, loadable from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub vocabulary: Vec<String>,
    pub base_unigram: Vec<f64>,
    /// Memorized answers, keyed by item id. Only contaminated items have one.
    pub templates: BTreeMap<String, Vec<String>>,
    pub pi_m: f64,
    pub lambda_hi: f64,
    pub temperature: f64,
    /// Generation length for items without a template.
    #[serde(default = "default_answer_length")]
    pub answer_length: usize,
    /// Per-item generation lengths. An item listed here may have a template
    /// shorter than its length; past the template end both states draw from
    /// the drift distribution.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub answer_lengths: BTreeMap<String, usize>,
}

impl ToyModelSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Toy(format!("{}: {e}", path.display())))
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("toy spec serializes");
        s.push('\n');
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentState {
    Memory,
    Drift,
}

/// A validated toy model with precomputed drift distribution.
#[derive(Clone, Debug)]
pub struct ToyModel {
    spec: ToyModelSpec,
    index: HashMap<String, usize>,
    templates: HashMap<String, Vec<usize>>,
    drift: Vec<f64>,
    drift_stats: (f64, f64),
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        let v = spec.vocabulary.len();
        if v < 8 {
            return Err(Error::Toy(format!(
                "vocabulary has {v} tokens, need at least 8"
            )));
        }
        let mut index = HashMap::with_capacity(v);
        for (i, tok) in spec.vocabulary.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Toy(format!(
                    "vocabulary token {tok:?} is empty or has whitespace"
                )));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Toy(format!("vocabulary token {tok:?} is repeated")));
            }
        }
        if spec.base_unigram.len() != v {
            return Err(Error::Toy(format!(
                "base_unigram has {} entries for {v} tokens",
                spec.base_unigram.len()
            )));
        }
        if spec.base_unigram.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Toy(
                "base_unigram entries must be finite and >= 0".into(),
            ));
        }
        let total: f64 = spec.base_unigram.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Toy(format!("base_unigram sums to {total}, not 1")));
        }
        if !(0.0..=1.0).contains(&spec.pi_m) {
            return Err(Error::Toy(format!("pi_m {} outside [0, 1]", spec.pi_m)));
        }
        if !(spec.lambda_hi > 1.0 / v as f64 && spec.lambda_hi < 1.0) {
            return Err(Error::Toy(format!(
                "lambda_hi {} outside (1/V, 1) for V = {v}",
                spec.lambda_hi
            )));
        }
        if !(spec.temperature.is_finite() && spec.temperature > 0.0) {
            return Err(Error::Toy(format!(
                "temperature {} must be > 0",
                spec.temperature
            )));
        }
        if spec.answer_length == 0 {
            return Err(Error::Toy("answer_length must be >= 1".into()));
        }

        let mut templates = HashMap::with_capacity(spec.templates.len());
        for (item_id, toks) in &spec.templates {
            if toks.is_empty() {
                return Err(Error::Toy(format!("template for {item_id:?} is empty")));
            }
            let ids = toks
                .iter()
                .map(|t| {
                    let &i = index.get(t).ok_or_else(|| Error::UnknownToken(t.clone()))?;
                    if spec.base_unigram[i] <= 0.0 {
                        return Err(Error::Toy(format!(
                            "template token {t:?} has zero base probability"
                        )));
                    }
                    Ok(i)
                })
                .collect::<Result<Vec<_>>>()?;
            templates.insert(item_id.clone(), ids);
        }
        for (item_id, &len) in &spec.answer_lengths {
            let t = templates.get(item_id).map_or(0, Vec::len);
            if len == 0 || len < t {
                return Err(Error::Toy(format!(
                    "answer length {len} for {item_id:?} is zero or shorter than its template ({t})"
                )));
            }
        }

        let drift = temper(&spec.base_unigram, spec.temperature);
        let drift_stats = log_stats(&drift);
        Ok(ToyModel {
            spec,
            index,
            templates,
            drift,
            drift_stats,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        ToyModel::new(ToyModelSpec::from_file(path)?)
    }

    /// The same model sampled at a different temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        let mut spec = self.spec.clone();
        spec.temperature = temperature;
        ToyModel::new(spec)
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocabulary.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.spec.vocabulary[id]
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn template(&self, item_id: &str) -> Option<&[usize]> {
        self.templates.get(item_id).map(Vec::as_slice)
    }

    /// Template rendered the way generated text is rendered.
    pub fn template_text(&self, item_id: &str) -> Option<String> {
        self.template(item_id).map(|t| self.render(t))
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| token_text(self.token(id), pos))
            .collect()
    }

    /// Tempered base unigram `p^(1/T)`, renormalized.
    pub fn drift_distribution(&self) -> &[f64] {
        &self.drift
    }

    /// Memory-state distribution when the template's next token is `target`.
    pub fn memory_distribution(&self, target: usize) -> Vec<f64> {
        let lambda = self.spec.lambda_hi;
        let mut p: Vec<f64> = self.drift.iter().map(|q| (1.0 - lambda) * q).collect();
        p[target] += lambda;
        p
    }

    /// Tokens generated for `item_id` when `max_tokens` does not bind.
    pub fn generation_length(&self, item_id: &str) -> usize {
        if let Some(&len) = self.spec.answer_lengths.get(item_id) {
            return len;
        }
        self.template(item_id)
            .map_or(self.spec.answer_length, <[usize]>::len)
    }

    pub fn generate(
        &self,
        item_id: &str,
        decoding: Decoding,
        seed: u64,
        max_tokens: usize,
    ) -> Result<GenerationSample> {
        self.generate_with_state(item_id, decoding, seed, max_tokens)
            .map(|(s, _)| s)
    }

    /// Generate one sample and also report which latent state produced it.
    pub fn generate_with_state(
        &self,
        item_id: &str,
        decoding: Decoding,
        seed: u64,
        max_tokens: usize,
    ) -> Result<(GenerationSample, LatentState)> {
        if max_tokens == 0 {
            return Err(Error::Toy("max_tokens must be >= 1".into()));
        }
        let template = self.template(item_id);
        let full_len = self.generation_length(item_id);
        let len = full_len.min(max_tokens);

        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(item_id, seed));
        // drawn for every item so clean and contaminated streams stay aligned
        let u: f64 = rng.random();
        let state = match (decoding, template) {
            (Decoding::Greedy, Some(_)) => LatentState::Memory,
            (Decoding::Greedy, None) => LatentState::Drift,
            (Decoding::Temperature, Some(_)) if u < self.spec.pi_m => LatentState::Memory,
            (Decoding::Temperature, _) => LatentState::Drift,
        };

        let mut tokens = Vec::with_capacity(len);
        for pos in 0..len {
            let owned;
            let (dist, stats) = match (state, template.and_then(|t| t.get(pos))) {
                (LatentState::Memory, Some(&target)) => {
                    owned = self.memory_distribution(target);
                    let s = log_stats(&owned);
                    (owned.as_slice(), s)
                }
                _ => (self.drift.as_slice(), self.drift_stats),
            };
            let id = match decoding {
                Decoding::Greedy => argmax(dist),
                Decoding::Temperature => draw(dist, rng.random()),
            };
            tokens.push(
                TokenEvidence::new(token_text(self.token(id), pos), dist[id].ln())
                    .with_position_stats(stats.0, stats.1),
            );
        }

        let text = tokens.iter().map(|t| t.token_text.as_str()).collect();
        let sample = GenerationSample {
            sample_index: 0,
            text,
            decoding,
            temperature: match decoding {
                Decoding::Temperature => Some(self.spec.temperature),
                Decoding::Greedy => None,
            },
            seed: match decoding {
                Decoding::Temperature => Some(seed),
                Decoding::Greedy => None,
            },
            tokens,
            finish_reason: Some(if len < full_len {
                FinishReason::Length
            } else {
                FinishReason::Stop
            }),
        };
        Ok((sample, state))
    }

    /// Split reference text into vocabulary ids, failing on the first unknown token.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.token_id(t)
                    .ok_or_else(|| Error::UnknownToken(t.to_string()))
            })
            .collect()
    }

    /// Per-step teacher-forced distribution for `item_id` at position `pos`.
    pub fn marginal_distribution(&self, item_id: &str, pos: usize) -> Vec<f64> {
        match self.template(item_id).and_then(|t| t.get(pos)) {
            Some(&target) => {
                let pi = self.spec.pi_m;
                self.memory_distribution(target)
                    .iter()
                    .zip(&self.drift)
                    .map(|(m, u)| pi * m + (1.0 - pi) * u)
                    .collect()
            }
            None => self.drift.clone(),
        }
    }

    /// Teacher-forced scoring of a reference continuation.
    pub fn score_reference<S: AsRef<str>>(
        &self,
        item_id: &str,
        reference: &[S],
    ) -> Result<Vec<TokenEvidence>> {
        reference
            .iter()
            .enumerate()
            .map(|(pos, tok)| {
                let tok = tok.as_ref();
                let id = self
                    .token_id(tok)
                    .ok_or_else(|| Error::UnknownToken(tok.to_string()))?;
                let dist = self.marginal_distribution(item_id, pos);
                let (mu, sigma) = log_stats(&dist);
                Ok(TokenEvidence::new(token_text(tok, pos), dist[id].ln())
                    .with_position_stats(mu, sigma))
            })
            .collect()
    }

    /// Log-likelihood of a whole reference under the teacher-forced model,
    /// computed as the log of the product of step probabilities.
    pub fn sequence_log_likelihood<S: AsRef<str>>(
        &self,
        item_id: &str,
        reference: &[S],
    ) -> Result<f64> {
        let mut prob = 1.0f64;
        let mut scale = 0.0f64;
        for (pos, tok) in reference.iter().enumerate() {
            let id = self
                .token_id(tok.as_ref())
                .ok_or_else(|| Error::UnknownToken(tok.as_ref().to_string()))?;
            prob *= self.marginal_distribution(item_id, pos)[id];
            if prob < 1e-200 {
                scale += prob.ln();
                prob = 1.0;
            }
        }
        Ok(scale + prob.ln())
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        toy_embed(&self.spec.vocabulary, text)
    }
}

/// Bag-of-tokens count vector over `vocabulary`. Unknown tokens are ignored.
pub fn toy_embed<S: AsRef<str>>(vocabulary: &[S], text: &str) -> Vec<f64> {
    let mut v = vec![0.0; vocabulary.len()];
    for tok in text.split_whitespace() {
        if let Some(i) = vocabulary.iter().position(|w| w.as_ref() == tok) {
            v[i] += 1.0;
        }
    }
    v
}

pub fn is_zero_norm(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0)
}

fn token_text(tok: &str, pos: usize) -> String {
    if pos == 0 {
        tok.to_string()
    } else {
        format!(" {tok}")
    }
}

/// `p^(1/t)` renormalized; zero entries stay zero.
fn temper(p: &[f64], t: f64) -> Vec<f64> {
    let logs: Vec<f64> = p
        .iter()
        .map(|&x| {
            if x > 0.0 {
                x.ln() / t
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Probability-weighted mean and standard deviation of `ln p` over the support.
pub fn log_stats(p: &[f64]) -> (f64, f64) {
    let mass: f64 = p.iter().filter(|x| **x > 0.0).sum();
    let mu = p
        .iter()
        .filter(|x| **x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
        / mass;
    let var = p
        .iter()
        .filter(|x| **x > 0.0)
        .map(|&x| x * (x.ln() - mu).powi(2))
        .sum::<f64>()
        / mass;
    (mu, var.max(0.0).sqrt())
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn draw(p: &[f64], u: f64) -> usize {
    let total: f64 = p.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x <= 0.0 {
            continue;
        }
        acc += x;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// Stable per-(item, seed) RNG seed.
pub(crate) fn stream_seed(item_id: &str, seed: u64) -> u64 {
    splitmix64(fnv1a(item_id.as_bytes()) ^ splitmix64(seed))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
