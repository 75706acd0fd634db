use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{draw, ToyModelSpec};
use crate::error::{Error, Result};
use crate::trace::{ItemRecord, Label};

/// Parameters for generating a labeled toy dataset together with the toy
/// model that has "memorized" variants of its contaminated items.
///
/// Reference answers are drawn from the answer distribution (the base unigram
/// unless `answer_zipf_exponent` is set). A contaminated item's template is a
/// rewritten variant of a prefix of its reference: each token is
/// independently replaced, with probability `rewrite_rate`, by a fresh draw
/// from the answer distribution.
///
/// The defaults give a peaked drift state (Zipf 2.5) and flatter answer
/// content (Zipf 0.5) over 128-token answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub vocab_size: usize,
    /// Answer lengths are drawn uniformly from
    /// `min_answer_length..=answer_length`.
    pub answer_length: usize,
    pub min_answer_length: usize,
    /// The template covers a prefix of the answer whose fraction is drawn
    /// uniformly from `[min_memorized, max_memorized]`.
    pub min_memorized: f64,
    pub max_memorized: f64,
    pub n_contaminated: usize,
    pub n_clean: usize,
    pub zipf_exponent: f64,
    pub rewrite_rate: f64,
    /// Zipf exponent of the distribution reference and template tokens are
    /// drawn from; `None` uses the base unigram itself.
    pub answer_zipf_exponent: Option<f64>,
    pub pi_m: f64,
    pub lambda_hi: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            vocab_size: 32,
            answer_length: 128,
            min_answer_length: 128,
            min_memorized: 1.0,
            max_memorized: 1.0,
            n_contaminated: 100,
            n_clean: 100,
            zipf_exponent: 2.5,
            rewrite_rate: 0.8,
            answer_zipf_exponent: Some(0.5),
            pi_m: 0.5,
            lambda_hi: 0.9,
            temperature: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyWorld {
    pub items: Vec<ItemRecord>,
    pub spec: ToyModelSpec,
}

impl ToyWorldConfig {
    pub fn build(&self) -> Result<ToyWorld> {
        if !(0.0..=1.0).contains(&self.rewrite_rate) {
            return Err(Error::Toy(format!(
                "rewrite_rate {} outside [0, 1]",
                self.rewrite_rate
            )));
        }
        if self.min_answer_length == 0 || self.min_answer_length > self.answer_length {
            return Err(Error::Toy(format!(
                "answer lengths {}..={} are empty or start at 0",
                self.min_answer_length, self.answer_length
            )));
        }
        if !(0.0 < self.min_memorized
            && self.min_memorized <= self.max_memorized
            && self.max_memorized <= 1.0)
        {
            return Err(Error::Toy(format!(
                "memorized fraction range [{}, {}] must lie in (0, 1]",
                self.min_memorized, self.max_memorized
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::Toy("zipf_exponent must be finite and >= 0".into()));
        }
        if let Some(s) = self.answer_zipf_exponent {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Toy(
                    "answer_zipf_exponent must be finite and >= 0".into(),
                ));
            }
        }
        let v = self.vocab_size;
        let width = v.saturating_sub(1).to_string().len().max(2);
        let vocabulary: Vec<String> = (0..v).map(|i| format!("w{i:0width$}")).collect();
        let base_unigram = zipf(v, self.zipf_exponent);

        let answer_dist = match self.answer_zipf_exponent {
            None => base_unigram.clone(),
            Some(s) => zipf(v, s),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut labels: Vec<Label> = std::iter::repeat_n(Label::Contaminated, self.n_contaminated)
            .chain(std::iter::repeat_n(Label::Clean, self.n_clean))
            .collect();
        labels.shuffle(&mut rng);

        let mut items = Vec::with_capacity(labels.len());
        let mut templates = BTreeMap::new();
        let mut answer_lengths = BTreeMap::new();
        for (i, label) in labels.into_iter().enumerate() {
            let item_id = format!("toy-{i:04}");
            let len = rng.random_range(self.min_answer_length..=self.answer_length);
            let reference: Vec<usize> =
                (0..len).map(|_| draw(&answer_dist, rng.random())).collect();
            answer_lengths.insert(item_id.clone(), len);
            if label == Label::Contaminated {
                let fraction = if self.min_memorized < self.max_memorized {
                    rng.random_range(self.min_memorized..=self.max_memorized)
                } else {
                    self.max_memorized
                };
                let covered = ((fraction * len as f64).ceil() as usize).clamp(1, len);
                let template: Vec<String> = reference[..covered]
                    .iter()
                    .map(|&tok| {
                        let rewrite = rng.random::<f64>() < self.rewrite_rate;
                        let fresh = draw(&answer_dist, rng.random());
                        vocabulary[if rewrite { fresh } else { tok }].clone()
                    })
                    .collect();
                templates.insert(item_id.clone(), template);
            }
            let reference_answer = reference
                .iter()
                .map(|&t| vocabulary[t].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            items.push(ItemRecord {
                item_id,
                prompt: format!("Toy question {i}. Answer:"),
                reference_answer,
                label,
                domain_tag: Some("toy".into()),
            });
        }

        let spec = ToyModelSpec {
            vocabulary,
            base_unigram,
            templates,
            pi_m: self.pi_m,
            lambda_hi: self.lambda_hi,
            temperature: self.temperature,
            answer_length: self.answer_length,
            answer_lengths,
        };
        super::ToyModel::new(spec.clone())?;
        Ok(ToyWorld { items, spec })
    }
}

/// Zipf weights `r^-s` over ranks `1..=v`, normalized.
fn zipf(v: usize, s: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=v).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = weights.iter().sum();
    let mut p: Vec<f64> = weights.iter().map(|w| w / z).collect();
    // land the sum on 1 within rounding
    let excess: f64 = p.iter().sum::<f64>() - 1.0;
    p[0] -= excess;
    p
}
