use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{BackendConfig, BackendIdentity, PositionStats};
use crate::error::Result;
use crate::toy::ToyModel;
use crate::trace::{Decoding, GenerationSample, ItemRecord, TokenEvidence};

pub(super) struct ToyBackend {
    model: ToyModel,
    path: Option<PathBuf>,
}

impl ToyBackend {
    pub(super) fn new(model: ToyModel, cfg: &BackendConfig, path: Option<PathBuf>) -> Result<Self> {
        Ok(ToyBackend {
            model: model.with_temperature(cfg.temperature)?,
            path,
        })
    }

    pub(super) fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            scheme: "toy".into(),
            location: self
                .path
                .as_ref()
                .map_or_else(|| "<memory>".into(), |p| p.display().to_string()),
            model: "toy".into(),
            api_style: None,
            position_stats: PositionStats::Exact,
            logprob_source: "per-step sampling distribution at the configured temperature".into(),
        }
    }

    pub(super) fn sample(
        &self,
        item: &ItemRecord,
        index: usize,
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<GenerationSample> {
        calls.fetch_add(1, Ordering::Relaxed);
        // unpinned runs still need a seed; the index keeps samples distinct
        let seed = cfg.sample_seed(index).unwrap_or(index as u64);
        let mut s =
            self.model
                .generate(&item.item_id, Decoding::Temperature, seed, cfg.max_tokens)?;
        s.sample_index = index;
        Ok(s)
    }

    pub(super) fn greedy(
        &self,
        item: &ItemRecord,
        cfg: &BackendConfig,
        calls: &AtomicU64,
    ) -> Result<GenerationSample> {
        calls.fetch_add(1, Ordering::Relaxed);
        self.model
            .generate(&item.item_id, Decoding::Greedy, 0, cfg.max_tokens)
    }

    pub(super) fn score_reference(
        &self,
        item: &ItemRecord,
        calls: &AtomicU64,
    ) -> Result<Option<Vec<TokenEvidence>>> {
        calls.fetch_add(1, Ordering::Relaxed);
        let ids = self.model.tokenize(&item.reference_answer)?;
        let tokens: Vec<&str> = ids.iter().map(|&i| self.model.token(i)).collect();
        self.model.score_reference(&item.item_id, &tokens).map(Some)
    }

    pub(super) fn embed(&self, texts: &[&str], calls: &AtomicU64) -> Option<Vec<Vec<f64>>> {
        calls.fetch_add(1, Ordering::Relaxed);
        Some(texts.iter().map(|t| self.model.embed(t)).collect())
    }
}
