//! Two-component Normal mixture over synthetic-difficulty values.
//!
//! The memory component has weight `pi_m`, the drift component `1 - pi_m`.
//! Its variance splits into a within-component term and a between-component
//! term; the latter is what makes memorized items' variance stand out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detectors::{population_variance, DetectorId, ScoreRecord};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::toy::splitmix64;
use crate::trace::Label;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub pi_m: f64,
    pub mu_m: f64,
    pub sigma_m: f64,
    pub mu_u: f64,
    pub sigma_u: f64,
}

impl MixtureSpec {
    /// Single drift component (`pi_m = 0`).
    pub fn drift_only(mu_u: f64, sigma_u: f64) -> Self {
        MixtureSpec {
            pi_m: 0.0,
            mu_m: mu_u,
            sigma_m: sigma_u,
            mu_u,
            sigma_u,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi_m) {
            return Err(Error::Config(format!("pi_m {} outside [0, 1]", self.pi_m)));
        }
        if !(self.sigma_m >= 0.0 && self.sigma_u >= 0.0) {
            return Err(Error::Config(
                "component standard deviations must be >= 0".into(),
            ));
        }
        if ![self.mu_m, self.mu_u, self.sigma_m, self.sigma_u]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(Error::Config("mixture parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn pi_u(&self) -> f64 {
        1.0 - self.pi_m
    }
}

pub fn mixture_mean(spec: &MixtureSpec) -> f64 {
    spec.pi_m * spec.mu_m + spec.pi_u() * spec.mu_u
}

/// `pi_M (sigma_M² + (mu_M - mu)²) + pi_U (sigma_U² + (mu_U - mu)²)`.
pub fn mixture_variance(spec: &MixtureSpec) -> f64 {
    let mu = mixture_mean(spec);
    spec.pi_m * (spec.sigma_m.powi(2) + (spec.mu_m - mu).powi(2))
        + spec.pi_u() * (spec.sigma_u.powi(2) + (spec.mu_u - mu).powi(2))
}

/// `E[Var | Z]`.
pub fn within_component_variance(spec: &MixtureSpec) -> f64 {
    spec.pi_m * spec.sigma_m.powi(2) + spec.pi_u() * spec.sigma_u.powi(2)
}

/// `Var[E | Z] = pi_M pi_U (mu_M - mu_U)²`.
pub fn between_component_variance(spec: &MixtureSpec) -> f64 {
    spec.pi_m * spec.pi_u() * (spec.mu_m - spec.mu_u).powi(2)
}

/// `n` draws: latent `Z ~ Bernoulli(pi_m)`, then `Normal(mu_Z, sigma_Z)`.
pub fn sample_d_values(spec: &MixtureSpec, n: usize, seed: u64) -> Vec<f64> {
    sample_with_states(spec, n, seed)
        .into_iter()
        .map(|(x, _)| x)
        .collect()
}

/// As [`sample_d_values`], also returning whether each draw came from the
/// memory component.
pub fn sample_with_states(spec: &MixtureSpec, n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let memory = Normal::new(spec.mu_m, spec.sigma_m).expect("validated sigma");
    let drift = Normal::new(spec.mu_u, spec.sigma_u).expect("validated sigma");
    (0..n)
        .map(|_| {
            let z = rng.random::<f64>() < spec.pi_m;
            let x = if z {
                memory.sample(&mut rng)
            } else {
                drift.sample(&mut rng)
            };
            (x, z)
        })
        .collect()
}

/// Labeled DVD scores for `items` synthetic items (contaminated first, then
/// clean, split as evenly as possible).
pub fn make_synthetic_dataset(
    contaminated: &MixtureSpec,
    clean: &MixtureSpec,
    items: usize,
    samples_per_item: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ScoreRecord>> {
    contaminated.validate()?;
    clean.validate()?;
    if clean.pi_m != 0.0 {
        return Err(Error::Config(format!(
            "clean mixture must have pi_m = 0, got {}",
            clean.pi_m
        )));
    }
    if samples_per_item < 2 {
        return Err(Error::Config("samples_per_item must be >= 2".into()));
    }
    let n_contaminated = items.div_ceil(2);
    Ok(exec.map_range(items, |i| {
        let (label, spec) = if i < n_contaminated {
            (Label::Contaminated, contaminated)
        } else {
            (Label::Clean, clean)
        };
        let item_seed = splitmix64(seed ^ splitmix64(i as u64 + 1));
        let ds = sample_d_values(spec, samples_per_item, item_seed);
        ScoreRecord {
            item_id: format!("sim-{i:05}"),
            detector: DetectorId::Dvd,
            value: Some(population_variance(&ds)),
            orientation: DetectorId::Dvd.orientation(),
            unavailable_reason: None,
            label: Some(label),
        }
    }))
}
