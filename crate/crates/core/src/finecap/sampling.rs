use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Category balancing for one batch of images.
///
/// `min_retain` and `cap` are stated for a batch of `reference_images` and
/// scale linearly with `batch_images`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub batch_images: u64,
    #[serde(default = "reference_images")]
    pub reference_images: u64,
    #[serde(default = "min_retain")]
    pub min_retain: u64,
    #[serde(default = "cap")]
    pub cap: u64,
    /// Downsampling exponent; 1 keeps exactly `cap` of an oversized group.
    #[serde(default = "gamma")]
    pub gamma: f64,
}

fn reference_images() -> u64 {
    10_000_000
}
fn min_retain() -> u64 {
    1_000
}
fn cap() -> u64 {
    100_000
}
fn gamma() -> f64 {
    1.0
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            batch_images: reference_images(),
            reference_images: reference_images(),
            min_retain: min_retain(),
            cap: cap(),
            gamma: gamma(),
        }
    }
}

impl SamplingParams {
    fn scaled(&self, v: u64) -> u64 {
        let s = v as f64 * self.batch_images as f64 / self.reference_images.max(1) as f64;
        (libm::round(s) as u64).max(1)
    }

    pub fn scaled_min_retain(&self) -> u64 {
        self.scaled(self.min_retain)
    }

    pub fn scaled_cap(&self) -> u64 {
        self.scaled(self.cap)
    }

    /// How many of a group of `n` survive.
    pub fn keep_count(&self, n: u64) -> u64 {
        let cap = self.scaled_cap();
        if n < self.scaled_min_retain() || n <= cap {
            return n;
        }
        let ratio = libm::pow(cap as f64 / n as f64, self.gamma);
        (libm::round(n as f64 * ratio) as u64).min(cap).min(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("sampling.gamma", "must be positive"));
        }
        if self.cap == 0 {
            return Err(Error::config("sampling.cap", "must be positive"));
        }
        Ok(())
    }
}

/// Uniform sample of each group, deterministic per `seed` and label; the
/// kept items stay in their input order.
pub fn stratified_sample<T: Clone>(
    groups: &BTreeMap<String, Vec<T>>,
    params: &SamplingParams,
    seed: u64,
) -> Result<BTreeMap<String, Vec<T>>> {
    params.validate()?;
    let root = rng::derive_seed(seed, rng::streams::SAMPLING);
    let mut out = BTreeMap::new();
    for (label, items) in groups {
        let k = params.keep_count(items.len() as u64) as usize;
        let picked = if k == items.len() {
            items.clone()
        } else {
            let mut r = rng::stream(root, label);
            let mut idx = index::sample(&mut r, items.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| items[i].clone()).collect()
        };
        out.insert(label.clone(), picked);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_counts_at_reference_scale() {
        let p = SamplingParams::default();
        assert_eq!(p.keep_count(500), 500);
        assert_eq!(p.keep_count(250_000), 100_000);
        assert_eq!(p.keep_count(100_000), 100_000);
    }

    #[test]
    fn thresholds_scale_with_batch() {
        let p = SamplingParams {
            batch_images: 1_000,
            ..Default::default()
        };
        assert_eq!(p.scaled_min_retain(), 1);
        assert_eq!(p.scaled_cap(), 10);
        assert_eq!(p.keep_count(25), 10);
    }
}
