use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionError;

/// Categorical `p(N)` over molecule sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    support: Vec<usize>,
    probs: Vec<f64>,
}

impl SizeDistribution {
    /// Empirical histogram; panics on an empty iterator.
    pub fn from_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = BTreeMap::new();
        let mut total = 0usize;
        for n in sizes {
            *counts.entry(n).or_insert(0usize) += 1;
            total += 1;
        }
        assert!(total > 0, "size histogram of an empty corpus");
        Self {
            support: counts.keys().copied().collect(),
            probs: counts.values().map(|&c| c as f64 / total as f64).collect(),
        }
    }

    /// From `(size, weight)` pairs; weights are normalised.
    pub fn new(pairs: &[(usize, f64)]) -> Result<Self, DiffusionError> {
        let mut merged = BTreeMap::new();
        for &(n, w) in pairs {
            if n == 0 || !(w >= 0.0) || !w.is_finite() {
                return Err(DiffusionError::Sizes(format!("invalid entry ({n}, {w})")));
            }
            *merged.entry(n).or_insert(0.0) += w;
        }
        merged.retain(|_, w| *w > 0.0);
        let total: f64 = merged.values().sum();
        if merged.is_empty() || total <= 0.0 {
            return Err(DiffusionError::Sizes("no positive weight".into()));
        }
        Ok(Self {
            support: merged.keys().copied().collect(),
            probs: merged.values().map(|w| w / total).collect(),
        })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn probability(&self, n: usize) -> f64 {
        self.support
            .binary_search(&n)
            .map(|i| self.probs[i])
            .unwrap_or(0.0)
    }

    pub fn max_size(&self) -> usize {
        self.support.last().copied().unwrap_or(0)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let w = WeightedIndex::new(&self.probs).expect("probabilities are positive");
        self.support[w.sample(rng)]
    }
}
