//! Hashed unigram features.

use std::collections::BTreeMap;

use crate::hash::fnv1a32;
use crate::text::tokens;

pub const FEATURE_BITS: u32 = 18;
pub const FEATURE_DIM: usize = 1 << FEATURE_BITS;

pub fn bucket(token: &str) -> u32 {
    fnv1a32(token.as_bytes()) % FEATURE_DIM as u32
}

/// Sparse count vector, entries sorted by bucket index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseVector {
    entries: Vec<(u32, u32)>,
}

impl SparseVector {
    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| u64::from(c)).sum()
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, c)| dense[i as usize] * f64::from(c)).sum()
    }
}

pub fn featurize(text: &str) -> SparseVector {
    let mut counts = BTreeMap::new();
    for token in tokens(text) {
        *counts.entry(bucket(&token)).or_insert(0u32) += 1;
    }
    SparseVector { entries: counts.into_iter().collect() }
}
