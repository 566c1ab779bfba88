//! Deterministic A/B traffic assignment.

use serde::{Deserialize, Serialize};

use super::LifecycleError;
use crate::hash::basis_points;
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KeyBasis {
    Message,
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPolicy {
    pub variant_a: String,
    pub variant_b: String,
    pub fraction_b: f64,
    pub key_basis: KeyBasis,
    pub started_at: Timestamp,
    pub review_after: Timestamp,
}

impl RolloutPolicy {
    /// Shape checks only; the registry checks variant statuses.
    pub fn validate(&self) -> Result<(), LifecycleError> {
        if !(0.0..=1.0).contains(&self.fraction_b) {
            return Err(LifecycleError::InvalidPolicy(format!("fraction_b {} outside [0, 1]", self.fraction_b)));
        }
        if self.variant_a == self.variant_b {
            return Err(LifecycleError::InvalidPolicy("variants must differ".into()));
        }
        if self.review_after < self.started_at {
            return Err(LifecycleError::InvalidPolicy("review_after precedes started_at".into()));
        }
        Ok(())
    }

    /// Basis-point cut: keys hashing below it go to B.
    pub fn cut(&self) -> u32 {
        (10_000.0 * self.fraction_b).round() as u32
    }
}

/// `variant_b` iff `fnv1a(key) % 10000 < 10000 * fraction_b`.
pub fn assign_variant<'a>(key: &str, policy: &'a RolloutPolicy) -> &'a str {
    if basis_points(key) < policy.cut() {
        &policy.variant_b
    } else {
        &policy.variant_a
    }
}
