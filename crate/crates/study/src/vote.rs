use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StudyError};

/// Left/right presentation order of the two candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permutation {
    /// Candidate 0 on the left.
    Identity,
    /// Candidate 0 on the right.
    Swap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Permutation {
    /// Canonical candidate index shown on `side`.
    pub fn canonical(self, side: Side) -> u8 {
        match (self, side) {
            (Permutation::Identity, Side::Left) | (Permutation::Swap, Side::Right) => 0,
            _ => 1,
        }
    }

    /// Side on which canonical candidate `choice` is shown.
    pub fn side_of(self, choice: u8) -> Side {
        if self.canonical(Side::Left) == choice {
            Side::Left
        } else {
            Side::Right
        }
    }
}

/// Presentation order for a (rater, triplet) pair under a study seed.
pub fn permutation_for(seed: u64, rater_id: &str, triplet_id: &str) -> Permutation {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((rater_id.len() as u64).to_le_bytes());
    h.update(rater_id.as_bytes());
    h.update(triplet_id.as_bytes());
    if h.finalize()[0] & 1 == 0 {
        Permutation::Identity
    } else {
        Permutation::Swap
    }
}

/// One line of the vote log. `choice` is always in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub triplet_id: String,
    pub rater_id: String,
    pub choice: u8,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Permutation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

impl VoteRecord {
    pub fn new(triplet_id: &str, rater_id: &str, choice: u8, timestamp_ms: u64) -> Self {
        Self {
            triplet_id: triplet_id.to_string(),
            rater_id: rater_id.to_string(),
            choice,
            timestamp_ms,
            permutation: None,
            dwell_ms: None,
            idempotency_key: None,
        }
    }
}

pub fn validate_rater(rater_id: &str) -> Result<()> {
    let ok = !rater_id.is_empty()
        && rater_id.len() <= 128
        && rater_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@'));
    if ok {
        Ok(())
    } else {
        Err(StudyError::InvalidRater(rater_id.chars().take(64).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sides_map_to_opposite_choices() {
        for p in [Permutation::Identity, Permutation::Swap] {
            assert_ne!(p.canonical(Side::Left), p.canonical(Side::Right));
            for c in 0..2 {
                assert_eq!(p.canonical(p.side_of(c)), c);
            }
        }
        assert_eq!(Permutation::Swap.canonical(Side::Left), 1);
    }

    #[test]
    fn permutations_vary_and_repeat() {
        let ps: Vec<_> = (0..64).map(|i| permutation_for(3, "r1", &format!("t{i}"))).collect();
        assert!(ps.contains(&Permutation::Identity) && ps.contains(&Permutation::Swap));
        assert_eq!(permutation_for(3, "r1", "t7"), ps[7]);
    }

    #[test]
    fn rater_ids_are_checked() {
        assert!(validate_rater("alice-01").is_ok());
        assert!(validate_rater("").is_err());
        assert!(validate_rater("a b").is_err());
        assert!(validate_rater(&"x".repeat(129)).is_err());
    }
}
