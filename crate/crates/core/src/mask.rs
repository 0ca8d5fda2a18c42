//! Per-case expert availability.

use serde::{Deserialize, Serialize};

/// Binary availability vector over the expert set. Bit `j` is 1 iff expert
/// `j` has a decision for the case; the feasible set is `{j : bit_j = 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertMask {
    bits: Vec<u8>,
}

impl ExpertMask {
    pub fn new(bits: Vec<u8>) -> Self {
        assert!(bits.iter().all(|&b| b == 0 || b == 1), "mask bits must be 0/1");
        ExpertMask { bits }
    }

    pub fn full(len: usize) -> Self {
        ExpertMask { bits: vec![1; len] }
    }

    pub fn empty(len: usize) -> Self {
        ExpertMask { bits: vec![0; len] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, j: usize) -> u8 {
        self.bits[j]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// True iff expert `j` is feasible.
    pub fn feasible(&self, j: usize) -> bool {
        self.bits[j] == 1
    }

    /// Number of feasible experts (`k_i`).
    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Indices of feasible experts in ascending order.
    pub fn feasible_set(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j] == 1).collect()
    }

    /// Compact bit-pattern key for grouping; requires at most 64 experts.
    pub fn pattern_key(&self) -> u64 {
        assert!(self.bits.len() <= 64, "pattern key supports up to 64 experts");
        self.bits
            .iter()
            .enumerate()
            .fold(0u64, |acc, (j, &b)| acc | ((b as u64) << j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_and_feasible_set() {
        let m = ExpertMask::new(vec![1, 0, 1, 1]);
        assert_eq!(m.cardinality(), 3);
        assert_eq!(m.feasible_set(), vec![0, 2, 3]);
        assert!(m.feasible(0));
        assert!(!m.feasible(1));
    }

    #[test]
    fn pattern_key_distinguishes_masks() {
        let a = ExpertMask::new(vec![1, 0, 1]);
        let b = ExpertMask::new(vec![1, 1, 0]);
        assert_ne!(a.pattern_key(), b.pattern_key());
        assert_eq!(a.pattern_key(), 0b101);
    }

    #[test]
    #[should_panic]
    fn rejects_non_binary_bits() {
        ExpertMask::new(vec![0, 2]);
    }
}
