use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mask::ClassMask;

/// Upper bound on any class weight, relative to the most frequent class.
pub const CLASS_WEIGHT_CAP: f64 = 50.0;

/// Inverse pixel-frequency weights, capped at [`CLASS_WEIGHT_CAP`] times the
/// weight of the most frequent class and normalized to mean 1. Absent classes
/// get the cap.
pub fn class_weights_from_counts(counts: &[u64]) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![1.0; counts.len()];
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { CLASS_WEIGHT_CAP } else { (max as f64 / c as f64).min(CLASS_WEIGHT_CAP) })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

pub fn compute_class_weights<'a>(masks: impl IntoIterator<Item = &'a ClassMask>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for m in masks {
        for (c, n) in m.histogram(num_classes).into_iter().enumerate() {
            counts[c] += n;
        }
    }
    class_weights_from_counts(&counts)
}

/// Set of class labels present in one sample (bit `c` set for class `c`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassSet(pub u32);

impl ClassSet {
    pub fn of_labels(labels: &[u8]) -> Self {
        Self(labels.iter().fold(0u32, |acc, &v| acc | (1 << (v.min(31)))))
    }

    pub fn of_mask(mask: &ClassMask) -> Self {
        Self::of_labels(mask.data())
    }

    pub fn contains(self, class: u8) -> bool {
        class < 32 && self.0 & (1 << class) != 0
    }

    /// Samples with minor (2) or major (3) damage pixels.
    pub fn needs_oversampling(self) -> bool {
        self.contains(2) || self.contains(3)
    }
}

/// Sample visiting order for one epoch, with repetitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub indices: Vec<usize>,
    pub oversample_factor: usize,
}

impl SamplingPlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// How often `index` occurs in the plan.
    pub fn multiplicity(&self, index: usize) -> usize {
        self.indices.iter().filter(|&&i| i == index).count()
    }

    /// The same multiset in a fresh order.
    pub fn reshuffled(&self, seed: u64) -> Self {
        let mut indices = self.indices.clone();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { indices, oversample_factor: self.oversample_factor }
    }
}

/// Samples containing class 2 or 3 appear `k` times, all others once; the
/// order is a seeded shuffle. `k = 0` is treated as 1.
pub fn build_sampling_plan(index: &[ClassSet], k: usize, seed: u64) -> SamplingPlan {
    let k = k.max(1);
    let mut indices = Vec::with_capacity(index.len());
    for (i, set) in index.iter().enumerate() {
        let reps = if set.needs_oversampling() { k } else { 1 };
        indices.extend(core::iter::repeat(i).take(reps));
    }
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    SamplingPlan { indices, oversample_factor: k }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_weights_are_one() {
        assert_eq!(class_weights_from_counts(&[7, 7, 7, 7, 7]), vec![1.0; 5]);
    }

    #[test]
    fn half_frequency_doubles_weight() {
        let w = class_weights_from_counts(&[100, 50]);
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frequency_oracle() {
        let w = class_weights_from_counts(&[1000, 500, 250, 125, 125]);
        let want = [1.0, 2.0, 4.0, 8.0, 8.0];
        let mean = want.iter().sum::<f64>() / 5.0;
        for (a, b) in w.iter().zip(want) {
            assert!((a - b / mean).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() / 5.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn absent_and_rare_classes_are_capped() {
        let w = class_weights_from_counts(&[10_000, 1, 0]);
        assert_eq!(w[1], w[2]);
        assert!((w[1] / w[0] - CLASS_WEIGHT_CAP).abs() < 1e-9);
    }

    #[test]
    fn identity_factor_is_a_permutation() {
        let idx: Vec<ClassSet> = (0..10).map(|i| ClassSet::of_labels(&[0, (i % 5) as u8])).collect();
        let mut p = build_sampling_plan(&idx, 1, 3).indices;
        p.sort_unstable();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn oversampled_plan_length() {
        let mut idx = vec![ClassSet::of_labels(&[0, 1]); 10];
        for i in [1, 4, 8] {
            idx[i] = ClassSet::of_labels(&[0, 1, if i == 4 { 3 } else { 2 }]);
        }
        let plan = build_sampling_plan(&idx, 4, 0);
        assert_eq!(plan.len(), 7 + 3 * 4);
    }

    #[test]
    fn unaffected_sample_once_for_any_k() {
        let idx = [ClassSet::of_labels(&[0, 1, 4])];
        for k in 1..8 {
            assert_eq!(build_sampling_plan(&idx, k, k as u64).multiplicity(0), 1);
        }
    }

    proptest! {
        #[test]
        fn multiplicities_follow_the_rule(sets in proptest::collection::vec(0u32..32, 1..60), k in 1usize..6, seed: u64) {
            let idx: Vec<ClassSet> = sets.into_iter().map(ClassSet).collect();
            let plan = build_sampling_plan(&idx, k, seed);
            for (i, s) in idx.iter().enumerate() {
                let want = if s.contains(2) || s.contains(3) { k } else { 1 };
                prop_assert_eq!(plan.multiplicity(i), want);
            }
        }
    }
}
