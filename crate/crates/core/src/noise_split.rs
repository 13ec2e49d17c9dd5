//! Entropy-ranked split of the training set into trusted (labeled) and
//! suspect (unlabeled) samples.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aggregation::entropy_of;
use crate::error::{invalid, Result};
use crate::rng;

const STREAM_TIES: u64 = 0x5449_4553;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Fraction of samples routed to the unlabeled side.
    pub gamma: f64,
    /// Only used to order samples with exactly equal entropy.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { gamma: 0.25, seed: 0 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        Ok(())
    }

    /// `round(gamma * n)`, halves rounded up.
    pub fn unlabeled_count(&self, n: usize) -> usize {
        ((self.gamma * n as f64 + 0.5).floor() as usize).min(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// Ascending sample indices kept with their original labels.
    pub labeled_indices: Vec<usize>,
    /// Ascending sample indices whose labels are discarded.
    pub unlabeled_indices: Vec<usize>,
    pub entropies: Vec<f64>,
}

impl SplitAssignment {
    pub fn n_samples(&self) -> usize {
        self.entropies.len()
    }

    /// True when nothing is left to supervise on (gamma = 1).
    pub fn labeled_is_empty(&self) -> bool {
        self.labeled_indices.is_empty()
    }

    /// Per-sample flag, `true` for unlabeled.
    pub fn unlabeled_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_samples()];
        for &i in &self.unlabeled_indices {
            mask[i] = true;
        }
        mask
    }

    /// Fraction of samples whose side differs between two splits of the same set.
    pub fn churn(&self, other: &SplitAssignment) -> f64 {
        let a = self.unlabeled_mask();
        let b = other.unlabeled_mask();
        if a.len() != b.len() || a.is_empty() {
            return 1.0;
        }
        a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
    }
}

/// Routes the `round(gamma * N)` highest-entropy samples to the unlabeled set.
pub fn split_by_entropy(posteriors: ArrayView2<'_, f64>, cfg: &SplitConfig) -> Result<SplitAssignment> {
    cfg.validate()?;
    let entropies = entropy_of(posteriors).to_vec();
    let n = entropies.len();
    let n_unlabeled = cfg.unlabeled_count(n);

    // shuffle first so the stable sort leaves equal-entropy runs in seeded order
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, STREAM_TIES, 0));
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]));

    let mut unlabeled_indices = order[..n_unlabeled].to_vec();
    let mut labeled_indices = order[n_unlabeled..].to_vec();
    unlabeled_indices.sort_unstable();
    labeled_indices.sort_unstable();
    if labeled_indices.is_empty() && n > 0 {
        log::warn!("entropy split left no labeled samples (gamma = {})", cfg.gamma);
    }
    Ok(SplitAssignment { labeled_indices, unlabeled_indices, entropies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn one_hot_rows(n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |(i, j)| if i % c == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn rounding_contract() {
        let p = Array2::from_elem((10, 2), 0.5);
        let s = split_by_entropy(p.view(), &SplitConfig { gamma: 0.3, seed: 1 }).unwrap();
        assert_eq!(s.unlabeled_indices.len(), 3);
        assert_eq!(s.labeled_indices.len(), 7);
        assert_eq!(SplitConfig { gamma: 0.25, seed: 0 }.unlabeled_count(10), 3); // 2.5 rounds up
    }

    #[test]
    fn gamma_boundaries() {
        let p = one_hot_rows(5, 3);
        let s = split_by_entropy(p.view(), &SplitConfig { gamma: 0.0, seed: 0 }).unwrap();
        assert!(s.unlabeled_indices.is_empty());
        assert_eq!(s.labeled_indices, vec![0, 1, 2, 3, 4]);
        let s = split_by_entropy(p.view(), &SplitConfig { gamma: 1.0, seed: 0 }).unwrap();
        assert!(s.labeled_is_empty());
        assert!(SplitConfig { gamma: 1.5, seed: 0 }.validate().is_err());
    }

    #[test]
    fn uniform_rows_go_unlabeled() {
        let mut p = one_hot_rows(10, 3);
        for i in [3, 7] {
            p.row_mut(i).fill(1.0 / 3.0);
        }
        let s = split_by_entropy(p.view(), &SplitConfig { gamma: 0.2, seed: 9 }).unwrap();
        assert_eq!(s.unlabeled_indices, vec![3, 7]);
    }

    #[test]
    fn ties_are_seeded() {
        let p = Array2::from_elem((40, 4), 0.25);
        let a = split_by_entropy(p.view(), &SplitConfig { gamma: 0.5, seed: 3 }).unwrap();
        let b = split_by_entropy(p.view(), &SplitConfig { gamma: 0.5, seed: 3 }).unwrap();
        let c = split_by_entropy(p.view(), &SplitConfig { gamma: 0.5, seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.unlabeled_indices, c.unlabeled_indices);
        assert_ne!(a.unlabeled_indices, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn churn_counts_moved_samples() {
        let a = SplitAssignment { labeled_indices: vec![0, 1], unlabeled_indices: vec![2, 3], entropies: vec![0.0; 4] };
        let b = SplitAssignment { labeled_indices: vec![0, 2], unlabeled_indices: vec![1, 3], entropies: vec![0.0; 4] };
        assert_eq!(a.churn(&a), 0.0);
        assert_eq!(a.churn(&b), 0.5);
    }

    proptest! {
        #[test]
        fn partition_and_ordering(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..60),
            gamma in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let n = rows.len();
            let mut p = Array2::zeros((n, 3));
            for (i, r) in rows.iter().enumerate() {
                let s: f64 = r.iter().sum::<f64>() + 1e-9;
                for j in 0..3 { p[[i, j]] = (r[j] + 1e-9 / 3.0) / s; }
            }
            let cfg = SplitConfig { gamma, seed };
            let s = split_by_entropy(p.view(), &cfg).unwrap();
            prop_assert_eq!(s.unlabeled_indices.len(), cfg.unlabeled_count(n));
            let mut all: Vec<usize> = s.labeled_indices.iter().chain(&s.unlabeled_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let min_u = s.unlabeled_indices.iter().map(|&i| s.entropies[i]).fold(f64::INFINITY, f64::min);
            let max_l = s.labeled_indices.iter().map(|&i| s.entropies[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_u >= max_l);
            prop_assert_eq!(split_by_entropy(p.view(), &cfg).unwrap(), s);
        }
    }
}
