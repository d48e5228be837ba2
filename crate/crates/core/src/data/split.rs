//! Seeded stratified train/test splitting over labeled pixels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub class: u16,
    pub total: usize,
    pub train: usize,
    pub test: usize,
}

/// A deterministic split: pixel indices (row-major) per side, plus the
/// per-class bookkeeping.
#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub fraction: Real,
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub per_class: Vec<ClassCounts>,
}

/// Per-class train count: round-half-up of fraction * total, at least 1
/// when the class has any samples.
pub fn train_count(total: usize, fraction: Real) -> usize {
    if total == 0 {
        return 0;
    }
    let n = (total as Real * fraction + 0.5).floor() as usize;
    n.clamp(1, total)
}

/// Shuffle each class with the seeded generator and take the first
/// `round(fraction * total)` pixels for training. Classes are processed in
/// ascending id order; index lists come out sorted.
pub fn stratified_split(labels: &[u16], fraction: Real, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "split fraction {fraction} outside (0, 1]"
        )));
    }
    let mut classes: Vec<u16> = labels.iter().copied().filter(|&l| l > 0).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::invalid("stratified_split: no labeled pixels"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect();
        // Fisher-Yates with the shared stream keeps the whole split a pure
        // function of (labels, fraction, seed).
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        let n_train = train_count(members.len(), fraction);
        per_class.push(ClassCounts {
            class,
            total: members.len(),
            train: n_train,
            test: members.len() - n_train,
        });
        train_indices.extend_from_slice(&members[..n_train]);
        test_indices.extend_from_slice(&members[n_train..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok(SplitSpec {
        fraction,
        seed,
        train_indices,
        test_indices,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_with_counts(counts: &[(u16, usize)]) -> Vec<u16> {
        let mut labels = Vec::new();
        for &(class, n) in counts {
            labels.extend(std::iter::repeat_n(class, n));
        }
        labels
    }

    #[test]
    fn five_percent_of_6631_is_332() {
        let labels = labels_with_counts(&[(1, 6631)]);
        let split = stratified_split(&labels, 0.05, 0).unwrap();
        assert_eq!(split.per_class[0].train, 332);
        assert_eq!(split.per_class[0].test, 6299);
    }

    #[test]
    fn fraction_one_puts_everything_in_train() {
        let labels = labels_with_counts(&[(1, 10), (2, 7)]);
        let split = stratified_split(&labels, 1.0, 3).unwrap();
        assert_eq!(split.train_indices.len(), 17);
        assert!(split.test_indices.is_empty());
    }

    #[test]
    fn same_seed_reproduces_different_seed_differs() {
        let labels = labels_with_counts(&[(1, 200), (2, 100)]);
        let a = stratified_split(&labels, 0.2, 9).unwrap();
        let b = stratified_split(&labels, 0.2, 9).unwrap();
        let c = stratified_split(&labels, 0.2, 10).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_eq!(a.test_indices, b.test_indices);
        assert_ne!(a.train_indices, c.train_indices);
        // Identical per-class counts regardless of seed.
        assert_eq!(a.per_class, c.per_class);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let labels = labels_with_counts(&[(1, 57), (2, 31), (3, 12)]);
        let split = stratified_split(&labels, 0.3, 4).unwrap();
        let mut all: Vec<usize> = split
            .train_indices
            .iter()
            .chain(&split.test_indices)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
        for c in &split.per_class {
            assert_eq!(c.train + c.test, c.total);
        }
    }

    #[test]
    fn minimum_one_training_sample_per_class() {
        let labels = labels_with_counts(&[(1, 3), (2, 1000)]);
        let split = stratified_split(&labels, 0.01, 0).unwrap();
        assert_eq!(split.per_class[0].train, 1);
    }

    #[test]
    fn invalid_fractions_are_rejected() {
        let labels = labels_with_counts(&[(1, 5)]);
        assert!(stratified_split(&labels, 0.0, 0).is_err());
        assert!(stratified_split(&labels, 1.5, 0).is_err());
        assert!(stratified_split(&labels, -0.1, 0).is_err());
    }
}
