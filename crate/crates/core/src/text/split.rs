//! Seeded few-shot sampling and stratified k-fold splitting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::init;

pub const DEFAULT_FOLDS: usize = 4;

/// Indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    /// First K drawn examples of every label.
    pub train: Vec<usize>,
    /// Second K drawn examples of every label.
    pub dev: Vec<usize>,
    /// Everything not drawn, ascending.
    pub pool: Vec<usize>,
    /// Stratified folds over `train ∪ dev`, as dataset indices.
    pub folds: Vec<(Vec<usize>, Vec<usize>)>,
}

impl FewShotSplit {
    /// The 2K-per-label sample used for cross-validation.
    pub fn sample(&self) -> Vec<usize> {
        self.train.iter().chain(&self.dev).copied().collect()
    }
}

/// Draws 2K examples per label without replacement; the first K go to
/// `train`, the second K to `dev`.
pub fn sample_few_shot(labels: &[usize], label_names: &[&str], k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let mut rng = init::rng(init::derive_seed(seed, "few-shot"));
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut drawn = vec![false; labels.len()];
    for (label, name) in label_names.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.len() < 2 * k {
            return Err(Error::InsufficientExamples {
                label: name.to_string(),
                have: idx.len(),
                need: 2 * k,
            });
        }
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..k]);
        dev.extend_from_slice(&idx[k..2 * k]);
        for &i in &idx[..2 * k] {
            drawn[i] = true;
        }
    }
    let pool = (0..labels.len()).filter(|&i| !drawn[i]).collect();
    let sample: Vec<usize> = train.iter().chain(&dev).copied().collect();
    let sample_labels: Vec<usize> = sample.iter().map(|&i| labels[i]).collect();
    let folds = kfold_split(&sample_labels, DEFAULT_FOLDS, seed)?
        .into_iter()
        .map(|(tr, va)| {
            (
                tr.into_iter().map(|j| sample[j]).collect(),
                va.into_iter().map(|j| sample[j]).collect(),
            )
        })
        .collect();
    Ok(FewShotSplit { train, dev, pool, folds })
}

/// Label-stratified k-fold split over positions `0..labels.len()`. Returns
/// `(train, val)` pairs; the val sets partition the items and their sizes
/// differ by at most one.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if labels.len() < folds {
        return Err(Error::invalid(format!(
            "cannot split {} items into {folds} folds",
            labels.len()
        )));
    }
    let mut rng = init::rng(init::derive_seed(seed, "kfold"));
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut order = Vec::with_capacity(labels.len());
    for label in 0..=max_label {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let mut val: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for (n, i) in order.into_iter().enumerate() {
        val[n % folds].push(i);
    }
    Ok(val
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let train = (0..labels.len()).filter(|i| v.binary_search(i).is_err()).collect();
            (train, v)
        })
        .collect())
}

/// Per-label shuffled split holding out `ceil(frac · count)` items of each
/// label (at least one when the label has two or more items). Returns
/// `(train, holdout)`, both ascending.
pub fn stratified_holdout(labels: &[usize], frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid(format!("holdout fraction {frac} outside (0, 1)")));
    }
    let mut rng = init::rng(init::derive_seed(seed, "holdout"));
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for label in 0..=max_label {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_hold = if idx.len() < 2 {
            0
        } else {
            ((frac * idx.len() as f64).ceil() as usize).clamp(1, idx.len() - 1)
        };
        holdout.extend_from_slice(&idx[..n_hold]);
        train.extend_from_slice(&idx[n_hold..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_label(n: usize) -> Vec<usize> {
        (0..n).map(|i| i % 2).collect()
    }

    #[test]
    fn k32_two_labels() {
        let labels = two_label(400);
        let s = sample_few_shot(&labels, &["a", "b"], 32, 1).unwrap();
        assert_eq!(s.train.len(), 64);
        assert_eq!(s.dev.len(), 64);
        assert_eq!(s.pool.len(), 400 - 128);
        for l in 0..2 {
            assert_eq!(s.train.iter().filter(|&&i| labels[i] == l).count(), 32);
            assert_eq!(s.dev.iter().filter(|&&i| labels[i] == l).count(), 32);
        }
        assert!(s.train.iter().all(|i| !s.dev.contains(i)));
        assert_eq!(s.folds.len(), 4);
        assert!(s.folds.iter().all(|(_, v)| v.len() == 32));
        assert_eq!(s, sample_few_shot(&labels, &["a", "b"], 32, 1).unwrap());
        assert_ne!(s.train, sample_few_shot(&labels, &["a", "b"], 32, 2).unwrap().train);
    }

    #[test]
    fn insufficient_label_is_named() {
        let mut labels = vec![0; 100];
        labels.extend(vec![1; 40]);
        let err = sample_few_shot(&labels, &["yes", "no"], 32, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientExamples { ref label, have: 40, need: 64 } if label == "no"));
    }

    #[test]
    fn kfold_examples() {
        let f = kfold_split(&two_label(64), 4, 3).unwrap();
        assert!(f.iter().all(|(t, v)| v.len() == 16 && t.len() == 48));
        let f = kfold_split(&[0, 0, 0, 1, 1], 4, 3).unwrap();
        let mut sizes: Vec<usize> = f.iter().map(|(_, v)| v.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 2]);
        assert!(kfold_split(&[0, 1, 0], 1, 0).is_err());
        assert!(kfold_split(&[0, 1, 0], 4, 0).is_err());
    }

    #[test]
    fn kfold_is_stratified() {
        let f = kfold_split(&two_label(64), 4, 9).unwrap();
        for (_, v) in &f {
            assert_eq!(v.iter().filter(|&&i| i % 2 == 0).count(), 8);
        }
    }

    #[test]
    fn holdout_is_stratified() {
        let labels: Vec<usize> = (0..130).map(|i| i % 13).collect();
        let (train, hold) = stratified_holdout(&labels, 0.1, 0).unwrap();
        assert_eq!(hold.len(), 13);
        assert_eq!(train.len(), 117);
        for l in 0..13 {
            assert_eq!(hold.iter().filter(|&&i| labels[i] == l).count(), 1);
        }
        assert!(stratified_holdout(&labels, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn kfold_partitions(labels in proptest::collection::vec(0usize..3, 4..60), folds in 2usize..5, seed: u64) {
            prop_assume!(labels.len() >= folds);
            let f = kfold_split(&labels, folds, seed).unwrap();
            let mut all: Vec<usize> = f.iter().flat_map(|(_, v)| v.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            let sizes: Vec<usize> = f.iter().map(|(_, v)| v.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for (t, v) in &f {
                prop_assert_eq!(t.len() + v.len(), labels.len());
                prop_assert!(t.iter().all(|i| !v.contains(i)));
            }
            prop_assert_eq!(f, kfold_split(&labels, folds, seed).unwrap());
        }
    }
}
