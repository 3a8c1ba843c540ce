//! Class-balanced batch samplers.
//!
//! Every batch holds `batch_size / m` distinct classes with `m` samples each,
//! so every element has at least `m − 1` in-batch positives.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Label;
use crate::{Error, Result};

/// Super-category id of a class.
pub type Category = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SamplerConfig {
    MPerClass { batch_size: usize, m: usize },
    CategoryPairs { batch_size: usize, m: usize, categories: BTreeMap<Label, Category> },
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        match self {
            SamplerConfig::MPerClass { batch_size, .. } | SamplerConfig::CategoryPairs { batch_size, .. } => *batch_size,
        }
    }

    pub fn with_batch_size(&self, batch_size: usize) -> Self {
        let mut c = self.clone();
        match &mut c {
            SamplerConfig::MPerClass { batch_size: b, .. } | SamplerConfig::CategoryPairs { batch_size: b, .. } => *b = batch_size,
        }
        c
    }

    pub fn batches(&self, labels: &[Label], seed: u64) -> Result<Vec<Vec<usize>>> {
        match self {
            SamplerConfig::MPerClass { batch_size, m } => m_per_class_batches(labels, *batch_size, *m, seed),
            SamplerConfig::CategoryPairs { batch_size, m, categories } => {
                category_pair_batches(labels, categories, *batch_size, *m, seed)
            }
        }
    }
}

fn check_shape(batch_size: usize, m: usize) -> Result<usize> {
    if m < 2 {
        return Err(Error::Infeasible(format!(
            "m = {m} leaves queries without in-batch positives; need m >= 2"
        )));
    }
    if batch_size == 0 || !batch_size.is_multiple_of(m) {
        return Err(Error::Infeasible(format!("batch size {batch_size} is not a positive multiple of m = {m}")));
    }
    Ok(batch_size / m)
}

/// One epoch of batches drawn from `pool` (indices into `labels`).
fn sample_pool(labels: &[Label], pool: &[usize], classes_per_batch: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_class.entry(labels[i]).or_default().push(i);
    }
    // chunks of m same-class samples; leftovers are dropped for this epoch
    let mut chunks: Vec<(Label, Vec<Vec<usize>>)> = by_class
        .into_iter()
        .filter(|(_, members)| members.len() >= m)
        .map(|(label, mut members)| {
            members.shuffle(rng);
            let cs = members.chunks_exact(m).map(<[usize]>::to_vec).collect();
            (label, cs)
        })
        .collect();
    if chunks.len() < classes_per_batch {
        return Err(Error::Infeasible(format!(
            "{} classes have at least {m} samples, a batch needs {classes_per_batch}",
            chunks.len()
        )));
    }

    let mut batches = Vec::new();
    loop {
        let mut open: Vec<usize> = (0..chunks.len()).filter(|&c| !chunks[c].1.is_empty()).collect();
        if open.len() < classes_per_batch {
            break;
        }
        // prefer the classes with the most chunks left so the epoch uses as
        // much data as possible; ties are broken at random
        open.shuffle(rng);
        open.sort_by_key(|&c| std::cmp::Reverse(chunks[c].1.len()));
        let mut batch = Vec::with_capacity(classes_per_batch * m);
        for &c in &open[..classes_per_batch] {
            batch.extend(chunks[c].1.pop().expect("open class has a chunk"));
        }
        batches.push(batch);
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// `batch_size / m` classes per batch, `m` samples each, drawn without
/// replacement within the epoch.
pub fn m_per_class_batches(labels: &[Label], batch_size: usize, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let classes_per_batch = check_shape(batch_size, m)?;
    let pool: Vec<usize> = (0..labels.len()).collect();
    sample_pool(labels, &pool, classes_per_batch, m, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Visits every pair of super-categories and applies the m-per-class
/// strategy to the classes of that pair. Pairs that cannot fill a batch are
/// skipped with a warning.
pub fn category_pair_batches(
    labels: &[Label],
    categories: &BTreeMap<Label, Category>,
    batch_size: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let classes_per_batch = check_shape(batch_size, m)?;
    let mut cats: Vec<Category> = categories.values().copied().collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.len() < 2 {
        return Err(Error::Infeasible(format!("need at least 2 categories, got {}", cats.len())));
    }
    if let Some(l) = labels.iter().find(|l| !categories.contains_key(l)) {
        return Err(Error::Domain(format!("class {l} has no category")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (a, &ca) in cats.iter().enumerate() {
        for &cb in &cats[a + 1..] {
            let pool: Vec<usize> = (0..labels.len())
                .filter(|&i| matches!(categories.get(&labels[i]), Some(&c) if c == ca || c == cb))
                .collect();
            match sample_pool(labels, &pool, classes_per_batch, m, &mut rng) {
                Ok(b) => out.extend(b),
                Err(e) => log::warn!("skipping category pair ({ca}, {cb}): {e}"),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labels(classes: u32, per_class: usize) -> Vec<Label> {
        (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
    }

    #[test]
    fn two_classes_of_four() {
        let l = labels(6, 8);
        let batches = m_per_class_batches(&l, 8, 4, 1).unwrap();
        assert_eq!(batches.len(), 6);
        let mut seen = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 8);
            let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
            for &i in b {
                *counts.entry(l[i]).or_default() += 1;
                assert!(seen.insert(i), "index {i} drawn twice in one epoch");
            }
            assert_eq!(counts.len(), 2);
            assert!(counts.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let l = labels(4, 4);
        assert!(matches!(m_per_class_batches(&l, 8, 1, 0), Err(Error::Infeasible(_))));
        assert!(m_per_class_batches(&l, 6, 4, 0).is_err());
        assert!(m_per_class_batches(&l, 20, 4, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let l = labels(8, 12);
        assert_eq!(m_per_class_batches(&l, 32, 4, 3).unwrap(), m_per_class_batches(&l, 32, 4, 3).unwrap());
        assert_ne!(m_per_class_batches(&l, 32, 4, 3).unwrap(), m_per_class_batches(&l, 32, 4, 4).unwrap());
    }

    fn cats(n_cat: u32, per: u32) -> BTreeMap<Label, Category> {
        (0..n_cat * per).map(|c| (c, c / per)).collect()
    }

    #[test]
    fn category_pairs_single_pair() {
        let l = labels(8, 4);
        let c = cats(2, 4);
        let batches = category_pair_batches(&l, &c, 8, 2, 1).unwrap();
        assert!(!batches.is_empty());
        for b in &batches {
            let present: BTreeSet<Category> = b.iter().map(|&i| c[&l[i]]).collect();
            assert!(present.len() <= 2);
        }
    }

    #[test]
    fn category_pairs_visit_every_pair() {
        let l = labels(6, 4);
        let c = cats(3, 2);
        // 4 classes per batch: exactly the classes of one pair
        let batches = category_pair_batches(&l, &c, 8, 2, 1).unwrap();
        let pairs: BTreeSet<BTreeSet<Category>> = batches.iter().map(|b| b.iter().map(|&i| c[&l[i]]).collect()).collect();
        assert_eq!(pairs.len(), 3);
        assert_eq!(batches, category_pair_batches(&l, &c, 8, 2, 1).unwrap());
    }

    #[test]
    fn category_pairs_skip_infeasible() {
        let l = labels(4, 4);
        let c: BTreeMap<Label, Category> = [(0, 0), (1, 0), (2, 1), (3, 2)].into_iter().collect();
        // pair (1, 2) has only two classes: 3 classes per batch cannot be met
        let batches = category_pair_batches(&l, &c, 6, 2, 0).unwrap();
        for b in &batches {
            let present: BTreeSet<Category> = b.iter().map(|&i| c[&l[i]]).collect();
            assert!(present.contains(&0));
        }
        assert!(category_pair_batches(&l, &[(0, 0), (1, 0), (2, 0), (3, 0)].into_iter().collect(), 4, 2, 0).is_err());
    }
}
