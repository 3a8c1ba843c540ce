//! Exact retrieval metrics: AP, Recall@K and mAP@R.
//!
//! Where a metric needs a retrieval order, elements are sorted by descending
//! score with ties broken by ascending element index. [`exact_ap`] does not
//! sort; it counts, and ties count against the positive.

use std::collections::BTreeMap;

use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::embedding::{build_instance, cosine_similarity, EmbeddingMatrix, Label, RankingInstance};
use crate::surrogates::exact_ranks;
use crate::{Error, Result, Scalar};

/// Average precision of one query computed from exact ranks.
pub fn exact_ap<T: Scalar>(scores: &[T], instance: &RankingInstance) -> Result<T> {
    let ranks = exact_ranks(scores, instance)?;
    let sum: T = ranks
        .rank_plus
        .iter()
        .zip(&ranks.rank_minus)
        .map(|(&p, &m)| T::from_count(p) / T::from_count(p + m))
        .sum();
    Ok(sum / T::from_count(instance.positives.len()))
}

/// Retrieval-set members in retrieval order, paired with their positive flag.
pub fn retrieval_order<T: Scalar>(scores: &[T], instance: &RankingInstance) -> Vec<(usize, bool)> {
    let mut order: Vec<(usize, bool)> = instance.members().collect();
    order.sort_by(|a, b| {
        scores[b.0]
            .partial_cmp(&scores[a.0])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    order
}

/// Whether a positive appears among the `k` best-scored elements. `k` larger
/// than the retrieval set is clamped.
pub fn recall_at_k<T: Scalar>(scores: &[T], instance: &RankingInstance, k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::Domain("recall@k needs k >= 1".into()));
    }
    instance.check_indices(scores.len())?;
    Ok(retrieval_order(scores, instance).iter().take(k).any(|&(_, pos)| pos))
}

/// AP truncated to the first `R = |P|` retrieved elements.
///
/// Bounded above by [`exact_ap`] whenever scores are distinct.
pub fn map_at_r<T: Scalar>(scores: &[T], instance: &RankingInstance) -> Result<T> {
    instance.validate_for(scores.len())?;
    let r = instance.positives.len();
    let mut hits = 0usize;
    let mut sum = T::zero();
    for (rank, &(_, pos)) in retrieval_order(scores, instance).iter().take(r).enumerate() {
        if pos {
            hits += 1;
            sum = sum + T::from_count(hits) / T::from_count(rank + 1);
        }
    }
    Ok(sum / T::from_count(r))
}

/// Dataset-level metrics, averaged over queries that have a positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub map: f64,
    pub map_at_r: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub query_count: usize,
    pub skipped: usize,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut m = serializer.serialize_map(Some(4 + self.recall_at.len()))?;
        m.serialize_entry("map", &self.map)?;
        m.serialize_entry("map_at_r", &self.map_at_r)?;
        for (k, v) in &self.recall_at {
            m.serialize_entry(&format!("recall@{k}"), v)?;
        }
        m.serialize_entry("queries", &self.query_count)?;
        m.serialize_entry("skipped", &self.skipped)?;
        m.end()
    }
}

/// Uses every element as a query against all the others.
pub fn evaluate<T: Scalar>(embeddings: &EmbeddingMatrix<T>, labels: &[Label], ks: &[usize]) -> Result<MetricsReport> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if labels.len() < 2 {
        return Err(Error::Domain("evaluation needs at least two elements".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Domain("recall@k needs k >= 1".into()));
    }

    let mut ap_sum = 0.0;
    let mut map_r_sum = 0.0;
    let mut recall_sums = vec![0usize; ks.len()];
    let mut count = 0usize;
    let mut skipped = 0usize;
    for i in 0..labels.len() {
        let instance = build_instance(labels, i)?;
        if instance.is_flagged() {
            skipped += 1;
            continue;
        }
        let scores = cosine_similarity(embeddings.row(i), embeddings)?;
        ap_sum += exact_ap(&scores, &instance)?.as_f64();
        map_r_sum += map_at_r(&scores, &instance)?.as_f64();
        let order = retrieval_order(&scores, &instance);
        let first_hit = order.iter().position(|&(_, pos)| pos).unwrap_or(usize::MAX);
        for (sum, &k) in recall_sums.iter_mut().zip(ks) {
            if first_hit < k {
                *sum += 1;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidQuery);
    }
    let n = count as f64;
    Ok(MetricsReport {
        map: ap_sum / n,
        map_at_r: map_r_sum / n,
        recall_at: ks.iter().zip(&recall_sums).map(|(&k, &c)| (k, c as f64 / n)).collect(),
        query_count: count,
        skipped,
    })
}
