//! Decomposability gap of AP and its analytic upper bounds.
//!
//! For one query, splitting the retrieval set into `K` batches and averaging
//! the per-batch APs over-estimates the AP of the whole set. The gap is
//!
//! ```text
//! DG = 1/K Σ_b AP^b − AP
//! ```
//!
//! When every batch is perfectly ranked, the worst global ranking juxtaposes
//! the batches one after the other. [`worst_case_bound`] evaluates the AP of
//! that juxtaposition; [`refined_bound`] does the same using how many items
//! of each batch respect the calibration thresholds.
//!
//! Both bound expressions depend on the order in which batches are
//! juxtaposed. They are evaluated at the worst order, found by dynamic
//! programming over batch compositions; with equally composed batches every
//! order gives the same value.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embedding::{build_instance, cosine_similarity, EmbeddingMatrix, Label, RankingInstance};
use crate::metrics::exact_ap;
use crate::{Error, Result, Scalar};

/// Largest DP table explored when searching the worst juxtaposition order.
const MAX_ORDER_STATES: usize = 1 << 22;

/// Batch id (`0..k`) of every retrieval-set element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchAssignment {
    k: usize,
    membership: Vec<usize>,
}

impl BatchAssignment {
    pub fn new(k: usize, membership: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("need at least one batch".into()));
        }
        if let Some((i, b)) = membership.iter().enumerate().find(|(_, &b)| b >= k) {
            return Err(Error::Domain(format!("element {i} assigned to batch {b}, but only {k} batches exist")));
        }
        Ok(Self { k, membership })
    }

    /// Consecutive runs of (nearly) equal length.
    pub fn contiguous(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n.max(1) {
            return Err(Error::Domain(format!("cannot split {n} elements into {k} batches")));
        }
        Self::new(k, (0..n).map(|i| i * k / n).collect())
    }

    /// Uniform random split into batches whose sizes differ by at most one.
    pub fn random(n: usize, k: usize, seed: u64) -> Result<Self> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::dealt(n, k, &order)
    }

    /// Random split that spreads every class as evenly as possible over the
    /// batches, so each batch sees positives for as many queries as possible.
    pub fn stratified(labels: &[Label], k: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut order = Vec::with_capacity(labels.len());
        for members in by_class.values_mut() {
            members.shuffle(&mut rng);
            order.extend_from_slice(members);
        }
        Self::dealt(labels.len(), k, &order)
    }

    fn dealt(n: usize, k: usize, order: &[usize]) -> Result<Self> {
        if k == 0 || k > n.max(1) {
            return Err(Error::Domain(format!("cannot split {n} elements into {k} batches")));
        }
        let mut membership = vec![0; n];
        for (t, &i) in order.iter().enumerate() {
            membership[i] = t % k;
        }
        Self::new(k, membership)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    /// Restricts `instance` to each batch.
    pub fn split(&self, instance: &RankingInstance) -> Result<Vec<RankingInstance>> {
        instance.check_indices(self.membership.len())?;
        let mut parts: Vec<RankingInstance> = (0..self.k)
            .map(|_| RankingInstance { query: instance.query, positives: Vec::new(), negatives: Vec::new() })
            .collect();
        for &j in &instance.positives {
            parts[self.membership[j]].positives.push(j);
        }
        for &j in &instance.negatives {
            parts[self.membership[j]].negatives.push(j);
        }
        Ok(parts)
    }

    /// Per-batch positive and negative counts for `instance`.
    pub fn counts(&self, instance: &RankingInstance) -> Result<Vec<BatchCounts>> {
        Ok(self
            .split(instance)?
            .iter()
            .map(|p| BatchCounts { positives: p.positives.len(), negatives: p.negatives.len() })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BatchCounts {
    pub positives: usize,
    pub negatives: usize,
}

impl BatchCounts {
    pub fn new(positives: usize, negatives: usize) -> Self {
        Self { positives, negatives }
    }
}

/// Threshold bookkeeping for one batch: `G` counts items that respect their
/// calibration constraint, `E` those that violate it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BatchCalibration {
    /// Positives with `s ≥ α`.
    pub g_pos: usize,
    /// Positives with `s < α`.
    pub e_pos: usize,
    /// Negatives with `s ≤ β`.
    pub g_neg: usize,
    /// Negatives with `s > β`.
    pub e_neg: usize,
}

impl BatchCalibration {
    pub fn counts(&self) -> BatchCounts {
        BatchCounts { positives: self.g_pos + self.e_pos, negatives: self.g_neg + self.e_neg }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CalibrationStats {
    pub batches: Vec<BatchCalibration>,
}

pub fn calibration_stats<T: Scalar>(
    scores: &[T],
    instance: &RankingInstance,
    assignment: &BatchAssignment,
    alpha: T,
    beta: T,
) -> Result<CalibrationStats> {
    if !(beta < alpha) {
        return Err(Error::Domain(format!("thresholds need beta < alpha, got alpha={alpha} beta={beta}")));
    }
    instance.check_indices(scores.len())?;
    let batches = assignment
        .split(instance)?
        .iter()
        .map(|part| {
            let g_pos = part.positives.iter().filter(|&&j| scores[j] >= alpha).count();
            let g_neg = part.negatives.iter().filter(|&&j| scores[j] <= beta).count();
            BatchCalibration {
                g_pos,
                e_pos: part.positives.len() - g_pos,
                g_neg,
                e_neg: part.negatives.len() - g_neg,
            }
        })
        .collect();
    Ok(CalibrationStats { batches })
}

/// Running totals over the batches already placed ahead of the current one.
#[derive(Debug, Clone, Copy, Default)]
struct Prefix {
    positives: usize,
    negatives: usize,
    g_pos: usize,
    e_neg: usize,
}

impl Prefix {
    fn add(&mut self, b: &BatchCalibration, times: usize) {
        let c = b.counts();
        self.positives += times * c.positives;
        self.negatives += times * c.negatives;
        self.g_pos += times * b.g_pos;
        self.e_neg += times * b.e_neg;
    }
}

/// `Σ_{j=1..n} (j + a) / (j + a + b)`
fn ratio_sum<T: Scalar>(n: usize, a: usize, b: usize) -> T {
    (1..=n)
        .map(|j| T::from_count(j + a) / T::from_count(j + a + b))
        .sum()
}

/// Precision mass of one batch under the worst-case juxtaposition.
fn worst_term<T: Scalar>(b: &BatchCalibration, pre: &Prefix) -> T {
    ratio_sum(b.counts().positives, pre.positives, pre.negatives)
}

/// Precision mass of one batch under the calibration-refined juxtaposition.
fn refined_term<T: Scalar>(b: &BatchCalibration, pre: &Prefix) -> T {
    ratio_sum::<T>(b.g_pos, pre.g_pos, pre.e_neg) + ratio_sum::<T>(b.e_pos, b.g_pos + pre.positives, pre.negatives)
}

fn total_positives(batches: &[BatchCalibration]) -> usize {
    batches.iter().map(|b| b.counts().positives).sum()
}

fn bound_in_order<T: Scalar>(batches: &[BatchCalibration], term: fn(&BatchCalibration, &Prefix) -> T) -> T {
    let n_pos = total_positives(batches);
    if n_pos == 0 {
        return T::zero();
    }
    let mut pre = Prefix::default();
    let mut mass = T::zero();
    for b in batches {
        mass = mass + term(b, &pre);
        pre.add(b, 1);
    }
    T::one() - mass / T::from_count(n_pos)
}

/// Evaluates `1 − mass/|P|` at the batch order that minimises the total
/// precision mass. Identical batches are interchangeable, so the search runs
/// over how many batches of each composition have been placed.
fn bound_worst_order<T: Scalar>(batches: &[BatchCalibration], term: fn(&BatchCalibration, &Prefix) -> T) -> T {
    let n_pos = total_positives(batches);
    if n_pos == 0 {
        return T::zero();
    }
    let mut kinds: BTreeMap<BatchCalibration, usize> = BTreeMap::new();
    for b in batches {
        *kinds.entry(*b).or_default() += 1;
    }
    let kinds: Vec<(BatchCalibration, usize)> = kinds.into_iter().collect();
    if kinds.len() == 1 {
        return bound_in_order(batches, term);
    }

    let mut radix = Vec::with_capacity(kinds.len());
    let mut states = 1usize;
    for (_, mult) in &kinds {
        radix.push(states);
        states = match states.checked_mul(mult + 1) {
            Some(s) if s <= MAX_ORDER_STATES => s,
            _ => {
                log::warn!("too many distinct batch compositions to search the worst order; using the given order");
                return bound_in_order(batches, term);
            }
        };
    }

    let mut best = vec![T::infinity(); states];
    best[0] = T::zero();
    let mut used = vec![0usize; kinds.len()];
    for state in 0..states {
        // decode mixed-radix state into per-kind usage
        let mut rest = state;
        for (t, (_, mult)) in kinds.iter().enumerate().rev() {
            used[t] = rest / radix[t];
            rest %= radix[t];
            debug_assert!(used[t] <= *mult);
        }
        let here = best[state];
        if !here.is_finite() {
            continue;
        }
        let mut pre = Prefix::default();
        for (t, (b, _)) in kinds.iter().enumerate() {
            pre.add(b, used[t]);
        }
        for (t, (b, mult)) in kinds.iter().enumerate() {
            if used[t] < *mult {
                let next = state + radix[t];
                let cand = here + term(b, &pre);
                if cand < best[next] {
                    best[next] = cand;
                }
            }
        }
    }
    T::one() - best[states - 1] / T::from_count(n_pos)
}

fn as_uncalibrated(counts: &[BatchCounts]) -> Vec<BatchCalibration> {
    // every item violates: the refined expression then reduces to the worst case
    counts
        .iter()
        .map(|c| BatchCalibration { g_pos: 0, e_pos: c.positives, g_neg: 0, e_neg: c.negatives })
        .collect()
}

/// Upper bound on the gap when every batch is perfectly ranked, taken over
/// the worst juxtaposition of the batches.
pub fn worst_case_bound<T: Scalar>(counts: &[BatchCounts]) -> T {
    bound_worst_order(&as_uncalibrated(counts), worst_term)
}

/// The worst-case expression with batches juxtaposed in the given order.
pub fn worst_case_bound_in_order<T: Scalar>(counts: &[BatchCounts]) -> T {
    bound_in_order(&as_uncalibrated(counts), worst_term)
}

/// Calibration-refined bound, taken over the worst juxtaposition order.
///
/// Respecting positives are ranked only behind respecting positives and
/// violating negatives of earlier batches; violating positives behind
/// everything earlier plus their own batch's respecting positives.
pub fn refined_bound<T: Scalar>(stats: &CalibrationStats) -> T {
    bound_worst_order(&stats.batches, refined_term)
}

/// The refined expression with batches juxtaposed in the given order.
pub fn refined_bound_in_order<T: Scalar>(stats: &CalibrationStats) -> T {
    bound_in_order(&stats.batches, refined_term)
}

/// Gap measurement for one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DgReport {
    pub batch_aps: Vec<f64>,
    pub global_ap: f64,
    pub dg: f64,
    pub bound_worst: f64,
    pub bound_refined: Option<f64>,
    /// Whether every batch AP equals one, the regime the bounds are derived for.
    pub assumption_met: bool,
}

/// Measured gap and worst-case bound for one query.
pub fn decomposability_gap<T: Scalar>(
    scores: &[T],
    instance: &RankingInstance,
    assignment: &BatchAssignment,
) -> Result<DgReport> {
    analyze(scores, instance, assignment, None)
}

/// Measured gap, worst-case bound and, when thresholds `(α, β)` are given,
/// the refined bound.
pub fn analyze<T: Scalar>(
    scores: &[T],
    instance: &RankingInstance,
    assignment: &BatchAssignment,
    thresholds: Option<(T, T)>,
) -> Result<DgReport> {
    instance.validate_for(scores.len())?;
    let parts = assignment.split(instance)?;
    if let Some(b) = parts.iter().position(|p| p.positives.is_empty()) {
        return Err(Error::EmptyBatch { batch: b });
    }
    let batch_aps = parts.iter().map(|p| exact_ap(scores, p)).collect::<Result<Vec<T>>>()?;
    let global_ap = exact_ap(scores, instance)?;
    let mean_batch = batch_aps.iter().copied().sum::<T>() / T::from_count(batch_aps.len());
    let counts: Vec<BatchCounts> = parts
        .iter()
        .map(|p| BatchCounts::new(p.positives.len(), p.negatives.len()))
        .collect();

    let bound_refined = match thresholds {
        Some((alpha, beta)) => {
            let stats = calibration_stats(scores, instance, assignment, alpha, beta)?;
            Some(refined_bound::<T>(&stats).as_f64())
        }
        None => None,
    };
    let assumption_met = batch_aps.iter().all(|&ap| ap == T::one());
    if !assumption_met {
        log::debug!("batch AP below one: bounds are evaluated outside the regime they hold for");
    }
    Ok(DgReport {
        batch_aps: batch_aps.iter().map(|a| a.as_f64()).collect(),
        global_ap: global_ap.as_f64(),
        dg: (mean_batch - global_ap).as_f64(),
        bound_worst: worst_case_bound::<T>(&counts).as_f64(),
        bound_refined,
        assumption_met,
    })
}

/// Gap statistics averaged over every query of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetGap {
    pub dg: f64,
    pub bound_worst: f64,
    pub bound_refined: Option<f64>,
    pub queries: usize,
    /// Queries whose class has no other member.
    pub skipped: usize,
    /// Fraction of queries whose batches were all perfectly ranked.
    pub assumption_met: f64,
}

/// Uses each element as a query against the rest; the assignment covers all
/// elements and the query's own slot is ignored.
///
/// Fails, naming the query, when some batch holds none of its positives.
pub fn dataset_gap<T: Scalar>(
    embeddings: &EmbeddingMatrix<T>,
    labels: &[Label],
    assignment: &BatchAssignment,
    thresholds: Option<(T, T)>,
) -> Result<DatasetGap> {
    if embeddings.rows() != labels.len() || assignment.membership().len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings, {} labels, {} batch ids",
            embeddings.rows(),
            labels.len(),
            assignment.membership().len()
        )));
    }
    let (mut dg, mut worst, mut refined, mut met) = (0.0, 0.0, 0.0, 0usize);
    let (mut queries, mut skipped) = (0usize, 0usize);
    for i in 0..labels.len() {
        let instance = build_instance(labels, i)?;
        if instance.is_flagged() {
            skipped += 1;
            continue;
        }
        let scores = cosine_similarity(embeddings.row(i), embeddings)?;
        let report = analyze(&scores, &instance, assignment, thresholds).map_err(|e| match e {
            Error::EmptyBatch { batch } => Error::Domain(format!("query {i}: batch {batch} holds none of its positives")),
            other => other,
        })?;
        dg += report.dg;
        worst += report.bound_worst;
        refined += report.bound_refined.unwrap_or(0.0);
        met += usize::from(report.assumption_met);
        queries += 1;
    }
    if queries == 0 {
        return Err(Error::NoValidQuery);
    }
    let n = queries as f64;
    Ok(DatasetGap {
        dg: dg / n,
        bound_worst: worst / n,
        bound_refined: thresholds.map(|_| refined / n),
        queries,
        skipped,
        assumption_met: met as f64 / n,
    })
}
