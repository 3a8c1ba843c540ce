//! Embedding containers, cosine scoring and per-query ranking instances.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Integer class id attached to each element of a retrieval set.
pub type Label = u32;

/// Dense row-major matrix of embeddings, one element per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    rows: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Shape(format!("embedding matrix must be non-empty, got {rows}x{dim}")));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!("row {r} has length {}, expected {dim}", rows[r].len())));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn zeros(rows: usize, dim: usize) -> Result<Self> {
        Self::new(rows, dim, vec![T::zero(); rows * dim])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Shape(format!("row {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dim, data)
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn checked_norm<T: Scalar>(v: &[T], what: &'static str, row: usize) -> Result<T> {
    let n = norm(v);
    if n > T::zero() && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::ZeroNorm { what, row })
    }
}

fn check_dims<T: Scalar>(query: &[T], gallery: &EmbeddingMatrix<T>) -> Result<()> {
    if query.len() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query has dimension {}, gallery has {}",
            query.len(),
            gallery.dim()
        )));
    }
    Ok(())
}

/// Cosine similarity of `query` against every gallery row.
///
/// Rows are normalised here; callers pass raw embeddings.
pub fn cosine_similarity<T: Scalar>(query: &[T], gallery: &EmbeddingMatrix<T>) -> Result<Vec<T>> {
    check_dims(query, gallery)?;
    let qn = checked_norm(query, "query", 0)?;
    (0..gallery.rows())
        .map(|j| {
            let g = gallery.row(j);
            let gn = checked_norm(g, "gallery", j)?;
            Ok(dot(query, g) / (qn * gn))
        })
        .collect()
}

/// Gradient of `Σ_j upstream[j] · cos(query, gallery_j)` with respect to the
/// query and to every gallery row.
pub fn cosine_similarity_backward<T: Scalar>(
    query: &[T],
    gallery: &EmbeddingMatrix<T>,
    upstream: &[T],
) -> Result<(Vec<T>, EmbeddingMatrix<T>)> {
    check_dims(query, gallery)?;
    if upstream.len() != gallery.rows() {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries for {} gallery rows",
            upstream.len(),
            gallery.rows()
        )));
    }
    let d = query.len();
    let qn = checked_norm(query, "query", 0)?;
    let q_hat: Vec<T> = query.iter().map(|&x| x / qn).collect();

    let mut grad_q = vec![T::zero(); d];
    let mut grad_g = EmbeddingMatrix::zeros(gallery.rows(), d)?;
    for (j, &u) in upstream.iter().enumerate() {
        let g = gallery.row(j);
        let gn = checked_norm(g, "gallery", j)?;
        if u == T::zero() {
            continue;
        }
        let s = dot(&q_hat, g) / gn;
        let out = grad_g.row_mut(j);
        for k in 0..d {
            let g_hat = g[k] / gn;
            // ∂s/∂q = (ĝ − s·q̂)/‖q‖ and ∂s/∂g = (q̂ − s·ĝ)/‖g‖
            grad_q[k] = grad_q[k] + u * (g_hat - s * q_hat[k]) / qn;
            out[k] = u * (q_hat[k] - s * g_hat) / gn;
        }
    }
    Ok((grad_q, grad_g))
}

/// Where the query of a [`RankingInstance`] lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryIndex {
    /// The query is element `i` of the retrieval set and is excluded from it.
    Element(usize),
    /// The query is not part of the retrieval set.
    External,
}

/// A query's partition of the retrieval set into positives and negatives.
///
/// Indices refer to positions in the score vector the instance is used with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingInstance {
    pub query: QueryIndex,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl RankingInstance {
    /// Builds an instance for an external query from explicit index sets.
    pub fn new(positives: Vec<usize>, negatives: Vec<usize>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &i in positives.iter().chain(&negatives) {
            if !seen.insert(i) {
                return Err(Error::Domain(format!("index {i} appears twice in the instance")));
            }
        }
        Ok(Self { query: QueryIndex::External, positives, negatives })
    }

    /// Instance for an external query carrying `query_label`: every element
    /// of `labels` is either a positive or a negative.
    pub fn external(labels: &[Label], query_label: Label) -> Self {
        let (positives, negatives) = (0..labels.len()).partition(|&j| labels[j] == query_label);
        Self { query: QueryIndex::External, positives, negatives }
    }

    /// True when the query has no positive, in which case metrics skip it and
    /// losses reject it.
    pub fn is_flagged(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that every index addresses a score, and that the instance has
    /// a positive.
    pub fn validate_for(&self, n_scores: usize) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::NoPositives);
        }
        self.check_indices(n_scores)
    }

    pub(crate) fn check_indices(&self, n_scores: usize) -> Result<()> {
        if let Some(&i) = self.positives.iter().chain(&self.negatives).find(|&&i| i >= n_scores) {
            return Err(Error::Shape(format!("instance index {i} out of range for {n_scores} scores")));
        }
        Ok(())
    }

    /// Retrieval-set indices (positives then negatives) with a membership flag.
    pub fn members(&self) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.positives
            .iter()
            .map(|&i| (i, true))
            .chain(self.negatives.iter().map(|&i| (i, false)))
    }
}

/// Partitions `labels` for the in-set query at `query_index`.
///
/// The query itself belongs to neither side. A query whose class has no other
/// member comes back flagged (see [`RankingInstance::is_flagged`]).
pub fn build_instance(labels: &[Label], query_index: usize) -> Result<RankingInstance> {
    let Some(&ql) = labels.get(query_index) else {
        return Err(Error::Shape(format!(
            "query index {query_index} out of range for {} labels",
            labels.len()
        )));
    };
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if j == query_index {
            continue;
        }
        if l == ql {
            positives.push(j);
        } else {
            negatives.push(j);
        }
    }
    Ok(RankingInstance { query: QueryIndex::Element(query_index), positives, negatives })
}
