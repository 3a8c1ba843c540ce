//! Smooth rank surrogates and the AP-based losses built on them.
//!
//! For one query with positives `P` and negatives `N`, the AP of a score
//! vector is
//!
//! ```text
//! AP = 1/|P| Σ_{k∈P} rank⁺(k) / (rank⁺(k) + rank⁻(k))
//! rank⁺(k) = 1 + Σ_{j∈P\{k}} H(s_j − s_k)      rank⁻(k) = Σ_{j∈N} H(s_j − s_k)
//! ```
//!
//! with `H(t) = 1` iff `t ≥ 0`. SupAP keeps the true step for `rank⁺` and
//! replaces it by [`h_minus`] in `rank⁻`. Because `H⁻ ≥ H` everywhere the
//! resulting loss never under-estimates `1 − AP`, and its linear branch keeps
//! a constant gradient on negatives that outrank a positive.
//!
//! All losses return the value together with its gradient with respect to the
//! full score vector. Entries that are not part of the instance (typically the
//! query's own score) receive a zero gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::RankingInstance;
use crate::{Error, Result, Scalar};

/// `τ·ln((1−ε)/ε)`: the offset past which the temperature-`τ` sigmoid has a
/// derivative below `ε`.
pub fn delta_from<T: Scalar>(tau: T, epsilon: T) -> Result<T> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    if !(epsilon > T::zero() && epsilon < T::lit(0.5)) {
        return Err(Error::Domain(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    Ok(tau * ((T::one() - epsilon) / epsilon).ln())
}

/// Shape parameters of the smooth rank surrogates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSurrogate<T>", into = "RawSurrogate<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct SurrogateConfig<T> {
    tau: T,
    rho: T,
    epsilon: T,
}

#[derive(Serialize, Deserialize)]
struct RawSurrogate<T> {
    tau: T,
    rho: T,
    epsilon: T,
}

impl<T: Scalar> TryFrom<RawSurrogate<T>> for SurrogateConfig<T> {
    type Error = Error;

    fn try_from(r: RawSurrogate<T>) -> Result<Self> {
        Self::new(r.tau, r.rho, r.epsilon)
    }
}

impl<T> From<SurrogateConfig<T>> for RawSurrogate<T> {
    fn from(c: SurrogateConfig<T>) -> Self {
        Self { tau: c.tau, rho: c.rho, epsilon: c.epsilon }
    }
}

impl<T: Scalar> SurrogateConfig<T> {
    pub fn new(tau: T, rho: T, epsilon: T) -> Result<Self> {
        delta_from(tau, epsilon)?;
        if !(rho >= T::zero()) || !rho.is_finite() {
            return Err(Error::Domain(format!("rho must be a finite value >= 0, got {rho}")));
        }
        Ok(Self { tau, rho, epsilon })
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn delta(&self) -> T {
        self.tau * ((T::one() - self.epsilon) / self.epsilon).ln()
    }
}

impl<T: Scalar> Default for SurrogateConfig<T> {
    fn default() -> Self {
        Self { tau: T::lit(0.01), rho: T::lit(100.0), epsilon: T::lit(0.01) }
    }
}

/// Mixing weight between SupAP and calibration, and the calibration
/// thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLoss<T>", into = "RawLoss<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct LossConfig<T> {
    lambda: T,
    alpha: T,
    beta: T,
}

#[derive(Serialize, Deserialize)]
struct RawLoss<T> {
    lambda: T,
    alpha: T,
    beta: T,
}

impl<T: Scalar> TryFrom<RawLoss<T>> for LossConfig<T> {
    type Error = Error;

    fn try_from(r: RawLoss<T>) -> Result<Self> {
        Self::new(r.lambda, r.alpha, r.beta)
    }
}

impl<T> From<LossConfig<T>> for RawLoss<T> {
    fn from(c: LossConfig<T>) -> Self {
        Self { lambda: c.lambda, alpha: c.alpha, beta: c.beta }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn new(lambda: T, alpha: T, beta: T) -> Result<Self> {
        if !(lambda >= T::zero() && lambda <= T::one()) {
            return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        if !alpha.is_finite() || !beta.is_finite() || !(beta < alpha) {
            return Err(Error::Domain(format!("thresholds need beta < alpha, got alpha={alpha} beta={beta}")));
        }
        Ok(Self { lambda, alpha, beta })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn with_lambda(self, lambda: T) -> Result<Self> {
        Self::new(lambda, self.alpha, self.beta)
    }
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self { lambda: T::lit(0.5), alpha: T::lit(0.9), beta: T::lit(0.6) }
    }
}

/// Which objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    SupAp,
    SmoothAp,
    Calibration,
    Roadmap,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::SupAp, LossKind::SmoothAp, LossKind::Calibration, LossKind::Roadmap];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::SupAp => "supap",
            LossKind::SmoothAp => "smoothap",
            LossKind::Calibration => "calibration",
            LossKind::Roadmap => "roadmap",
        }
    }

    pub fn evaluate<T: Scalar>(
        self,
        scores: &[T],
        instance: &RankingInstance,
        cfg: &SurrogateConfig<T>,
        lcfg: &LossConfig<T>,
    ) -> Result<LossOutput<T>> {
        match self {
            LossKind::SupAp => supap_loss(scores, instance, cfg),
            LossKind::SmoothAp => smoothap_loss(scores, instance, cfg),
            LossKind::Calibration => {
                instance.validate_for(scores.len())?;
                calibration_loss(scores, instance, lcfg)
            }
            LossKind::Roadmap => roadmap_loss(scores, instance, cfg, lcfg),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Domain(format!("unknown loss '{s}' (expected supap, smoothap, calibration or roadmap)")))
    }
}

/// Scalar loss and its gradient with respect to every score.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Vec<T>,
}

impl<T: Scalar> LossOutput<T> {
    fn zeros(n: usize) -> Self {
        Self { value: T::zero(), grad: vec![T::zero(); n] }
    }
}

/// Smooth upper bound of the step function used for negatives.
///
/// `t = 0` belongs to the shifted-sigmoid branch, so `H⁻(0) = 1 = H(0)`.
pub fn h_minus<T: Scalar>(t: T, cfg: &SurrogateConfig<T>) -> T {
    let half = T::lit(0.5);
    let delta = cfg.delta();
    if t < T::zero() {
        (t / cfg.tau).sigmoid()
    } else if t <= delta {
        (t / cfg.tau).sigmoid() + half
    } else {
        cfg.rho * (t - delta) + (delta / cfg.tau).sigmoid() + half
    }
}

/// Derivative of [`h_minus`]. At the jump (`t = 0`) and the joint (`t = δ`)
/// the middle-branch derivative is returned.
pub fn h_minus_grad<T: Scalar>(t: T, cfg: &SurrogateConfig<T>) -> T {
    if t > cfg.delta() {
        cfg.rho
    } else {
        (t / cfg.tau).sigmoid_prime() / cfg.tau
    }
}

/// Exact `rank⁺` and `rank⁻` of every positive, in the order of
/// `instance.positives`. Ties count against the positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactRanks {
    pub rank_plus: Vec<usize>,
    pub rank_minus: Vec<usize>,
}

pub fn exact_ranks<T: Scalar>(scores: &[T], instance: &RankingInstance) -> Result<ExactRanks> {
    instance.validate_for(scores.len())?;
    let mut rank_plus = Vec::with_capacity(instance.positives.len());
    let mut rank_minus = Vec::with_capacity(instance.positives.len());
    for &k in &instance.positives {
        let sk = scores[k];
        let above_pos = instance.positives.iter().filter(|&&j| j != k && scores[j] >= sk).count();
        let above_neg = instance.negatives.iter().filter(|&&j| scores[j] >= sk).count();
        rank_plus.push(1 + above_pos);
        rank_minus.push(above_neg);
    }
    Ok(ExactRanks { rank_plus, rank_minus })
}

/// `rank_s⁻(k) = Σ_{j∈N} H⁻(s_j − s_k)` for every positive `k`.
pub fn smooth_neg_rank<T: Scalar>(scores: &[T], instance: &RankingInstance, cfg: &SurrogateConfig<T>) -> Result<Vec<T>> {
    instance.validate_for(scores.len())?;
    Ok(instance
        .positives
        .iter()
        .map(|&k| instance.negatives.iter().map(|&j| h_minus(scores[j] - scores[k], cfg)).sum())
        .collect())
}

/// Exact and smoothed ranks of every positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RankBreakdown<T> {
    pub rank_plus: Vec<usize>,
    pub rank_minus: Vec<usize>,
    pub smooth_rank_minus: Vec<T>,
}

impl<T: Scalar> RankBreakdown<T> {
    pub fn compute(scores: &[T], instance: &RankingInstance, cfg: &SurrogateConfig<T>) -> Result<Self> {
        let ExactRanks { rank_plus, rank_minus } = exact_ranks(scores, instance)?;
        let smooth_rank_minus = smooth_neg_rank(scores, instance, cfg)?;
        Ok(Self { rank_plus, rank_minus, smooth_rank_minus })
    }
}

/// SupAP: `1 − 1/|P| Σ_k rank⁺(k) / (rank⁺(k) + rank_s⁻(k))`.
///
/// `rank⁺` uses the true step and is treated as a constant, so the gradient
/// reaches the scores only through `rank_s⁻`.
pub fn supap_loss<T: Scalar>(scores: &[T], instance: &RankingInstance, cfg: &SurrogateConfig<T>) -> Result<LossOutput<T>> {
    let ExactRanks { rank_plus, .. } = exact_ranks(scores, instance)?;
    let n_pos = T::from_count(instance.positives.len());
    let mut out = LossOutput::zeros(scores.len());
    let mut precision_sum = T::zero();

    for (&k, &rp) in instance.positives.iter().zip(&rank_plus) {
        let rp = T::from_count(rp);
        let sk = scores[k];
        let rs: T = instance.negatives.iter().map(|&j| h_minus(scores[j] - sk, cfg)).sum();
        let denom = rp + rs;
        precision_sum = precision_sum + rp / denom;

        // ∂L/∂rank_s⁻(k)
        let coef = rp / (n_pos * denom * denom);
        for &j in &instance.negatives {
            let g = coef * h_minus_grad(scores[j] - sk, cfg);
            out.grad[j] = out.grad[j] + g;
            out.grad[k] = out.grad[k] - g;
        }
    }
    out.value = T::one() - precision_sum / n_pos;
    Ok(out)
}

/// SmoothAP baseline: both rank terms use a temperature-`τ` sigmoid.
pub fn smoothap_loss<T: Scalar>(scores: &[T], instance: &RankingInstance, cfg: &SurrogateConfig<T>) -> Result<LossOutput<T>> {
    instance.validate_for(scores.len())?;
    let tau = cfg.tau;
    let n_pos = T::from_count(instance.positives.len());
    let mut out = LossOutput::zeros(scores.len());
    let mut precision_sum = T::zero();

    for &k in &instance.positives {
        let sk = scores[k];
        let soft = |j: usize| ((scores[j] - sk) / tau).sigmoid();
        let rp = T::one() + instance.positives.iter().filter(|&&j| j != k).map(|&j| soft(j)).sum::<T>();
        let rm: T = instance.negatives.iter().map(|&j| soft(j)).sum();
        let denom = rp + rm;
        precision_sum = precision_sum + rp / denom;

        let d_plus = -rm / (n_pos * denom * denom);
        let d_minus = rp / (n_pos * denom * denom);
        for (j, is_pos) in instance.members() {
            if j == k {
                continue;
            }
            let coef = if is_pos { d_plus } else { d_minus };
            let g = coef * ((scores[j] - sk) / tau).sigmoid_prime() / tau;
            out.grad[j] = out.grad[j] + g;
            out.grad[k] = out.grad[k] - g;
        }
    }
    out.value = T::one() - precision_sum / n_pos;
    Ok(out)
}

/// Hinge penalties pulling positives above `α` and negatives below `β`.
///
/// An empty side contributes zero; the subgradient at equality is zero.
pub fn calibration_loss<T: Scalar>(scores: &[T], instance: &RankingInstance, lcfg: &LossConfig<T>) -> Result<LossOutput<T>> {
    if instance.is_empty() {
        return Err(Error::EmptyInstance);
    }
    instance.check_indices(scores.len())?;
    let mut out = LossOutput::zeros(scores.len());

    if !instance.positives.is_empty() {
        let w = T::one() / T::from_count(instance.positives.len());
        for &j in &instance.positives {
            let gap = lcfg.alpha - scores[j];
            if gap > T::zero() {
                out.value = out.value + w * gap;
                out.grad[j] = out.grad[j] - w;
            }
        }
    }
    if !instance.negatives.is_empty() {
        let w = T::one() / T::from_count(instance.negatives.len());
        for &j in &instance.negatives {
            let gap = scores[j] - lcfg.beta;
            if gap > T::zero() {
                out.value = out.value + w * gap;
                out.grad[j] = out.grad[j] + w;
            }
        }
    }
    Ok(out)
}

/// `(1 − λ)·SupAP + λ·calibration`.
pub fn roadmap_loss<T: Scalar>(
    scores: &[T],
    instance: &RankingInstance,
    cfg: &SurrogateConfig<T>,
    lcfg: &LossConfig<T>,
) -> Result<LossOutput<T>> {
    let sup = supap_loss(scores, instance, cfg)?;
    let cal = calibration_loss(scores, instance, lcfg)?;
    let lambda = lcfg.lambda;
    let keep = T::one() - lambda;
    Ok(LossOutput {
        value: keep * sup.value + lambda * cal.value,
        grad: sup.grad.iter().zip(&cal.grad).map(|(&a, &b)| keep * a + lambda * b).collect(),
    })
}
