//! Independent reference machinery.
//!
//! Nothing here shares code paths with the implementations it checks: AP is
//! recomputed by sorting, worst-case gaps by enumerating global orderings,
//! and gradients by central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decomp::BatchCounts;
use crate::embedding::RankingInstance;
use crate::surrogates::{LossConfig, LossKind, SurrogateConfig};
use crate::{Error, Result, Scalar};

/// Largest instance [`enumerate_worst_dg`] accepts.
pub const ENUMERATION_LIMIT: usize = 12;

/// Relative errors use `max(|analytic|, |numeric|, GRAD_SCALE_FLOOR)` as the
/// denominator, so coordinates with vanishing gradients are compared in
/// absolute terms. Central differences with `h = 1e-6` on losses of order one
/// carry about `1e-10` of rounding error; this floor keeps that at `1e-5`
/// relative.
pub const GRAD_SCALE_FLOOR: f64 = 1e-5;

/// Coordinates closer than this many steps to a kink are skipped.
pub const BOUNDARY_RADIUS_STEPS: f64 = 10.0;

/// AP by sorting the retrieval set. Requires distinct scores.
pub fn sort_based_ap<T: Scalar>(scores: &[T], instance: &RankingInstance) -> Result<T> {
    instance.validate_for(scores.len())?;
    let mut items: Vec<(T, usize, bool)> = instance.members().map(|(i, pos)| (scores[i], i, pos)).collect();
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    if let Some(w) = items.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateScores(w[0].1.min(w[1].1), w[0].1.max(w[1].1)));
    }
    let mut hits = 0usize;
    let mut sum = T::zero();
    for (r, &(_, _, pos)) in items.iter().enumerate() {
        if pos {
            hits += 1;
            sum = sum + T::from_count(hits) / T::from_count(r + 1);
        }
    }
    Ok(sum / T::from_count(hits))
}

/// Largest gap over every global ordering in which each batch is perfectly
/// ranked (its positives above its negatives).
pub fn enumerate_worst_dg(batches: &[BatchCounts]) -> Result<f64> {
    let total: usize = batches.iter().map(|b| b.positives + b.negatives).sum();
    if total > ENUMERATION_LIMIT {
        return Err(Error::TooLarge { elements: total, limit: ENUMERATION_LIMIT });
    }
    if batches.is_empty() || batches.iter().any(|b| b.positives == 0) {
        return Err(Error::Domain("every batch needs at least one positive".into()));
    }
    let n_pos: usize = batches.iter().map(|b| b.positives).sum();

    // Every batch has AP 1, so the gap is 1 − global AP; minimise the
    // global precision mass over interleavings.
    struct Walk<'a> {
        batches: &'a [BatchCounts],
        taken: Vec<usize>,
        best: f64,
    }
    impl Walk<'_> {
        fn go(&mut self, placed: usize, hits: usize, mass: f64) {
            if mass >= self.best {
                return;
            }
            let mut any = false;
            for b in 0..self.batches.len() {
                let t = self.taken[b];
                let size = self.batches[b].positives + self.batches[b].negatives;
                if t == size {
                    continue;
                }
                any = true;
                let is_pos = t < self.batches[b].positives;
                self.taken[b] += 1;
                if is_pos {
                    let h = hits + 1;
                    self.go(placed + 1, h, mass + h as f64 / (placed + 1) as f64);
                } else {
                    self.go(placed + 1, hits, mass);
                }
                self.taken[b] -= 1;
            }
            if !any {
                self.best = mass;
            }
        }
    }
    let mut walk = Walk { batches, taken: vec![0; batches.len()], best: f64::INFINITY };
    walk.go(0, 0, 0.0);
    Ok(1.0 - walk.best / n_pos as f64)
}

fn near(x: f64, target: f64, radius: f64) -> bool {
    (x - target).abs() <= radius
}

/// Whether moving score `j` by up to the skip radius could cross a kink or
/// jump of `kind`.
fn near_boundary<T: Scalar>(
    kind: LossKind,
    scores: &[T],
    instance: &RankingInstance,
    cfg: &SurrogateConfig<T>,
    lcfg: &LossConfig<T>,
    j: usize,
    radius: f64,
) -> bool {
    let s = |i: usize| scores[i].as_f64();
    let is_pos = instance.positives.contains(&j);
    let is_neg = instance.negatives.contains(&j);
    let ranked = matches!(kind, LossKind::SupAp | LossKind::Roadmap);
    let hinged = matches!(kind, LossKind::Calibration | LossKind::Roadmap);
    let delta = cfg.delta().as_f64();

    if ranked {
        let kinks = |t: f64| near(t, 0.0, radius) || near(t, delta, radius);
        if is_pos {
            if instance.negatives.iter().any(|&n| kinks(s(n) - s(j))) {
                return true;
            }
            // the exact rank⁺ jumps when two positives swap
            if instance.positives.iter().any(|&p| p != j && near(s(p), s(j), radius)) {
                return true;
            }
        }
        if is_neg && instance.positives.iter().any(|&k| kinks(s(j) - s(k))) {
            return true;
        }
    }
    if hinged {
        if is_pos && near(s(j), lcfg.alpha().as_f64(), radius) {
            return true;
        }
        if is_neg && near(s(j), lcfg.beta().as_f64(), radius) {
            return true;
        }
    }
    false
}

/// Central-difference gradient estimate with boundary flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient<T> {
    pub grad: Vec<T>,
    pub skipped: Vec<bool>,
}

pub fn finite_diff_grad<T: Scalar>(
    kind: LossKind,
    scores: &[T],
    instance: &RankingInstance,
    cfg: &SurrogateConfig<T>,
    lcfg: &LossConfig<T>,
    h: T,
) -> Result<FdGradient<T>> {
    if !(h > T::zero()) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let radius = BOUNDARY_RADIUS_STEPS * h.as_f64();
    let mut work = scores.to_vec();
    let mut grad = Vec::with_capacity(scores.len());
    let mut skipped = Vec::with_capacity(scores.len());
    for j in 0..scores.len() {
        let orig = work[j];
        work[j] = orig + h;
        let up = kind.evaluate(&work, instance, cfg, lcfg)?.value;
        work[j] = orig - h;
        let down = kind.evaluate(&work, instance, cfg, lcfg)?.value;
        work[j] = orig;
        grad.push((up - down) / (h + h));
        skipped.push(near_boundary(kind, scores, instance, cfg, lcfg, j, radius));
    }
    Ok(FdGradient { grad, skipped })
}

/// Random instance: `|P|, |N|` uniform on `1..=20`, scores uniform on
/// `[−1, 1]`, seeded by the trial index.
pub fn random_instance(trial: u64) -> (Vec<f64>, RankingInstance) {
    random_instance_sized(trial, 20, 20)
}

pub fn random_instance_sized(trial: u64, max_pos: usize, max_neg: usize) -> (Vec<f64>, RankingInstance) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ trial);
    let p = rng.random_range(1..=max_pos);
    let n = rng.random_range(1..=max_neg);
    let scores: Vec<f64> = (0..p + n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let instance = RankingInstance { query: crate::QueryIndex::External, positives: (0..p).collect(), negatives: (p..p + n).collect() };
    (scores, instance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradPair {
    pub trial: u64,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub trials: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
    pub pairs: Vec<GradPair>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_SCALE_FLOOR)
}

/// Compares analytic and finite-difference gradients over `trials`
/// generated instances. Passes iff the worst relative error over
/// non-skipped coordinates is below `tolerance`.
pub fn grad_check<G>(
    kind: LossKind,
    mut generator: G,
    trials: u64,
    tolerance: f64,
    cfg: &SurrogateConfig<f64>,
    lcfg: &LossConfig<f64>,
    step: f64,
) -> Result<GradCheckReport>
where
    G: FnMut(u64) -> (Vec<f64>, RankingInstance),
{
    if trials == 0 {
        return Err(Error::Domain("grad check needs at least one trial".into()));
    }
    let mut pairs = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    let (mut checked, mut skipped) = (0usize, 0usize);
    for trial in 0..trials {
        let (scores, instance) = generator(trial);
        let analytic = kind.evaluate(&scores, &instance, cfg, lcfg)?;
        let numeric = finite_diff_grad(kind, &scores, &instance, cfg, lcfg, step)?;
        for j in 0..scores.len() {
            let (a, n, skip) = (analytic.grad[j], numeric.grad[j], numeric.skipped[j]);
            if skip {
                skipped += 1;
            } else {
                checked += 1;
                max_rel_err = max_rel_err.max(relative_error(a, n));
            }
            pairs.push(GradPair { trial, index: j, analytic: a, numeric: n, skipped: skip });
        }
    }
    Ok(GradCheckReport {
        loss: kind,
        trials,
        step,
        tolerance,
        max_rel_err,
        checked,
        skipped,
        passed: max_rel_err < tolerance,
        pairs,
    })
}

/// The three-point example contrasting SmoothAP and SupAP: two positives
/// `s₁ < s₂` with `s₂ − s₁ = 0.01` and a negative `s₃` with `s₃ − s₂ = 0.13`.
pub fn three_point_toy() -> (Vec<f64>, RankingInstance) {
    let s1 = 0.5;
    let s2 = s1 + 0.01;
    let s3 = s2 + 0.13;
    (vec![s1, s2, s3], RankingInstance { query: crate::QueryIndex::External, positives: vec![0, 1], negatives: vec![2] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::worst_case_bound;
    use crate::metrics::exact_ap;
    use approx::assert_relative_eq;

    fn inst(p: &[usize], n: &[usize]) -> RankingInstance {
        RankingInstance::new(p.to_vec(), n.to_vec()).unwrap()
    }

    #[test]
    fn sort_based_ap_examples() {
        let i = inst(&[0, 1], &[2]);
        let s = [0.9, 0.7, 0.8];
        assert_relative_eq!(sort_based_ap(&s, &i).unwrap(), 5.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(sort_based_ap(&s, &i).unwrap(), exact_ap(&s, &i).unwrap(), epsilon = 1e-15);
        assert_eq!(sort_based_ap(&[0.9, 0.8, 0.1], &i).unwrap(), 1.0);
        assert_relative_eq!(sort_based_ap(&[0.1, 0.8, 0.9], &inst(&[0], &[1, 2])).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(sort_based_ap(&[0.5, 0.5, 0.1], &i), Err(Error::DuplicateScores(0, 1))));
    }

    #[test]
    fn enumeration_examples() {
        let b = |p, n| BatchCounts::new(p, n);
        assert_relative_eq!(enumerate_worst_dg(&[b(1, 1), b(1, 1)]).unwrap(), 1.0 / 6.0, epsilon = 1e-15);
        assert_eq!(enumerate_worst_dg(&[b(3, 4)]).unwrap(), 0.0);
        let e = enumerate_worst_dg(&[b(2, 2), b(2, 2)]).unwrap();
        assert_relative_eq!(e, worst_case_bound::<f64>(&[b(2, 2), b(2, 2)]), epsilon = 1e-12);
        assert_relative_eq!(e, 0.18333, epsilon = 1e-5);
        assert!(matches!(enumerate_worst_dg(&[b(7, 6)]), Err(Error::TooLarge { .. })));
        assert!(enumerate_worst_dg(&[b(0, 2), b(1, 1)]).is_err());
    }

    #[test]
    fn fd_flat_region() {
        let cfg = SurrogateConfig::default();
        let lcfg = LossConfig::default();
        // satisfied hinges: calibration loss is identically zero nearby
        let fd = finite_diff_grad(LossKind::Calibration, &[0.95, 0.2], &inst(&[0], &[1]), &cfg, &lcfg, 1e-6).unwrap();
        assert!(fd.grad.iter().all(|g: &f64| g.abs() < 1e-10));
    }

    #[test]
    fn fd_hinge_slope() {
        let cfg = SurrogateConfig::default();
        let lcfg = LossConfig::default();
        let fd = finite_diff_grad(LossKind::Calibration, &[0.5, 0.7, 0.1], &inst(&[0, 1], &[2]), &cfg, &lcfg, 1e-6).unwrap();
        assert_relative_eq!(fd.grad[0], -0.5, epsilon = 1e-8);
        assert!(!fd.skipped[0]);
    }

    #[test]
    fn fd_skips_kinks() {
        let cfg = SurrogateConfig::default();
        let lcfg = LossConfig::default();
        let delta = cfg.delta();
        let s = [0.2, 0.2 + delta + 2e-6, 0.9 + 3e-6];
        let i = inst(&[0, 2], &[1]);
        let fd = finite_diff_grad(LossKind::Roadmap, &s, &i, &cfg, &lcfg, 1e-6).unwrap();
        assert_eq!(fd.skipped, vec![true, true, true]);
        let fd = finite_diff_grad(LossKind::SmoothAp, &s, &i, &cfg, &lcfg, 1e-6).unwrap();
        assert_eq!(fd.skipped, vec![false, false, false]);
        assert!(finite_diff_grad(LossKind::SupAp, &s, &i, &cfg, &lcfg, 0.0).is_err());
    }

    #[test]
    fn grad_check_small_runs() {
        let cfg = SurrogateConfig::default();
        let lcfg = LossConfig::default();
        for kind in LossKind::ALL {
            let r = grad_check(kind, random_instance, 10, 1e-4, &cfg, &lcfg, 1e-6).unwrap();
            assert!(r.passed, "{kind}: {}", r.max_rel_err);
            assert_eq!(r.checked + r.skipped, r.pairs.len());
        }
        let r = grad_check(LossKind::SupAp, random_instance, 5, 1e-12, &cfg, &lcfg, 1e-6).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn random_instances_are_reproducible() {
        assert_eq!(random_instance(7), random_instance(7));
        let (s, i) = random_instance(3);
        assert!(s.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!((1..=20).contains(&i.positives.len()) && (1..=20).contains(&i.negatives.len()));
    }
}
