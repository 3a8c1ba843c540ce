//! Acceptance suite.
//!
//! Runs every criterion in order, prints one `PASS`/`FAIL` line per
//! criterion with the measured quantities, and exits non-zero when any
//! criterion fails. A criterion that panics is reported as a failure and the
//! remaining criteria still run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use roadmap::decomp::{refined_bound, worst_case_bound, BatchCalibration, BatchCounts, CalibrationStats};
use roadmap::metrics::{exact_ap, map_at_r};
use roadmap::oracle::{enumerate_worst_dg, grad_check, random_instance, sort_based_ap, three_point_toy};
use roadmap::surrogates::{delta_from, smoothap_loss, supap_loss};
use roadmap::train::{
    generate_synthetic_split, train, Dataset, LrSchedule, OptimizerConfig, SamplerConfig, SyntheticConfig, TrainConfig,
};
use roadmap::{LossConfig, LossKind, SurrogateConfig};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    if elapsed > limit {
        out.passed = false;
    }
    out.detail = format!("{}; {:.2}s (limit {}s)", out.detail, elapsed.as_secs_f64(), limit.as_secs());
    out
}

fn upper_bound_suite() -> Outcome {
    timed(Duration::from_secs(10), || {
        let cfg = SurrogateConfig::default();
        let mut violations = 0;
        let mut min_margin = f64::INFINITY;
        for trial in 0..10_000 {
            let (s, inst) = random_instance(trial);
            let ap_loss = 1.0 - exact_ap(&s, &inst).unwrap();
            let sup = supap_loss(&s, &inst, &cfg).unwrap().value;
            min_margin = min_margin.min(sup - ap_loss);
            if sup < ap_loss - 1e-12 {
                violations += 1;
            }
        }
        let (s, inst) = three_point_toy();
        let witness_smooth = smoothap_loss(&s, &inst, &cfg).unwrap().value;
        let witness_ap = 1.0 - exact_ap(&s, &inst).unwrap();
        Outcome::new(
            violations == 0 && witness_smooth < witness_ap,
            format!(
                "supap >= AP loss on 10000 instances ({violations} violations, min margin {min_margin:.3e}); \
                 smoothap witness {witness_smooth:.6} < AP loss {witness_ap:.6}"
            ),
        )
    })
}

fn gradient_suite() -> Outcome {
    timed(Duration::from_secs(30), || {
        let cfg = SurrogateConfig::default();
        let lcfg = LossConfig::default();
        let mut passed = true;
        let mut parts = Vec::new();
        for kind in LossKind::ALL {
            let r = grad_check(kind, random_instance, 100, 1e-4, &cfg, &lcfg, 1e-6).unwrap();
            passed &= r.passed;
            parts.push(format!("{kind} max rel err {:.2e} ({} checked, {} skipped)", r.max_rel_err, r.checked, r.skipped));
        }
        Outcome::new(passed, parts.join(", "))
    })
}

fn toy_example() -> Outcome {
    let cfg = SurrogateConfig::default();
    let (s, inst) = three_point_toy();
    let smooth = smoothap_loss(&s, &inst, &cfg).unwrap().grad;
    let sup = supap_loss(&s, &inst, &cfg).unwrap().grad;
    let antisym = smooth[0] + smooth[1];
    let smooth_ok = antisym.abs() <= 1e-9 && smooth[2].abs() < 1e-6;
    let sup_ok = sup[2] > 0.0 && sup[0] <= 0.0 && sup[1] <= 0.0;
    Outcome::new(
        smooth_ok && sup_ok,
        format!(
            "smoothap dL/ds1 + dL/ds2 = {antisym:.3e} (need |.| <= 1e-9), |dL/ds3| = {:.3e} (need < 1e-6); \
             supap dL/ds = [{:.4}, {:.4}, {:.4}]",
            smooth[2].abs(),
            sup[0],
            sup[1],
            sup[2]
        ),
    )
}

fn delta_formula() -> Outcome {
    let d = delta_from(0.01_f64, 0.01).unwrap();
    Outcome::new((d - 0.04595).abs() <= 1e-5, format!("delta(0.01, 0.01) = {d:.8}"))
}

/// Multisets of batch compositions (at least one positive each) with at
/// most `max_total` elements overall.
fn partitions(max_total: usize) -> Vec<Vec<BatchCounts>> {
    let shapes: Vec<BatchCounts> = (1..=max_total)
        .flat_map(|p| (0..=max_total - p).map(move |n| BatchCounts::new(p, n)))
        .collect();
    let mut out = Vec::new();
    fn extend(shapes: &[BatchCounts], from: usize, left: usize, cur: &mut Vec<BatchCounts>, out: &mut Vec<Vec<BatchCounts>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        for i in from..shapes.len() {
            let size = shapes[i].positives + shapes[i].negatives;
            if size <= left {
                cur.push(shapes[i]);
                extend(shapes, i, left - size, cur, out);
                cur.pop();
            }
        }
    }
    extend(&shapes, 0, max_total, &mut Vec::new(), &mut out);
    out
}

fn calibration_stats_grid() -> Vec<CalibrationStats> {
    let mut batch_options = Vec::new();
    for p in 1..=3 {
        for n in 0..=3 {
            for g_pos in 0..=p {
                for g_neg in 0..=n {
                    batch_options.push(BatchCalibration { g_pos, e_pos: p - g_pos, g_neg, e_neg: n - g_neg });
                }
            }
        }
    }
    let mut out = Vec::new();
    for k in 1..=3u32 {
        let total = batch_options.len().pow(k);
        for code in 0..total {
            let mut c = code;
            let batches = (0..k)
                .map(|_| {
                    let b = batch_options[c % batch_options.len()];
                    c /= batch_options.len();
                    b
                })
                .collect();
            out.push(CalibrationStats { batches });
        }
    }
    out
}

fn dg_bound_suite() -> Outcome {
    timed(Duration::from_secs(60), || {
        let parts = partitions(10);
        let mut above = 0;
        let mut mismatched = 0;
        for counts in &parts {
            let dg = enumerate_worst_dg(counts).unwrap();
            let bound: f64 = worst_case_bound(counts);
            if dg > bound + 1e-12 {
                above += 1;
            }
            if (dg - bound).abs() > 1e-12 {
                mismatched += 1;
            }
        }
        let pair = [BatchCounts::new(1, 1), BatchCounts::new(1, 1)];
        let tight = enumerate_worst_dg(&pair).unwrap();
        let tight_bound: f64 = worst_case_bound(&pair);
        let tight_ok = (tight - 1.0 / 6.0).abs() < 1e-12 && (tight_bound - 1.0 / 6.0).abs() < 1e-12;

        let grid = calibration_stats_grid();
        let mut refined_above = 0;
        let mut worst_excess: f64 = 0.0;
        let mut satisfied_nonzero = 0;
        for stats in &grid {
            let counts: Vec<BatchCounts> = stats.batches.iter().map(BatchCalibration::counts).collect();
            let refined: f64 = refined_bound(stats);
            let worst: f64 = worst_case_bound(&counts);
            if refined > worst + 1e-12 {
                refined_above += 1;
                worst_excess = worst_excess.max(refined - worst);
            }
            if stats.batches.iter().all(|b| b.e_pos == 0 && b.e_neg == 0) && refined != 0.0 {
                satisfied_nonzero += 1;
            }
        }
        Outcome::new(
            above == 0 && tight_ok && refined_above == 0 && satisfied_nonzero == 0,
            format!(
                "{} partitions (<= 10 elements): enumerated dg above the worst-case bound in {above}, \
                 differing from it in {mismatched}; K=2 (1,1)/(1,1) dg {tight:.6} bound {tight_bound:.6}; \
                 refined > worst-case in {refined_above}/{} calibration stats (largest excess {worst_excess:.4}); \
                 refined != 0 with all constraints met in {satisfied_nonzero}",
                parts.len(),
                grid.len()
            ),
        )
    })
}

fn oracle_equivalence() -> Outcome {
    let (mut checked, mut duplicates, mut ap_mismatch, mut map_r_above) = (0, 0, 0, 0);
    let mut worst: f64 = 0.0;
    let mut trial = 0;
    while checked < 10_000 {
        let (s, inst) = random_instance(trial);
        trial += 1;
        let Ok(oracle) = sort_based_ap(&s, &inst) else {
            duplicates += 1;
            continue;
        };
        let ap = exact_ap(&s, &inst).unwrap();
        worst = worst.max((ap - oracle).abs());
        if (ap - oracle).abs() > 1e-12 {
            ap_mismatch += 1;
        }
        if map_at_r(&s, &inst).unwrap() > ap {
            map_r_above += 1;
        }
        checked += 1;
    }
    Outcome::new(
        ap_mismatch == 0 && map_r_above == 0,
        format!(
            "{checked} distinct-score instances ({duplicates} with ties regenerated): max |exact - sorted| {worst:.2e}, \
             {ap_mismatch} mismatches, mAP@R > AP in {map_r_above}"
        ),
    )
}

fn recipe(loss: LossKind, lambda: f64, batch_size: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(loss, 50);
    cfg.loss_cfg = LossConfig::default().with_lambda(lambda).unwrap();
    cfg.sampler = SamplerConfig::MPerClass { batch_size, m: 4 };
    cfg.optimizer = OptimizerConfig::adam(LrSchedule::step_decay(1e-3, 50));
    cfg.seed = seed;
    cfg
}

fn synthetic(sigma: f64, seed: u64) -> (Dataset, Dataset) {
    generate_synthetic_split(&SyntheticConfig { classes: 8, per_class: 16, feature_dim: 32, noise_sigma: sigma, seed }).unwrap()
}

fn final_map_at_r(data: &(Dataset, Dataset), cfg: &TrainConfig) -> f64 {
    let cfg = TrainConfig { probe_batches: 0, ..cfg.clone() };
    train(&data.0, Some(&data.1), &cfg).unwrap().history.last().unwrap().metrics.map_at_r
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_training() -> Outcome {
    timed(Duration::from_secs(120), || {
        let data = synthetic(0.1, 7);
        let out = train(&data.0, Some(&data.1), &recipe(LossKind::Roadmap, 0.5, 32, 1)).unwrap();
        let m = &out.history.last().unwrap().metrics;
        let r1 = m.recall(1).unwrap();
        Outcome::new(
            m.map_at_r >= 0.95 && r1 == 1.0,
            format!("ROADMAP, C=8, 16/class, dim 32 -> 16, sigma 0.1, batch 32, m 4, 50 epochs: test mAP@R {:.4}, R@1 {r1:.4}", m.map_at_r),
        )
    })
}

/// Harder clusters for the comparative criteria; each seed draws its own data.
const COMPARE_SIGMA: f64 = 0.2;

fn batch_size_shape() -> Outcome {
    let gain = |batch: usize| {
        mean(SEEDS.iter().map(|&s| {
            let data = synthetic(COMPARE_SIGMA, s);
            final_map_at_r(&data, &recipe(LossKind::Roadmap, 0.5, batch, s)) - final_map_at_r(&data, &recipe(LossKind::SupAp, 0.0, batch, s))
        }))
    };
    let (g8, g32) = (gain(8), gain(32));
    Outcome::new(
        g8 > g32 && g8 >= 0.0 && g32 >= 0.0,
        format!("mean mAP@R gain of ROADMAP over SupAP (sigma {COMPARE_SIGMA}, 5 seeds): batch 8 {g8:+.4}, batch 32 {g32:+.4}"),
    )
}

fn lambda_shape() -> Outcome {
    let at = |lambda: f64| {
        mean(SEEDS.iter().map(|&s| final_map_at_r(&synthetic(COMPARE_SIGMA, s), &recipe(LossKind::Roadmap, lambda, 32, s))))
    };
    let grid = [0.0, 0.2, 0.5, 0.8, 1.0];
    let scores: Vec<f64> = grid.iter().map(|&l| at(l)).collect();
    let ends = scores[0].max(scores[4]);
    let interior = scores[1].min(scores[2]).min(scores[3]);
    let listed: Vec<String> = grid.iter().zip(&scores).map(|(l, v)| format!("{l}: {v:.4}")).collect();
    Outcome::new(interior > ends, format!("mean mAP@R by lambda (sigma {COMPARE_SIGMA}, 5 seeds, batch 32): {}", listed.join(", ")))
}

fn gap_reduction() -> Outcome {
    let data = synthetic(0.1, 7);
    let probe = |loss: LossKind, lambda: f64| {
        mean(SEEDS.iter().map(|&s| {
            let out = train(&data.0, Some(&data.1), &recipe(loss, lambda, 32, s)).unwrap();
            out.history.last().unwrap().probe.as_ref().expect("probe split has positives in every batch").dg
        }))
    };
    let (roadmap, supap) = (probe(LossKind::Roadmap, 0.5), probe(LossKind::SupAp, 0.0));
    Outcome::new(
        roadmap < supap,
        format!("mean held-out dg (4 stratified batches, 5 seeds): ROADMAP {roadmap:.4e}, SupAP {supap:.4e}"),
    )
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_roadmap");
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let ok = |cmd: &mut Command| {
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    ok(Command::new(bin).args(["gen", "--classes", "8", "--per-class", "16", "--dim", "32", "--sigma", "0.1", "--seed", "7", "--out"]).arg(p("d.csv")));
    for run in ["a", "b"] {
        ok(Command::new(bin)
            .args(["train", "--loss", "roadmap", "--batch", "32", "--m", "4", "--epochs", "50", "--seed", "1", "--data"])
            .arg(p("d.csv"))
            .arg("--ckpt")
            .arg(p(&format!("{run}.bin")))
            .arg("--history")
            .arg(p(&format!("{run}.jsonl"))));
    }
    let read = |name: &str| std::fs::read(p(name)).unwrap();
    let same_ckpt = read("a.bin") == read("b.bin");
    let same_hist = read("a.jsonl") == read("b.jsonl");
    Outcome::new(
        same_ckpt && same_hist,
        format!("checkpoints identical: {same_ckpt} ({} bytes), histories identical: {same_hist}", read("a.bin").len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("upper-bound suite", upper_bound_suite),
        ("gradient suite", gradient_suite),
        ("three-point toy example", toy_example),
        ("delta formula", delta_formula),
        ("decomposability-gap bounds", dg_bound_suite),
        ("oracle equivalence", oracle_equivalence),
        ("desk-scale training", desk_training),
        ("batch-size sensitivity", batch_size_shape),
        ("lambda sweep interior optimum", lambda_shape),
        ("decomposability-gap reduction", gap_reduction),
        ("CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        if !outcome.passed {
            failed += 1;
        }
        println!("{} criterion {:>2} {name}: {}", if outcome.passed { "PASS" } else { "FAIL" }, i + 1, outcome.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
