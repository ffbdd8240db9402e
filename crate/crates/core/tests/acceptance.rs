//! Acceptance criteria, one pass/fail line each.  Exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;
use umdlab::bellman::{MartingaleTree, ModifiedMartingale};
use umdlab::normlab::{hilbert_demo, opnorm_l2, shift_scaling_study, umd_probe, TestFunction, DENSE_CAP};
use umdlab::rng::trial_rng;
use umdlab::schur::{multiplier_norm_lower, project_alpha, random_sign_matrix, KG_DEFAULT};
use umdlab::shift::{operator_matrix, series_bound, ShiftSpec};
use umdlab::studies::{exact_identity_suite, lambda_equivalence_rows, lemma_rows, ratio_summary};
use umdlab::{DyadicInterval, DyadicSystem, SpaceSpec, StepFunction};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, limit: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = run();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = out.pass && in_time;
    println!(
        "[{}] {name}: {} ({:.1}s of {:.0}s)",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    pass
}

fn identities() -> Outcome {
    let out = exact_identity_suite(8, 100, 2024).expect("identity suite runs");
    let failed: Vec<String> = out
        .iter()
        .filter(|o| o.failures > 0)
        .map(|o| format!("{} ({}/{})", o.name, o.failures, o.instances))
        .collect();
    Outcome {
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} identities x 100 instances at depth 8, zero failures", out.len())
        } else {
            format!("failures: {}", failed.join(", "))
        },
    }
}

fn bounds() -> Outcome {
    let sys = DyadicSystem::standard(0, 8).unwrap();
    let mut rng = trial_rng(81, 0);
    let mut worst_l2 = 0.0f64;
    for _ in 0..150 {
        let k = rng.random_range(1..=3u32);
        let big = k - 1;
        let small = rng.random_range(0..=big);
        let (m, n) = if rng.random::<bool>() {
            (big, small)
        } else {
            (small, big)
        };
        let s = ShiftSpec::<f64>::random_extremal(m, n, &sys, &mut rng).unwrap();
        let mat = operator_matrix(&s, &sys, 1, DENSE_CAP).unwrap();
        worst_l2 = worst_l2.max(opnorm_l2(&mat).unwrap().lower);
    }
    let l2_ok = worst_l2 <= 1.0 + 1e-9;

    let umd = umd_probe(&SpaceSpec::scalar(4.0).unwrap(), 8, 200, 82).unwrap();
    let umd_ok = umd.value <= 3.0 + 1e-6;

    let space = SpaceSpec::scalar(2.0).unwrap();
    let mut weights_ok = true;
    let mut trees = Vec::new();
    for k in 1..=4u32 {
        let s = DyadicSystem::standard(0, k).unwrap();
        let mut r = trial_rng(83, k as u64);
        let f = StepFunction::random_uniform(s.clone(), 1, &mut r);
        let g = StepFunction::random_uniform(s, 1, &mut r);
        trees.push(MartingaleTree::from_functions(&f, &g, DyadicInterval::ROOT, k, space).unwrap());
    }
    for t in 0..10_000u64 {
        let k = 1 + (t % 4) as u32;
        let mut r = trial_rng(84, t);
        let n = 1usize << k;
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-0.25..=0.25)).collect();
        let alpha = project_alpha(&y);
        let tree = &trees[k as usize - 1];
        let mm = ModifiedMartingale::new(tree, &alpha, k).unwrap();
        let c = mm.check(tree);
        weights_ok &= c.theta_bounds && c.weight_bounds;
    }

    let mut worst_sign = 0.0f64;
    let mut sign_ok = true;
    for k in 1..=4u32 {
        let bound = 2f64.powf(k as f64 / 2.0);
        for t in 0..50u64 {
            let mut r = trial_rng(85 + k as u64, t);
            let m = random_sign_matrix(1 << k, &mut r);
            let lower = multiplier_norm_lower(&m, 8, t).lower;
            worst_sign = worst_sign.max(lower / bound);
            sign_ok &= lower <= bound + 1e-9;
        }
    }
    Outcome {
        pass: l2_ok && umd_ok && weights_ok && sign_ok,
        detail: format!(
            "max L2 norm {worst_l2:.12} (<= 1+1e-9: {l2_ok}); umd_probe(p=4) {:.6} (<= 3+1e-6: {umd_ok}); \
             theta/a bounds on 1e4 alpha: {weights_ok}; max sign multiplier / 2^(k/2) {worst_sign:.6} ({sign_ok})",
            umd.value
        ),
    }
}

fn lambda_equivalence() -> Outcome {
    let rows = lambda_equivalence_rows(&[1, 2, 3], 500, 86, KG_DEFAULT);
    let s = ratio_summary(&rows);
    let hard = rows.iter().all(|r| r.scaling_16);
    let upper = rows.iter().filter_map(|r| r.ratio).all(|v| v <= 192.0 + 1e-6);
    Outcome {
        pass: hard && upper,
        detail: format!(
            "16*norm1 <= norm2 on all 500: {hard}; ratio min {:.6} median {:.3} max {:.3}, \
             {} of {} below 64, all <= 192+1e-6: {upper}; bins [16,32,64,128,192,inf) = {:?}",
            s.min, s.median, s.max, s.below_64, s.count, s.histogram
        ),
    }
}

fn lemma() -> Outcome {
    let rows = lemma_rows(&[1, 2], 200, 2.0, 3, 17, 87, KG_DEFAULT).unwrap();
    // The α search does not involve the oracle, so every instance with
    // Λ ≠ 0 is checked; a zero Bellman drop only removes c_emp.
    let live: Vec<_> = rows.iter().filter(|r| r.sum_abs_lambda > 0.0).collect();
    let threshold = 1.0 / (192.0 * KG_DEFAULT);
    let min_c = live.iter().map(|r| r.achieved_c).fold(f64::INFINITY, f64::min);
    let pass = live.iter().all(|r| r.achieved_c >= threshold);
    let degenerate = rows.iter().filter(|r| r.degenerate).count();
    let mut cemp: Vec<f64> = rows.iter().filter_map(|r| r.c_emp).collect();
    cemp.sort_by(f64::total_cmp);
    Outcome {
        pass,
        detail: format!(
            "{} of 200 with nonzero lambda, {degenerate} with zero Bellman drop; \
             min achieved_c {min_c:.5} >= {threshold:.5}; c_emp min {:.5} median {:.5} max {:.5}",
            live.len(),
            cemp.first().unwrap_or(&f64::NAN),
            cemp.get(cemp.len() / 2).unwrap_or(&f64::NAN),
            cemp.last().unwrap_or(&f64::NAN)
        ),
    }
}

fn scaling() -> Outcome {
    let rep = shift_scaling_study(&[1, 2, 3, 4, 5], &SpaceSpec::scalar(4.0).unwrap(), 50, 8, 88).unwrap();
    let within = rep
        .trials
        .iter()
        .all(|t| t.norm_lower <= rep.fitted_c * umdlab::normlab::growth(t.k) * 3.0 * (1.0 + 1e-12));
    let spread = rep.implied_spread().unwrap_or(f64::INFINITY);
    let growth = rep.implied_growth().unwrap_or(0.0);
    let cs: Vec<String> = rep.rows.iter().map(|r| format!("{:.4}", r.implied_c)).collect();
    Outcome {
        pass: within && spread <= 10.0,
        detail: format!(
            "fitted_c {:.4}; all below bound: {within}; per-k implied c [{}], max/min {spread:.2} (<= 10); \
             largest c_k'/c_k for k<k' {growth:.3}",
            rep.fitted_c,
            cs.join(", ")
        ),
    }
}

fn hilbert() -> Outcome {
    let rep = hilbert_demo(2000, 10, TestFunction::standard_bump(), 89).unwrap();
    let res = rep.relative_residual.unwrap_or(f64::INFINITY);
    let curve: Vec<String> = rep
        .curve
        .iter()
        .map(|c| format!("{}:{:.4}", c.systems, c.relative_residual.unwrap_or(f64::NAN)))
        .collect();
    Outcome {
        pass: res <= 0.1 && rep.residual_nonincreasing && rep.fitted_c != 0.0,
        detail: format!(
            "fitted c {:.4}, residual {res:.4} (<= 0.1), nonincreasing {} [{}]",
            rep.fitted_c,
            rep.residual_nonincreasing,
            curve.join(" ")
        ),
    }
}

fn series() -> Outcome {
    let mut verdicts_ok = true;
    let mut parts = Vec::new();
    for delta in [0.4, 0.5, 0.6, 0.75, 1.0] {
        let r = series_bound(delta, 2, 60, 1e-6).unwrap();
        verdicts_ok &= r.convergent == (delta > 0.5);
        parts.push(format!("{delta}:{}", if r.convergent { "conv" } else { "div" }));
    }
    let r = series_bound(0.75, 2, 60, 1e-6).unwrap();
    Outcome {
        pass: verdicts_ok && r.stabilized,
        detail: format!(
            "verdicts [{}] correct: {verdicts_ok}; delta=0.75 partial sum {:.4}, tail bound at k_max=60 {:.4e} \
             (stabilized within 1e-6: {}; first k with tail <= 1e-6: {:?})",
            parts.join(" "),
            r.partial_sums.last().unwrap(),
            r.tail_bound.unwrap_or(f64::NAN),
            r.stabilized,
            r.k_for_tolerance
        ),
    }
}

fn main() -> ExitCode {
    let min = |m: u64| Duration::from_secs(60 * m);
    let results = [
        report("exact identity suite", min(1), identities),
        report("bound suite", min(10), bounds),
        report("lambda equivalence", min(5), lambda_equivalence),
        report("main estimate end-to-end", min(15), lemma),
        report("scaling study", min(30), scaling),
        report("hilbert demo", min(10), hilbert),
        report("series bound", Duration::from_secs(1), series),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
