//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! before asserting. Run with `--nocapture` to see the lines.

use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;

use smoa_core::adapters::{
    lora_update, param_count, smoa_update, Adapter, AdapterInit, AdapterKind, BlockFactors, LoraAdapter, SmoaAdapter,
};
use smoa_core::capacity::{achieved_rank, full_rank_ceiling, lora_gap, make_witness, rank_ceiling, smoa_exact_fit, WitnessInstance};
use smoa_core::diagnostics::{count_outliers, overlap_scores, ActivationSample};
use smoa_core::preprocess::{build_plan, reordered_weight};
use smoa_core::random::{gaussian_matrix, planted_spikes, random_permutation, seeded_rng};
use smoa_core::spectrum::{self, singular_values, tail_energy, truncated_svd};
use smoa_core::trainer::{finite_difference_check, fit_with_init, FitConfig, FitProblem};
use smoa_core::{block_diagonal, Matrix};

fn verdict(id: u32, name: &str, ok: bool, detail: String, start: Instant, limit: Duration) {
    let elapsed = start.elapsed();
    let within = elapsed <= limit;
    let pass = ok && within;
    println!(
        "acceptance {id:>2} {name}: {} ({detail}; {:.2}s of {}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "criterion {id} failed: {detail}");
    assert!(within, "criterion {id} exceeded its runtime budget: {elapsed:?}");
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Tail energy from nalgebra's singular values.
fn oracle_tail(m: &Matrix, r: usize) -> f64 {
    let mut s: Vec<f64> = to_na(m).svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[r..].iter().map(|x| x * x).sum()
}

#[test]
fn criterion_01_parameter_budget() {
    let start = Instant::now();
    let mut rng = seeded_rng(101);
    let mut failures = Vec::new();
    for _ in 0..50 {
        let k = [1usize, 2, 4, 8, 16, 32][rng.random_range(0..6)];
        let d_in = k * rng.random_range(1..=4096 / k);
        let d_out = k * rng.random_range(1..=4096 / k);
        let r = k * rng.random_range(1..=(d_in.min(d_out) / k).min(64));
        let lora = param_count(AdapterKind::Lora, d_in, d_out, r, k).unwrap();
        let smoa = param_count(AdapterKind::Smoa, d_in, d_out, r, k).unwrap();
        if smoa * k != lora {
            failures.push((d_in, d_out, r, k));
        }
    }
    verdict(1, "parameter budget", failures.is_empty(), format!("50 tuples, mismatches {failures:?}"), start, Duration::from_secs(1));
}

#[test]
fn criterion_02_rank_ceiling_soundness() {
    let start = Instant::now();
    let mut rng = seeded_rng(202);
    let combos = [(2usize, 2usize), (2, 4), (2, 8), (4, 4), (4, 8)];
    let mut violations = 0;
    let mut max_rank_seen = 0;
    for trial in 0..1000u64 {
        let (k, r) = combos[rng.random_range(0..combos.len())];
        // d ≤ 32, a multiple of K, and at least r
        let d = k * rng.random_range((r.div_ceil(k)).max(1)..=32 / k);
        let plan = Arc::new(build_plan(&gaussian_matrix(d, d, 1.0, &mut rng), k).unwrap());
        let adapter = SmoaAdapter::init(plan.clone(), r, &AdapterInit::gaussian(trial, 1.0)).unwrap();
        let got = achieved_rank(&smoa_update(&adapter), None).unwrap();
        let ceiling = rank_ceiling(&plan, r).unwrap().total_ceiling;
        max_rank_seen = max_rank_seen.max(got);
        if got > ceiling {
            violations += 1;
        }
    }
    verdict(
        2,
        "rank ceiling soundness",
        violations == 0,
        format!("1000 adapters, {violations} violations, max rank {max_rank_seen}"),
        start,
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_03_full_rank_separation() {
    let start = Instant::now();
    let (d, k) = (16, 2);
    let mut ok = true;
    let mut notes = Vec::new();
    for r in [2, 4, 8] {
        let c = full_rank_ceiling(d, d, k, r).unwrap();
        ok &= c > r;
        notes.push(format!("r={r}: ceiling {c}"));
    }
    let mut ranks = Vec::new();
    for seed in 0..10u64 {
        let plan = Arc::new(build_plan(&gaussian_matrix(d, d, 1.0, &mut seeded_rng(300 + seed)), k).unwrap());
        let report = rank_ceiling(&plan, 2).unwrap();
        ok &= report.per_block.iter().all(|b| b.anchor_rank == d / k);
        // ρ = 1: r = K
        let adapter = SmoaAdapter::init(plan, k, &AdapterInit::gaussian(seed, 1.0)).unwrap();
        let rank = achieved_rank(&smoa_update(&adapter), None).unwrap();
        ok &= rank == d;
        ranks.push(rank);
    }
    verdict(
        3,
        "full-rank separation",
        ok,
        format!("{}; rho=1 ranks {ranks:?}", notes.join(", ")),
        start,
        Duration::from_secs(5),
    );
}

fn witnesses() -> Vec<WitnessInstance> {
    (0..20u64)
        .map(|seed| {
            let plan = Arc::new(build_plan(&gaussian_matrix(8, 8, 1.0, &mut seeded_rng(400 + seed)), 2).unwrap());
            make_witness(plan, 2, seed).unwrap()
        })
        .collect()
}

#[test]
fn criterion_04_witness_separation() {
    let start = Instant::now();
    let mut ok = true;
    let (mut worst_gap, mut worst_fit, mut min_gap) = (0.0f64, 0.0f64, f64::INFINITY);
    for w in witnesses() {
        ok &= w.reordered_target_rank == 8;
        let gap = lora_gap(&w, 4).unwrap();
        let explicit = w.target.sub(&truncated_svd(&w.target, 4).unwrap()).unwrap().frobenius_sq();
        let independent = oracle_tail(&w.target, 4);
        min_gap = min_gap.min(gap);
        worst_gap = worst_gap
            .max((gap - explicit).abs() / explicit)
            .max((gap - independent).abs() / independent);
        let fit = smoa_update(&smoa_exact_fit(&w).unwrap());
        worst_fit = worst_fit.max(fit.sub(&w.target).unwrap().frobenius_norm() / w.target.frobenius_norm());
    }
    ok &= min_gap > 0.0 && worst_gap < 1e-9 && worst_fit < 1e-10;
    verdict(
        4,
        "witness separation",
        ok,
        format!("20 witnesses, min gap {min_gap:.3e}, gap rel err {worst_gap:.1e}, exact-fit rel err {worst_fit:.1e}"),
        start,
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_05_gradient_descent_floor() {
    let start = Instant::now();
    let lora_cfg = FitConfig::default();
    let smoa_cfg = FitConfig { step_size: 5e-2, ..FitConfig::default() };
    let init = AdapterInit::spectral(0.1);
    let mut ok = true;
    let (mut worst_floor_gap, mut below, mut worst_smoa, mut max_smoa_steps) = (0.0f64, 0usize, 0.0f64, 0usize);
    for w in witnesses() {
        let lp = FitProblem::new(w.target.clone(), None).unwrap();
        let lt = fit_with_init(&lp, AdapterKind::Lora, 4, &init, &lora_cfg).unwrap();
        let floor = lt.floor.unwrap();
        below += lt.records.iter().filter(|r| r.loss < floor - 1e-9).count();
        worst_floor_gap = worst_floor_gap.max((lt.final_loss() - floor) / floor);
        ok &= lt.records.windows(2).all(|p| p[1].loss <= p[0].loss);

        let sp = FitProblem::new(w.target.clone(), Some(w.plan.clone())).unwrap();
        let st = fit_with_init(&sp, AdapterKind::Smoa, 4, &init, &smoa_cfg).unwrap();
        worst_smoa = worst_smoa.max(st.relative_loss());
        max_smoa_steps = max_smoa_steps.max(st.records.len() - 1);
        ok &= st.records.windows(2).all(|p| p[1].loss <= p[0].loss);
    }
    ok &= below == 0 && worst_floor_gap <= 1e-3 && worst_smoa < 1e-6;
    verdict(
        5,
        "gradient-descent floor",
        ok,
        format!(
            "LoRA worst (final-floor)/floor {worst_floor_gap:.1e}, records below floor {below}; \
             SMoA worst relative loss {worst_smoa:.1e} within {max_smoa_steps} steps"
        ),
        start,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_06_gradient_correctness() {
    let start = Instant::now();
    let mut rng = seeded_rng(606);
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let (problem, adapter): (FitProblem, Adapter) = if i % 2 == 0 {
            let (d_out, d_in) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let r = rng.random_range(1..=d_out.min(d_in));
            let t = gaussian_matrix(d_out, d_in, 1.0, &mut rng);
            (
                FitProblem::new(t, None).unwrap(),
                LoraAdapter::init(d_out, d_in, r, &AdapterInit::gaussian(i, 1.0)).unwrap().into(),
            )
        } else {
            let k = [1usize, 2, 4][rng.random_range(0..3)];
            let (d_out, d_in) = (k * rng.random_range(1..=16 / k), k * rng.random_range(1..=16 / k));
            let rho = rng.random_range(1..=(d_out / k).min(d_in / k));
            let plan = Arc::new(build_plan(&gaussian_matrix(d_out, d_in, 1.0, &mut rng), k).unwrap());
            let t = gaussian_matrix(d_out, d_in, 1.0, &mut rng);
            (
                FitProblem::new(t, Some(plan.clone())).unwrap(),
                SmoaAdapter::init(plan, rho * k, &AdapterInit::gaussian(i, 1.0)).unwrap().into(),
            )
        };
        worst = worst.max(finite_difference_check(&problem, &adapter, 1e-6).unwrap());
    }
    verdict(
        6,
        "gradient correctness",
        worst < 1e-5,
        format!("100 instances, central step 1e-6, max relative error {worst:.2e}"),
        start,
        Duration::from_secs(60),
    );
}

#[test]
fn criterion_07_tail_energy_consistency() {
    let start = Instant::now();
    let mut rng = seeded_rng(707);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (rows, cols) = (rng.random_range(1..=64), rng.random_range(1..=48));
        let w = gaussian_matrix(rows, cols, 1.0, &mut rng);
        let m = rows.min(cols);
        let total = w.frobenius_sq();
        for r in [0, 1.min(m), m / 2, m] {
            let tail = tail_energy(&w, r).unwrap();
            let explicit = w.sub(&truncated_svd(&w, r).unwrap()).unwrap().frobenius_sq();
            let independent = oracle_tail(&w, r);
            // at r = m the tail is zero and only roundoff remains, measured against ‖W‖²
            let denom = if r == m { total } else { explicit };
            worst = worst
                .max((tail - explicit).abs() / denom)
                .max((tail - independent).abs() / denom.max(independent));
        }
    }
    verdict(
        7,
        "Eckart-Young tail energy",
        worst < 1e-9,
        format!("50 matrices up to 64x48, r in {{0,1,m/2,m}}, max relative error {worst:.2e}"),
        start,
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_08_mp_diagnostics() {
    let start = Instant::now();
    let n = 256;
    let mut noise_outliers = 0usize;
    let mut exact_five = 0usize;
    let mut spike_counts = Vec::new();
    for seed in 0..20u64 {
        let g = gaussian_matrix(n, n, 1.0, &mut seeded_rng(800 + seed));
        noise_outliers += count_outliers(&g, None).unwrap();
        let s = planted_spikes(n, n, 5, 10.0, 1.0, &mut seeded_rng(900 + seed));
        let c = count_outliers(&s, None).unwrap();
        spike_counts.push(c);
        exact_five += usize::from(c == 5);
    }
    let mean_fraction = noise_outliers as f64 / (20 * n) as f64;

    // aligned activations: covariance V·D·Vᵀ on the right singular vectors of W
    let d = 64;
    let samples = 50 * d;
    let mut rng = seeded_rng(1000);
    let w = gaussian_matrix(d, d, 1.0, &mut rng);
    let v = spectrum::svd(&w).unwrap().right_vectors().clone();
    let root: Vec<f64> = (0..d).map(|i| 1.3f64.powi(-(i as i32)).sqrt()).collect();
    let z = gaussian_matrix(d, samples, 1.0, &mut rng);
    let scaled = Matrix::from_rows(&(0..d).map(|i| z.row(i).iter().map(|x| x * root[i]).collect()).collect::<Vec<_>>()).unwrap();
    let aligned = ActivationSample::new(v.matmul(&scaled).unwrap());
    let aligned_scores: Vec<f64> = overlap_scores(&w, &aligned).unwrap().into_iter().map(|(_, s)| s).collect();
    let min_aligned = aligned_scores.iter().copied().fold(f64::INFINITY, f64::min);

    let iso = ActivationSample::new(gaussian_matrix(d, samples, 1.0, &mut rng));
    let iso_scores: Vec<f64> = overlap_scores(&w, &iso).unwrap().into_iter().map(|(_, s)| s).collect();
    let iso_mean = iso_scores.iter().sum::<f64>() / d as f64;
    let iso_sigma = (iso_scores.iter().map(|s| (s - iso_mean).powi(2)).sum::<f64>() / d as f64).sqrt();
    let separation = (min_aligned - iso_mean) / iso_sigma;

    let ok = mean_fraction <= 0.02 && exact_five >= 19 && min_aligned > 0.9 && separation >= 5.0;
    verdict(
        8,
        "MP diagnostics",
        ok,
        format!(
            "noise outlier fraction {mean_fraction:.4}, spikes exact in {exact_five}/20 {spike_counts:?}, \
             aligned min score {min_aligned:.3}, isotropic mean {iso_mean:.3} sigma {iso_sigma:.3}, \
             separation {separation:.1} sigma"
        ),
        start,
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_09_structural_invariances() {
    let start = Instant::now();
    let mut rng = seeded_rng(909);
    let mut ok = true;

    let mut roundtrips = 0;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let w = gaussian_matrix(r, c, 1.0, &mut rng);
        let (po, pi) = (random_permutation(r, &mut rng), random_permutation(c, &mut rng));
        let back = w.apply_permutations(&po, &pi).unwrap().invert_permutations(&po, &pi).unwrap();
        roundtrips += usize::from(back.as_slice() == w.as_slice());
    }
    ok &= roundtrips == 100;

    let mut worst_spec: f64 = 0.0;
    for _ in 0..20 {
        let k = [1usize, 2, 4][rng.random_range(0..3)];
        let w = gaussian_matrix(k * rng.random_range(1..=8), k * rng.random_range(1..=8), 1.0, &mut rng);
        let plan = build_plan(&w, k).unwrap();
        let (s0, s1) = (singular_values(&w).unwrap(), singular_values(&reordered_weight(&plan, &w).unwrap()).unwrap());
        for (a, b) in s0.iter().zip(&s1) {
            worst_spec = worst_spec.max((a - b).abs() / s0[0]);
        }
    }
    ok &= worst_spec < 1e-10;

    let mut lora_equal = 0;
    for _ in 0..20 {
        let (d_out, d_in) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let rho = rng.random_range(1..=d_out.min(d_in));
        let plan = Arc::new(build_plan(&Matrix::ones(d_out, d_in), 1).unwrap());
        let (a, b) = (gaussian_matrix(rho, d_in, 1.0, &mut rng), gaussian_matrix(d_out, rho, 1.0, &mut rng));
        let smoa = SmoaAdapter::new(plan, vec![BlockFactors { a: a.clone(), b: b.clone() }]).unwrap();
        lora_equal += usize::from(smoa_update(&smoa) == lora_update(&LoraAdapter::new(a, b).unwrap()));
    }
    ok &= lora_equal == 20;

    let mut additive = 0;
    for _ in 0..100 {
        let blocks: Vec<Matrix> = (0..rng.random_range(1..=5))
            .map(|_| {
                let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
                let k = rng.random_range(1..=r.min(c));
                gaussian_matrix(r, k, 1.0, &mut rng).matmul(&gaussian_matrix(k, c, 1.0, &mut rng)).unwrap()
            })
            .collect();
        let sum: usize = blocks.iter().map(|b| spectrum::default_rank(b).unwrap().0).sum();
        additive += usize::from(spectrum::default_rank(&block_diagonal(&blocks).unwrap()).unwrap().0 == sum);
    }
    ok &= additive == 100;

    verdict(
        9,
        "structural invariances",
        ok,
        format!(
            "roundtrips {roundtrips}/100 bit-exact, spectrum drift {worst_spec:.1e}, \
             K=1 ones-anchor = LoRA {lora_equal}/20, blkdiag additivity {additive}/100"
        ),
        start,
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_10_sweep_shape() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sweep.json");
    std::fs::write(&spec, r#"{"d":[64],"k":[2],"r":[4,8,16,32],"seed":10}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_smoa"))
        .args(["sweep", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.path())
        .args(["--format", "csv", "--quiet"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    let mut ok = rows.len() == 8;
    let mut cells = Vec::new();
    for r in [4usize, 8, 16, 32] {
        let find = |m: &str| {
            rows.iter()
                .find(|row| row[0] == m && row[3] == r.to_string())
                .map(|row| row[5].parse::<usize>().unwrap())
        };
        match (find("lora"), find("smoa")) {
            (Some(l), Some(s)) => {
                ok &= l == r && s > r;
                cells.push(format!("r={r}: lora {l}, smoa {s}"));
            }
            _ => ok = false,
        }
    }
    verdict(10, "sweep shape", ok, cells.join(", "), start, Duration::from_secs(60));
}
