//! Cross-checks against nalgebra's decompositions and property tests over
//! the structural invariants.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::RngCore;

use smoa_core::adapters::{lora_update, smoa_update, param_count, AdapterInit, AdapterKind, BlockFactors, LoraAdapter, SmoaAdapter};
use smoa_core::capacity::{achieved_rank, rank_ceiling};
use smoa_core::preprocess::{build_plan, reordered_weight, BlockPlan};
use smoa_core::random::{gaussian_matrix, random_permutation, seeded_rng};
use smoa_core::spectrum::{self, singular_values, svd, symmetric_eigen, tail_energy, truncated_svd};
use smoa_core::{block_diagonal, Matrix, Permutation};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn singular_values_match_nalgebra() {
    let mut rng = seeded_rng(1);
    for (r, c) in [(1, 1), (3, 7), (7, 3), (16, 16), (40, 25), (25, 64)] {
        let w = gaussian_matrix(r, c, 1.0, &mut rng);
        let ours = singular_values(&w).unwrap();
        let theirs = sorted_desc(to_na(&w).svd(false, false).singular_values.iter().copied().collect());
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-12 * theirs[0], "{r}x{c}: {a} vs {b}");
        }
    }
}

#[test]
fn svd_factors_reconstruct_and_are_orthonormal() {
    let mut rng = seeded_rng(2);
    for (r, c) in [(9, 5), (5, 9), (12, 12)] {
        let w = gaussian_matrix(r, c, 1.0, &mut rng);
        let d = svd(&w).unwrap();
        assert!(d.reconstruct().sub(&w).unwrap().max_abs() < 1e-12);
        for q in [d.left_vectors(), d.right_vectors()] {
            let g = q.transpose().matmul(q).unwrap();
            assert!(g.sub(&Matrix::identity(g.rows())).unwrap().max_abs() < 1e-12);
        }
    }
}

#[test]
fn symmetric_eigen_matches_nalgebra() {
    let mut rng = seeded_rng(3);
    for n in [1, 2, 6, 20] {
        let g = gaussian_matrix(n, n, 1.0, &mut rng);
        let a = g.add(&g.transpose()).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let theirs = sorted_desc(SymmetricEigen::new(to_na(&a)).eigenvalues.iter().copied().collect());
        for (x, y) in vals.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-11, "{n}: {x} vs {y}");
        }
        // A v = λ v column by column
        let av = a.matmul(&vecs).unwrap();
        for (k, &l) in vals.iter().enumerate() {
            for i in 0..n {
                assert!((av.get(i, k) - l * vecs.get(i, k)).abs() < 1e-11);
            }
        }
    }
}

#[test]
fn tail_energy_equals_explicit_residual() {
    let mut rng = seeded_rng(4);
    let w = gaussian_matrix(30, 18, 1.0, &mut rng);
    for r in [0, 1, 9, 18] {
        let explicit = w.sub(&truncated_svd(&w, r).unwrap()).unwrap().frobenius_sq();
        let tail = tail_energy(&w, r).unwrap();
        let scale = w.frobenius_sq();
        assert!((explicit - tail).abs() <= 1e-12 * scale, "{r}: {explicit} vs {tail}");
    }
}

#[test]
fn numerical_rank_of_constructed_low_rank() {
    let mut rng = seeded_rng(5);
    for k in [1, 3, 7] {
        let w = gaussian_matrix(20, k, 1.0, &mut rng)
            .matmul(&gaussian_matrix(k, 15, 1.0, &mut rng))
            .unwrap();
        let (rank, _) = spectrum::default_rank(&w).unwrap();
        assert_eq!(rank, k);
        let na_rank = to_na(&w).rank(1e-9);
        assert_eq!(na_rank, k);
    }
}

fn ones_plan(d_out: usize, d_in: usize) -> BlockPlan {
    BlockPlan::from_parts(
        1,
        Permutation::identity(d_out),
        Permutation::identity(d_in),
        vec![Matrix::ones(d_out, d_in)],
        String::new(),
    )
    .unwrap()
}

#[test]
fn single_block_all_ones_anchor_is_lora() {
    let mut rng = seeded_rng(6);
    let (a, b) = (gaussian_matrix(3, 7, 1.0, &mut rng), gaussian_matrix(5, 3, 1.0, &mut rng));
    let smoa = SmoaAdapter::new(Arc::new(ones_plan(5, 7)), vec![BlockFactors { a: a.clone(), b: b.clone() }]).unwrap();
    let lora = LoraAdapter::new(a, b).unwrap();
    assert_eq!(smoa_update(&smoa), lora_update(&lora));
}

fn arb_dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=12, 1usize..=12, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permutation_roundtrip_bit_exact((r, c, seed) in arb_dims()) {
        let mut rng = seeded_rng(seed);
        let w = gaussian_matrix(r, c, 1.0, &mut rng);
        let (po, pi) = (random_permutation(r, &mut rng), random_permutation(c, &mut rng));
        let back = w.apply_permutations(&po, &pi).unwrap().invert_permutations(&po, &pi).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn reordering_preserves_spectrum(k in 1usize..=4, a in 1usize..=4, b in 1usize..=4, seed in any::<u64>()) {
        let w = gaussian_matrix(k * a, k * b, 1.0, &mut seeded_rng(seed));
        let plan = build_plan(&w, k).unwrap();
        let s0 = singular_values(&w).unwrap();
        let s1 = singular_values(&reordered_weight(&plan, &w).unwrap()).unwrap();
        for (x, y) in s0.iter().zip(&s1) {
            prop_assert!((x - y).abs() <= 1e-10 * s0[0]);
        }
    }

    #[test]
    fn single_block_ones_matches_lora((r, c, seed) in arb_dims(), rho in 1usize..=4) {
        let mut rng = seeded_rng(seed);
        let a = gaussian_matrix(rho, c, 1.0, &mut rng);
        let b = gaussian_matrix(r, rho, 1.0, &mut rng);
        let smoa = SmoaAdapter::new(Arc::new(ones_plan(r, c)), vec![BlockFactors { a: a.clone(), b: b.clone() }]).unwrap();
        prop_assert_eq!(smoa_update(&smoa), lora_update(&LoraAdapter::new(a, b).unwrap()));
    }

    #[test]
    fn block_diagonal_rank_is_additive(blocks in 1usize..=4, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let list: Vec<Matrix> = (0..blocks)
            .map(|_| {
                let (r, c) = (1 + (rng.next_u64() % 6) as usize, 1 + (rng.next_u64() % 6) as usize);
                let k = 1 + (rng.next_u64() as usize) % r.min(c);
                gaussian_matrix(r, k, 1.0, &mut rng).matmul(&gaussian_matrix(k, c, 1.0, &mut rng)).unwrap()
            })
            .collect();
        let sum: usize = list.iter().map(|m| spectrum::default_rank(m).unwrap().0).sum();
        prop_assert_eq!(spectrum::default_rank(&block_diagonal(&list).unwrap()).unwrap().0, sum);
    }

    #[test]
    fn smoa_rank_never_exceeds_ceiling(k in prop::sample::select(vec![2usize, 4]), mult in 1usize..=6, rho in 1usize..=3, seed in any::<u64>()) {
        let d = k * mult.max(rho);
        let plan = Arc::new(build_plan(&gaussian_matrix(d, d, 1.0, &mut seeded_rng(seed)), k).unwrap());
        let r = rho * k;
        let adapter = SmoaAdapter::init(plan.clone(), r, &AdapterInit::gaussian(seed ^ 1, 1.0)).unwrap();
        let ceiling = rank_ceiling(&plan, r).unwrap().total_ceiling;
        prop_assert!(achieved_rank(&smoa_update(&adapter), None).unwrap() <= ceiling);
    }

    #[test]
    fn parameter_budget_law(k in 1usize..=8, a in 1usize..=64, b in 1usize..=64, rho in 1usize..=8) {
        let (d_in, d_out, r) = (a * k, b * k, rho * k);
        let lora = param_count(AdapterKind::Lora, d_in, d_out, r, k).unwrap();
        let smoa = param_count(AdapterKind::Smoa, d_in, d_out, r, k).unwrap();
        prop_assert_eq!(smoa * k, lora);
    }

    #[test]
    fn tail_energy_monotone_and_ends_at_zero((r, c, seed) in arb_dims()) {
        let w = gaussian_matrix(r, c, 1.0, &mut seeded_rng(seed));
        let m = r.min(c);
        let tails: Vec<f64> = (0..=m).map(|i| tail_energy(&w, i).unwrap()).collect();
        prop_assert!(tails.windows(2).all(|p| p[1] <= p[0]));
        prop_assert_eq!(tails[m], 0.0);
        prop_assert!((tails[0] - w.frobenius_sq()).abs() <= 1e-12 * w.frobenius_sq());
    }
}
