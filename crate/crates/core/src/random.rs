//! Seeded sampling helpers. All stochastic choices in the crate go through a
//! [`ChaCha8Rng`] so results are reproducible across platforms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::{Matrix, Permutation};

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// i.i.d. N(0, std²) entries.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| std * standard_normal(rng)).collect();
    Matrix::from_raw(rows, cols, data)
}

pub fn random_permutation(n: usize, rng: &mut Rng) -> Permutation {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Permutation::new(idx).expect("shuffled indices form a bijection")
}

/// `n x k` matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
pub fn random_orthonormal(n: usize, k: usize, rng: &mut Rng) -> Matrix {
    assert!(k <= n, "cannot draw {k} orthonormal vectors in dimension {n}");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        // two passes of classical Gram-Schmidt
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// Unit vector drawn uniformly from the sphere.
pub fn random_unit_vector(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gaussian noise plus `spikes` orthogonal rank-one spikes of singular value
/// `strength · noise · √max(rows, cols)`, i.e. `strength` in normalized units.
pub fn planted_spikes(rows: usize, cols: usize, spikes: usize, strength: f64, noise: f64, rng: &mut Rng) -> Matrix {
    let g = gaussian_matrix(rows, cols, noise, rng);
    if spikes == 0 {
        return g;
    }
    let u = random_orthonormal(rows, spikes, rng);
    let v = random_orthonormal(cols, spikes, rng);
    let c = strength * noise * (rows.max(cols) as f64).sqrt();
    let s = u.matmul(&v.transpose()).expect("shared inner dimension").scale(c);
    g.add(&s).expect("same shape")
}

/// `strength · L·R / √rank` with Gaussian `L: rows x rank`, `R: rank x cols`,
/// plus i.i.d. `N(0, noise²)` entries.
pub fn low_rank_plus_noise(rows: usize, cols: usize, rank: usize, strength: f64, noise: f64, rng: &mut Rng) -> Matrix {
    let l = gaussian_matrix(rows, rank.max(1), 1.0, rng);
    let r = gaussian_matrix(rank.max(1), cols, 1.0, rng);
    let scale = if rank == 0 { 0.0 } else { strength / (rank as f64).sqrt() };
    let low = l.matmul(&r).expect("shared inner dimension").scale(scale);
    low.add(&gaussian_matrix(rows, cols, noise, rng)).expect("same shape")
}
