//! Spectrum-aware preprocessing: derive output/input permutations from the
//! frozen SVD of `W0`, cut the reordered coordinates into `K` equal contiguous
//! groups, and copy out the diagonal block anchors `M_k`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::io::content_hash;
use crate::matrix::{Interval, Matrix, Permutation};
use crate::spectrum::{svd, SpectralDecomposition};

/// Frozen output of preprocessing. Carries no trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    k: usize,
    p_out: Permutation,
    p_in: Permutation,
    row_intervals: Vec<Interval>,
    col_intervals: Vec<Interval>,
    anchors: Vec<Matrix>,
    source_hash: String,
}

impl BlockPlan {
    /// Reassembles a plan from stored parts, checking every structural invariant.
    pub fn from_parts(
        k: usize,
        p_out: Permutation,
        p_in: Permutation,
        anchors: Vec<Matrix>,
        source_hash: String,
    ) -> Result<Self> {
        let (d_out, d_in) = (p_out.len(), p_in.len());
        check_divisibility(d_out, d_in, k)?;
        if anchors.len() != k {
            return Err(Error::Validation(format!("plan has K={k} but {} anchors", anchors.len())));
        }
        let (br, bc) = (d_out / k, d_in / k);
        if let Some((i, a)) = anchors.iter().enumerate().find(|(_, a)| a.shape() != (br, bc)) {
            return Err(Error::Validation(format!(
                "anchor {} has shape {}x{}, expected {br}x{bc}",
                i + 1,
                a.rows(),
                a.cols()
            )));
        }
        Ok(Self {
            k,
            row_intervals: equal_intervals(d_out, k),
            col_intervals: equal_intervals(d_in, k),
            p_out,
            p_in,
            anchors,
            source_hash,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p_out(&self) -> &Permutation {
        &self.p_out
    }

    pub fn p_in(&self) -> &Permutation {
        &self.p_in
    }

    pub fn row_intervals(&self) -> &[Interval] {
        &self.row_intervals
    }

    pub fn col_intervals(&self) -> &[Interval] {
        &self.col_intervals
    }

    pub fn anchors(&self) -> &[Matrix] {
        &self.anchors
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn d_out(&self) -> usize {
        self.p_out.len()
    }

    pub fn d_in(&self) -> usize {
        self.p_in.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.d_out(), self.d_in())
    }

    /// `(d_out / K, d_in / K)`.
    pub fn block_shape(&self) -> (usize, usize) {
        (self.d_out() / self.k, self.d_in() / self.k)
    }

    pub fn check_shape(&self, op: &'static str, m: &Matrix) -> Result<()> {
        if m.shape() != self.shape() {
            return Err(Error::dim(op, m.shape(), self.shape()));
        }
        Ok(())
    }

    /// Diagonal blocks of an already reordered matrix.
    pub fn diagonal_blocks(&self, reordered: &Matrix) -> Result<Vec<Matrix>> {
        self.check_shape("diagonal_blocks", reordered)?;
        self.row_intervals
            .iter()
            .zip(&self.col_intervals)
            .map(|(&r, &c)| reordered.block_extract(r, c))
            .collect()
    }

    /// Whether this plan was built from `w0`: same content hash and anchors.
    pub fn matches_source(&self, w0: &Matrix) -> Result<bool> {
        if w0.shape() != self.shape() || content_hash(w0) != self.source_hash {
            return Ok(false);
        }
        let reordered = w0.apply_permutations(&self.p_out, &self.p_in)?;
        Ok(self.diagonal_blocks(&reordered)? == self.anchors)
    }
}

fn check_divisibility(rows: usize, cols: usize, k: usize) -> Result<()> {
    if k == 0 || !rows.is_multiple_of(k) || !cols.is_multiple_of(k) || k > rows.min(cols) {
        return Err(Error::Config(format!(
            "block count K={k} must be positive and divide both dimensions (rows={rows}, cols={cols})"
        )));
    }
    Ok(())
}

fn equal_intervals(n: usize, k: usize) -> Vec<Interval> {
    let len = n / k;
    (0..k).map(|i| Interval::new(i * len, len)).collect()
}

/// Maps a frozen SVD to output/input orderings. Implementations must be
/// deterministic; the returned orders list source coordinates position by position.
pub trait PermutationRule {
    fn orderings(&self, decomp: &SpectralDecomposition) -> (Permutation, Permutation);
}

/// Sort coordinates by σ-weighted spectral centroid, ascending, ties by index.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpectralCentroid;

impl PermutationRule for SpectralCentroid {
    fn orderings(&self, decomp: &SpectralDecomposition) -> (Permutation, Permutation) {
        let (out, inp) = coordinate_scores(decomp);
        (sort_by_score(&out), sort_by_score(&inp))
    }
}

/// Bucket coordinates by the singular direction carrying most of their
/// σ-weighted energy; ties within a bucket fall back to the centroid score.
#[derive(Debug, Clone, Copy, Default)]
pub struct DominantDirection;

impl PermutationRule for DominantDirection {
    fn orderings(&self, decomp: &SpectralDecomposition) -> (Permutation, Permutation) {
        let (out, inp) = coordinate_scores(decomp);
        let sigma = decomp.singular_values();
        let bucket = |vecs: &Matrix, scores: &[f64]| {
            let keys: Vec<(usize, f64)> = (0..vecs.rows())
                .map(|i| {
                    let dom = (0..sigma.len())
                        .map(|j| sigma[j] * vecs.get(i, j).powi(2))
                        .enumerate()
                        .filter(|&(_, e)| e > 0.0)
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                        .map_or(sigma.len(), |(j, _)| j);
                    (dom, scores[i])
                })
                .collect();
            let mut idx: Vec<usize> = (0..keys.len()).collect();
            idx.sort_by(|&a, &b| {
                keys[a]
                    .0
                    .cmp(&keys[b].0)
                    .then(keys[a].1.total_cmp(&keys[b].1))
                    .then(a.cmp(&b))
            });
            Permutation::new(idx).expect("sorted indices are a bijection")
        };
        (
            bucket(decomp.left_vectors(), &out),
            bucket(decomp.right_vectors(), &inp),
        )
    }
}

fn sort_by_score(scores: &[f64]) -> Permutation {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| match scores[a].total_cmp(&scores[b]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    Permutation::new(idx).expect("sorted indices are a bijection")
}

/// σ-weighted centroid of each coordinate's singular-vector energy, with
/// directions numbered 1..=m. A coordinate with no energy scores `m + 1`.
pub fn coordinate_scores(decomp: &SpectralDecomposition) -> (Vec<f64>, Vec<f64>) {
    let sigma = decomp.singular_values();
    let m = sigma.len();
    let floor = f64::EPSILON * decomp.sigma_max();
    let score = |vecs: &Matrix| -> Vec<f64> {
        (0..vecs.rows())
            .map(|i| {
                let (mut num, mut den) = (0.0, 0.0);
                for (j, &s) in sigma.iter().enumerate() {
                    let e = s * vecs.get(i, j).powi(2);
                    num += (j + 1) as f64 * e;
                    den += e;
                }
                if den <= floor {
                    (m + 1) as f64
                } else {
                    num / den
                }
            })
            .collect()
    };
    (score(decomp.left_vectors()), score(decomp.right_vectors()))
}

pub fn build_plan(w0: &Matrix, k: usize) -> Result<BlockPlan> {
    build_plan_with(w0, k, &SpectralCentroid)
}

pub fn build_plan_with(w0: &Matrix, k: usize, rule: &dyn PermutationRule) -> Result<BlockPlan> {
    check_divisibility(w0.rows(), w0.cols(), k)?;
    // a single group needs no reordering
    let (p_out, p_in) = if k == 1 {
        (Permutation::identity(w0.rows()), Permutation::identity(w0.cols()))
    } else {
        rule.orderings(&svd(w0)?)
    };
    let reordered = w0.apply_permutations(&p_out, &p_in)?;
    let rows = equal_intervals(w0.rows(), k);
    let cols = equal_intervals(w0.cols(), k);
    let anchors = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| reordered.block_extract(r, c))
        .collect::<Result<Vec<_>>>()?;
    BlockPlan::from_parts(k, p_out, p_in, anchors, content_hash(w0))
}

/// `W̃0 = P_out W0 P_inᵀ`.
pub fn reordered_weight(plan: &BlockPlan, w0: &Matrix) -> Result<Matrix> {
    plan.check_shape("reordered_weight", w0)?;
    w0.apply_permutations(plan.p_out(), plan.p_in())
}
