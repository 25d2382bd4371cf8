//! Dense row-major `f64` matrices, permutations, and block assembly.
//!
//! Every value here is immutable once built; operations return fresh matrices.
//! Constructors reject non-finite entries so that the SVD and everything above
//! it can assume finite input.

use std::fmt;
use std::ops::{Index, Range};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols + 1,
                pos % cols + 1
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    /// Unchecked construction for results of arithmetic on finite inputs.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub(crate) fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self::from_raw(rows, cols, vec![1.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Rectangular matrix with `values` on the main diagonal and zeros elsewhere.
    pub fn diagonal(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() > rows.min(cols) {
            return Err(Error::Argument(format!(
                "{} diagonal values do not fit a {rows}x{cols} matrix",
                values.len()
            )));
        }
        let mut data = vec![0.0; rows * cols];
        for (i, &v) in values.iter().enumerate() {
            data[i * cols + i] = v;
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_raw(self.rows, rhs.cols, out))
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(op, self.shape(), rhs.shape()));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|x| x * c).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Contiguous submatrix over 0-based half-open ranges.
    pub fn block_extract(&self, rows: Interval, cols: Interval) -> Result<Matrix> {
        if rows.is_empty() || cols.is_empty() || rows.end() > self.rows || cols.end() > self.cols {
            return Err(Error::Range(format!(
                "block rows {} cols {} outside a {}x{} matrix",
                rows, cols, self.rows, self.cols
            )));
        }
        Ok(Self::from_fn(rows.len(), cols.len(), |i, j| {
            self.get(rows.start() + i, cols.start() + j)
        }))
    }

    /// Returns W̃ with W̃[i, j] = W[p_out(i), p_in(j)].
    pub fn apply_permutations(&self, p_out: &Permutation, p_in: &Permutation) -> Result<Matrix> {
        self.check_perm_sizes(p_out, p_in)?;
        Ok(Self::from_fn(self.rows, self.cols, |i, j| {
            self.get(p_out.get(i), p_in.get(j))
        }))
    }

    /// Inverse of [`Matrix::apply_permutations`]: W[p_out(i), p_in(j)] = W̃[i, j].
    pub fn invert_permutations(&self, p_out: &Permutation, p_in: &Permutation) -> Result<Matrix> {
        self.check_perm_sizes(p_out, p_in)?;
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            let dst_row = p_out.get(i) * self.cols;
            for j in 0..self.cols {
                data[dst_row + p_in.get(j)] = self.get(i, j);
            }
        }
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    fn check_perm_sizes(&self, p_out: &Permutation, p_in: &Permutation) -> Result<()> {
        if p_out.len() != self.rows || p_in.len() != self.cols {
            return Err(Error::dim(
                "permutation",
                self.shape(),
                (p_out.len(), p_in.len()),
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

/// Places `blocks` along the diagonal of an otherwise zero matrix.
pub fn block_diagonal(blocks: &[Matrix]) -> Result<Matrix> {
    if blocks.is_empty() {
        return Err(Error::Argument("block_diagonal needs at least one block".into()));
    }
    let rows: usize = blocks.iter().map(Matrix::rows).sum();
    let cols: usize = blocks.iter().map(Matrix::cols).sum();
    let mut data = vec![0.0; rows * cols];
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows() {
            let start = (r0 + i) * cols + c0;
            data[start..start + b.cols()].copy_from_slice(b.row(i));
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    Ok(Matrix::from_raw(rows, cols, data))
}

/// A contiguous index range, stored 0-based half-open and rendered 1-based closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    start: usize,
    len: usize,
}

impl Interval {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    /// From a 1-based closed range `[start, end]`.
    pub fn from_one_based(start: usize, end: usize) -> Result<Self> {
        if start == 0 || end < start {
            return Err(Error::Range(format!("invalid 1-based interval [{start}, {end}]")));
        }
        Ok(Self::new(start - 1, end - start + 1))
    }

    pub fn full(len: usize) -> Self {
        Self::new(0, len)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// One past the last index.
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end()
    }

    pub fn one_based(&self) -> [usize; 2] {
        [self.start + 1, self.end()]
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b] = self.one_based();
        write!(f, "[{a}, {b}]")
    }
}

/// A bijection on `0..n`; `get(i)` is the source index placed at position `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        if n == 0 {
            return Err(Error::Argument("permutation must be non-empty".into()));
        }
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Validation(format!(
                    "mapping of length {n} is not a bijection (offending index {})",
                    m + 1
                )));
            }
        }
        Ok(Self(mapping))
    }

    pub fn from_one_based(mapping: &[usize]) -> Result<Self> {
        if mapping.contains(&0) {
            return Err(Error::Validation("1-based permutation contains 0".into()));
        }
        Self::new(mapping.iter().map(|m| m - 1).collect())
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|m| m + 1).collect()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        Self(inv)
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Argument(format!(
                "cannot compose permutations of sizes {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Self(other.0.iter().map(|&j| self.0[j]).collect()))
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &m)| i == m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_matrix, random_permutation, seeded_rng};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hadamard_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.hadamard(&Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(a.hadamard(&Matrix::ones(2, 2)).unwrap(), a);
        let d = m(&[&[2.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(a.hadamard(&d).unwrap(), m(&[&[2.0, 0.0], &[0.0, 8.0]]));
    }

    #[test]
    fn hadamard_shape_mismatch_names_both_shapes() {
        let err = Matrix::zeros(2, 3).hadamard(&Matrix::zeros(3, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("3x2"), "{msg}");
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn identity_permutations_leave_matrix_unchanged() {
        let mut rng = seeded_rng(1);
        let w = gaussian_matrix(5, 3, 1.0, &mut rng);
        let out = w
            .apply_permutations(&Permutation::identity(5), &Permutation::identity(3))
            .unwrap();
        assert_eq!(out, w);
        let back = w
            .invert_permutations(&Permutation::identity(5), &Permutation::identity(3))
            .unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn row_swap() {
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let swap = Permutation::new(vec![1, 0]).unwrap();
        let out = w.apply_permutations(&swap, &Permutation::identity(2)).unwrap();
        assert_eq!(out, m(&[&[3.0, 4.0], &[1.0, 2.0]]));
    }

    #[test]
    fn permutation_preserves_frobenius_norm() {
        let mut rng = seeded_rng(7);
        let w = gaussian_matrix(6, 4, 1.0, &mut rng);
        let p = random_permutation(6, &mut rng);
        let q = random_permutation(4, &mut rng);
        let wt = w.apply_permutations(&p, &q).unwrap();
        let (a, b) = (w.frobenius_norm(), wt.frobenius_norm());
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn permutation_roundtrip_is_bitwise() {
        let mut rng = seeded_rng(3);
        for (r, c) in [(8, 8), (6, 4)] {
            let w = gaussian_matrix(r, c, 1.0, &mut rng);
            let p = random_permutation(r, &mut rng);
            let q = random_permutation(c, &mut rng);
            let back = w.apply_permutations(&p, &q).unwrap().invert_permutations(&p, &q).unwrap();
            assert_eq!(back.as_slice(), w.as_slice());
        }
    }

    #[test]
    fn permutation_size_mismatch() {
        let w = Matrix::zeros(3, 2);
        assert!(matches!(
            w.apply_permutations(&Permutation::identity(2), &Permutation::identity(2)),
            Err(Error::Dimension { .. })
        ));
        assert!(w
            .invert_permutations(&Permutation::identity(3), &Permutation::identity(3))
            .is_err());
    }

    #[test]
    fn permutation_validation_and_inverse() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
        assert!(Permutation::from_one_based(&[0, 1]).is_err());
        let p = Permutation::from_one_based(&[3, 1, 2]).unwrap();
        assert_eq!(p.as_slice(), &[2, 0, 1]);
        assert!(p.compose(&p.inverse()).unwrap().is_identity());
        assert!(p.inverse().compose(&p).unwrap().is_identity());
        assert_eq!(p.to_one_based(), vec![3, 1, 2]);
    }

    #[test]
    fn block_extract_examples() {
        let id = Matrix::identity(4);
        assert_eq!(id.block_extract(Interval::full(4), Interval::full(4)).unwrap(), id);
        let off = id
            .block_extract(Interval::from_one_based(1, 2).unwrap(), Interval::from_one_based(3, 4).unwrap())
            .unwrap();
        assert_eq!(off, Matrix::zeros(2, 2));
        let diag = id.block_extract(Interval::new(0, 2), Interval::new(0, 2)).unwrap();
        assert_eq!(diag, Matrix::identity(2));
        assert!(matches!(
            id.block_extract(Interval::new(3, 2), Interval::new(0, 2)),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn block_diagonal_examples() {
        let b = m(&[&[1.0, 2.0, 3.0]]);
        assert_eq!(block_diagonal(std::slice::from_ref(&b)).unwrap(), b);
        let two = block_diagonal(&[m(&[&[5.0]]), m(&[&[-1.0]])]).unwrap();
        assert_eq!(two, m(&[&[5.0, 0.0], &[0.0, -1.0]]));
        let id = block_diagonal(&[Matrix::identity(2), Matrix::identity(2)]).unwrap();
        assert_eq!(id, Matrix::identity(4));
        assert!(matches!(block_diagonal(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn block_diagonal_rectangular_shape() {
        let out = block_diagonal(&[Matrix::ones(2, 3), Matrix::ones(1, 2)]).unwrap();
        assert_eq!(out.shape(), (3, 5));
        assert_eq!(out.get(2, 3), 1.0);
        assert_eq!(out.get(2, 2), 0.0);
        assert_eq!(out.get(0, 3), 0.0);
    }

    #[test]
    fn interval_rendering() {
        let iv = Interval::new(4, 4);
        assert_eq!(iv.one_based(), [5, 8]);
        assert_eq!(Interval::from_one_based(5, 8).unwrap(), iv);
        assert!(Interval::from_one_based(0, 3).is_err());
        assert!(Interval::from_one_based(4, 3).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = m(&[&[1.0, 0.0, -1.0], &[2.0, 1.0, 0.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, m(&[&[5.0, 2.0, -1.0], &[11.0, 4.0, -3.0], &[17.0, 6.0, -5.0]]));
        assert_eq!(a.transpose().transpose(), a);
        assert!(a.matmul(&a).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            prop::collection::vec(-1e3f64..1e3, rows * cols)
                .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn hadamard_commutes_and_associates(
                (a, b, c) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c), matrix(r, c)))
            ) {
                prop_assert_eq!(a.hadamard(&b).unwrap(), b.hadamard(&a).unwrap());
                let left = a.hadamard(&b).unwrap().hadamard(&c).unwrap();
                let right = a.hadamard(&b.hadamard(&c).unwrap()).unwrap();
                for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
                prop_assert_eq!(a.hadamard(&Matrix::ones(a.rows(), a.cols())).unwrap(), a);
            }

            #[test]
            fn permutation_roundtrip(seed in any::<u64>(), r in 1usize..9, c in 1usize..9) {
                let mut rng = seeded_rng(seed);
                let w = gaussian_matrix(r, c, 1.0, &mut rng);
                let p = random_permutation(r, &mut rng);
                let q = random_permutation(c, &mut rng);
                let back = w.apply_permutations(&p, &q).unwrap().invert_permutations(&p, &q).unwrap();
                prop_assert_eq!(back, w);
            }
        }
    }
}
