//! Random-matrix diagnostics: Marchenko–Pastur normalized spectra, bulk-edge
//! outlier counts, tail-energy curves, and overlap between right singular
//! vectors and activation-covariance eigenvectors.
//!
//! Normalization: for `W` with `n = max(rows, cols)`, `p = min(rows, cols)`,
//! `λ = p/n` and noise scale `σ̂`, `ν_i = σ_i / (σ̂√n)`. For i.i.d. noise the
//! law of `ν²` is Marchenko–Pastur with ratio `λ`, supported on
//! `[(1−√λ)², (1+√λ)²]`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::matrix::Matrix;
use crate::random::{random_unit_vector, seeded_rng};
use crate::spectrum::{self, rank_tolerance, symmetric_eigen};

/// Random probes for the bulk overlap band.
pub const DEFAULT_BULK_PROBES: usize = 200;
/// Default bin count for `nu_histogram.csv`.
pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

const CDF_PANELS: usize = 2048;
const MEDIAN_TOL: f64 = 1e-10;

fn aspect(rows: usize, cols: usize) -> Result<(f64, usize)> {
    if rows == 0 || cols == 0 {
        return Err(Error::Argument(format!("dimensions must be positive, got {rows}x{cols}")));
    }
    let n = rows.max(cols);
    Ok((rows.min(cols) as f64 / n as f64, n))
}

/// Support `[a, b]` of the `ν²` law.
pub fn mp_support(lambda: f64) -> (f64, f64) {
    let s = lambda.sqrt();
    ((1.0 - s).powi(2), (1.0 + s).powi(2))
}

/// Density of `x = ν²` under Marchenko–Pastur with ratio `λ ∈ (0, 1]`.
pub fn mp_density(x: f64, lambda: f64) -> f64 {
    let (a, b) = mp_support(lambda);
    if x <= a || x >= b || x <= 0.0 {
        return 0.0;
    }
    ((b - x) * (x - a)).sqrt() / (2.0 * PI * lambda * x)
}

/// Density of `ν` itself: `2ν · f(ν²)`.
pub fn mp_nu_density(nu: f64, lambda: f64) -> f64 {
    2.0 * nu * mp_density(nu * nu, lambda)
}

/// CDF of the `ν²` law. Integrates in `θ` with `x = c − h·cos θ`, which
/// removes the square-root endpoints, by composite Simpson.
pub fn mp_cdf(x: f64, lambda: f64) -> f64 {
    let (a, b) = mp_support(lambda);
    if x <= a {
        return 0.0;
    }
    if x >= b {
        return 1.0;
    }
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let top = ((c - x) / h).clamp(-1.0, 1.0).acos();
    let integrand = |t: f64| {
        let (s, co) = t.sin_cos();
        let denom = c - h * co;
        if denom <= 1e-300 {
            // λ = 1 at θ = 0: sin²θ / (1 − cos θ) → 1 + cos θ
            h * (1.0 + co) / (2.0 * PI * lambda)
        } else {
            h * h * s * s / (2.0 * PI * lambda * denom)
        }
    };
    let step = top / CDF_PANELS as f64;
    let mut acc = integrand(0.0) + integrand(top);
    for i in 1..CDF_PANELS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(i as f64 * step);
    }
    (acc * step / 3.0).clamp(0.0, 1.0)
}

/// Median of the `ν²` law, by bisection on the CDF.
pub fn mp_median(lambda: f64) -> f64 {
    let (mut lo, mut hi) = mp_support(lambda);
    while hi - lo > MEDIAN_TOL {
        let mid = 0.5 * (lo + hi);
        if mp_cdf(mid, lambda) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Bulk edge `ν₊ = 1 + √λ` in normalized units.
pub fn mp_bulk_edge(rows: usize, cols: usize, noise_scale: f64) -> Result<f64> {
    check_scale(noise_scale)?;
    let (lambda, _) = aspect(rows, cols)?;
    Ok(1.0 + lambda.sqrt())
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("noise scale must be positive and finite, got {s}")))
    }
}

fn median(sorted_desc: &[f64]) -> f64 {
    let p = sorted_desc.len();
    if p % 2 == 1 {
        sorted_desc[p / 2]
    } else {
        0.5 * (sorted_desc[p / 2 - 1] + sorted_desc[p / 2])
    }
}

/// `σ̂ = median(σ) / √(n · median of the ν² law)`; robust to the outlier tail.
pub fn estimate_noise_scale(singular_values: &[f64], rows: usize, cols: usize) -> Result<f64> {
    let (lambda, n) = aspect(rows, cols)?;
    if singular_values.is_empty() {
        return Err(Error::Argument("no singular values supplied".into()));
    }
    let mut s = singular_values.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let med = median(&s);
    if med <= 0.0 {
        return Err(Error::Numerical(
            "cannot estimate the noise scale: median singular value is zero; supply one explicitly".into(),
        ));
    }
    Ok(med / (n as f64 * mp_median(lambda)).sqrt())
}

fn normalize(sigma: &[f64], n: usize, scale: f64) -> Vec<f64> {
    let denom = scale * (n as f64).sqrt();
    sigma.iter().map(|s| s / denom).collect()
}

/// Normalized spectrum and the noise scale used (supplied or estimated).
pub fn normalized_spectrum_with_scale(w: &Matrix, noise_scale: Option<f64>) -> Result<(Vec<f64>, f64)> {
    let sigma = spectrum::singular_values(w)?;
    let scale = match noise_scale {
        Some(s) => {
            check_scale(s)?;
            s
        }
        None => estimate_noise_scale(&sigma, w.rows(), w.cols())?,
    };
    Ok((normalize(&sigma, w.rows().max(w.cols()), scale), scale))
}

/// `ν_i = σ_i / (σ̂√n)`, descending.
pub fn normalized_spectrum(w: &Matrix, noise_scale: Option<f64>) -> Result<Vec<f64>> {
    normalized_spectrum_with_scale(w, noise_scale).map(|(v, _)| v)
}

/// Number of normalized singular values strictly above the bulk edge.
pub fn count_outliers(w: &Matrix, noise_scale: Option<f64>) -> Result<usize> {
    let (nu, scale) = normalized_spectrum_with_scale(w, noise_scale)?;
    let edge = mp_bulk_edge(w.rows(), w.cols(), scale)?;
    Ok(nu.iter().filter(|&&v| v > edge).count())
}

/// Activations as columns: `d x n` with `n` samples of dimension `d`.
#[derive(Debug, Clone)]
pub struct ActivationSample {
    data: Matrix,
}

impl ActivationSample {
    pub fn new(data: Matrix) -> Self {
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.rows()
    }

    pub fn samples(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    /// Centered covariance with the biased `1/n` normalization, symmetrized.
    pub fn covariance(&self) -> Matrix {
        let (d, n) = self.data.shape();
        let mean: Vec<f64> = (0..d).map(|i| self.data.row(i).iter().sum::<f64>() / n as f64).collect();
        let centered = Matrix::from_fn(d, n, |i, j| self.data.get(i, j) - mean[i]);
        let c = centered
            .matmul(&centered.transpose())
            .expect("inner dimensions agree")
            .scale(1.0 / n as f64);
        let ct = c.transpose();
        c.add(&ct).expect("square").scale(0.5)
    }

    /// Covariance eigenvalues (descending) and eigenvectors as columns.
    pub fn eigen(&self) -> Result<(Vec<f64>, Matrix)> {
        symmetric_eigen(&self.covariance())
    }
}

fn max_squared_overlap(v: &[f64], basis: &Matrix) -> f64 {
    (0..basis.cols())
        .map(|l| {
            let dot: f64 = v.iter().enumerate().map(|(i, x)| x * basis.get(i, l)).sum();
            dot * dot
        })
        .fold(0.0, f64::max)
        .min(1.0)
}

/// `score_k = max_l ⟨v_k, e_l⟩²` for every right singular vector `v_k` of `w`
/// (in singular-value order, `k` 1-based) against the covariance eigenbasis.
pub fn overlap_scores(w: &Matrix, activations: &ActivationSample) -> Result<Vec<(usize, f64)>> {
    if activations.dim() != w.cols() {
        return Err(Error::dim("overlap_scores", w.shape(), (activations.dim(), activations.samples())));
    }
    let (_, basis) = activations.eigen()?;
    let d = spectrum::svd(w)?;
    let v = d.right_vectors();
    Ok((0..v.cols())
        .map(|k| (k + 1, max_squared_overlap(&v.column(k), &basis)))
        .collect())
}

/// Mean and standard deviation of the max squared overlap of `probes` random
/// unit vectors with the covariance eigenbasis.
pub fn bulk_overlap_band(activations: &ActivationSample, probes: usize, seed: u64) -> Result<(f64, f64)> {
    if probes == 0 {
        return Err(Error::Argument("bulk band needs at least one probe".into()));
    }
    let (_, basis) = activations.eigen()?;
    let mut rng = seeded_rng(seed);
    let scores: Vec<f64> = (0..probes)
        .map(|_| max_squared_overlap(&random_unit_vector(activations.dim(), &mut rng), &basis))
        .collect();
    let mean = scores.iter().sum::<f64>() / probes as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / probes as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub r: usize,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapEntry {
    pub k: usize,
    pub nu: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub shape: [usize; 2],
    pub epsilon: f64,
    pub noise_scale: f64,
    pub noise_scale_estimated: bool,
    pub seed: u64,
    pub normalized_values: Vec<f64>,
    pub bulk_edge: f64,
    pub outlier_count: usize,
    pub numerical_rank: usize,
    pub tail_energy_curve: Vec<TailPoint>,
    pub overlaps: Vec<OverlapEntry>,
    pub bulk_overlap_mean: Option<f64>,
    pub bulk_overlap_sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    /// Rank tolerance; defaults to `max(rows, cols) · σ₁ · u`.
    pub epsilon: Option<f64>,
    /// Supplied noise scale; estimated from the median when absent.
    pub noise_scale: Option<f64>,
    pub seed: u64,
    pub bulk_probes: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            epsilon: None,
            noise_scale: None,
            seed: 0,
            bulk_probes: DEFAULT_BULK_PROBES,
        }
    }
}

pub fn full_report(w: &Matrix, activations: Option<&ActivationSample>, opts: &ReportOptions) -> Result<SpectralReport> {
    let decomp = spectrum::svd(w)?;
    let sigma = decomp.singular_values();
    let epsilon = match opts.epsilon {
        Some(e) if e >= 0.0 && e.is_finite() => e,
        Some(e) => return Err(Error::Argument(format!("rank tolerance must be finite and >= 0, got {e}"))),
        None => rank_tolerance(w.rows(), w.cols(), decomp.sigma_max()),
    };
    let noise_scale = match opts.noise_scale {
        Some(s) => {
            check_scale(s)?;
            s
        }
        None => estimate_noise_scale(sigma, w.rows(), w.cols())?,
    };
    let nu = normalize(sigma, w.rows().max(w.cols()), noise_scale);
    let bulk_edge = mp_bulk_edge(w.rows(), w.cols(), noise_scale)?;

    // suffix sums, so each entry is accurate on its own
    let mut tail = vec![TailPoint { r: sigma.len(), energy: 0.0 }];
    let mut acc = 0.0;
    for r in (0..sigma.len()).rev() {
        acc += sigma[r] * sigma[r];
        tail.push(TailPoint { r, energy: acc });
    }
    tail.reverse();

    let (overlaps, bulk_mean, bulk_sigma) = match activations {
        None => (Vec::new(), None, None),
        Some(act) => {
            if act.dim() != w.cols() {
                return Err(Error::dim("full_report activations", w.shape(), (act.dim(), act.samples())));
            }
            let (_, basis) = act.eigen()?;
            let v = decomp.right_vectors();
            let overlaps = (0..v.cols())
                .map(|k| OverlapEntry {
                    k: k + 1,
                    nu: nu[k],
                    score: max_squared_overlap(&v.column(k), &basis),
                })
                .collect();
            let (m, s) = bulk_overlap_band(act, opts.bulk_probes, opts.seed)?;
            (overlaps, Some(m), Some(s))
        }
    };

    Ok(SpectralReport {
        shape: [w.rows(), w.cols()],
        epsilon,
        noise_scale,
        noise_scale_estimated: opts.noise_scale.is_none(),
        seed: opts.seed,
        outlier_count: nu.iter().filter(|&&v| v > bulk_edge).count(),
        numerical_rank: sigma.iter().filter(|&&s| s > epsilon).count(),
        normalized_values: nu,
        bulk_edge,
        tail_energy_curve: tail,
        overlaps,
        bulk_overlap_mean: bulk_mean,
        bulk_overlap_sigma: bulk_sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
    /// Marchenko–Pastur density of `ν` at the bin centre.
    pub mp_density: f64,
}

impl SpectralReport {
    fn lambda(&self) -> f64 {
        let [r, c] = self.shape;
        r.min(c) as f64 / r.max(c) as f64
    }

    /// Equal-width bins over `[0, 1.05 · max(ν_max, ν₊)]`; the last bin is closed.
    pub fn histogram(&self, bins: usize) -> Vec<HistogramBin> {
        let bins = bins.max(1);
        let top = self.normalized_values.first().copied().unwrap_or(0.0).max(self.bulk_edge) * 1.05;
        let width = top / bins as f64;
        let mut counts = vec![0usize; bins];
        for &v in &self.normalized_values {
            let idx = ((v / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        let lambda = self.lambda();
        counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| {
                let (l, r) = (i as f64 * width, (i + 1) as f64 * width);
                HistogramBin {
                    bin_left: l,
                    bin_right: r,
                    count,
                    mp_density: mp_nu_density(0.5 * (l + r), lambda),
                }
            })
            .collect()
    }

    pub fn histogram_csv(&self, bins: usize) -> String {
        let mut s = String::from("bin_left,bin_right,count,mp_density\n");
        for b in self.histogram(bins) {
            writeln!(s, "{:?},{:?},{},{:?}", b.bin_left, b.bin_right, b.count, b.mp_density).expect("String write");
        }
        s
    }

    /// `k,nu_k,score,bulk_mean,bulk_lo,bulk_hi` with the band at mean ± 3σ.
    pub fn overlaps_csv(&self) -> String {
        let mut s = String::from("k,nu_k,score,bulk_mean,bulk_lo,bulk_hi\n");
        let (m, sd) = (self.bulk_overlap_mean.unwrap_or(f64::NAN), self.bulk_overlap_sigma.unwrap_or(f64::NAN));
        for o in &self.overlaps {
            writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", o.k, o.nu, o.score, m, m - 3.0 * sd, m + 3.0 * sd)
                .expect("String write");
        }
        s
    }

    /// Writes `report.json`, `nu_histogram.csv` and `overlaps.csv` into `dir`.
    pub fn write_to(&self, dir: &Path, bins: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
        write_atomic(&dir.join("nu_histogram.csv"), self.histogram_csv(bins).as_bytes())?;
        write_atomic(&dir.join("overlaps.csv"), self.overlaps_csv().as_bytes())?;
        Ok(())
    }
}
