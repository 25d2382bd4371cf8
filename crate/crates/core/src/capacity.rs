//! Rank-capacity analysis: the analytic SMoA rank ceiling
//! `Σ_k min(s_k, ρ·rank(M_k))`, its full-rank-anchor special case, measured
//! update ranks, and block-aligned witness targets that SMoA represents exactly
//! while rank-`r` LoRA cannot.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{local_rank, BlockFactors, SmoaAdapter};
use crate::error::{Error, Result};
use crate::io::{self, content_hash, file_hash, read_matrix, save_plan, write_atomic, write_matrix};
use crate::matrix::{block_diagonal, Matrix};
use crate::preprocess::BlockPlan;
use crate::random::{gaussian_matrix, seeded_rng};
use crate::spectrum::{self, default_rank, svd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCeiling {
    /// `min(d_out/K, d_in/K)`.
    pub s_k: usize,
    pub anchor_rank: usize,
    /// Tolerance the anchor rank was measured at.
    pub anchor_epsilon: f64,
    pub block_ceiling: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCeilingReport {
    pub total_ceiling: usize,
    pub lora_ceiling: usize,
    /// `total_ceiling > lora_ceiling`.
    pub separated: bool,
    pub rho: usize,
    pub per_block: Vec<BlockCeiling>,
}

pub fn rank_ceiling(plan: &BlockPlan, r: usize) -> Result<RankCeilingReport> {
    let rho = local_rank(r, plan.k())?;
    let (br, bc) = plan.block_shape();
    let s_k = br.min(bc);
    let per_block = plan
        .anchors()
        .iter()
        .map(|m| {
            let (anchor_rank, anchor_epsilon) = default_rank(m)?;
            Ok(BlockCeiling {
                s_k,
                anchor_rank,
                anchor_epsilon,
                block_ceiling: s_k.min(rho * anchor_rank),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total_ceiling = per_block.iter().map(|b| b.block_ceiling).sum();
    Ok(RankCeilingReport {
        total_ceiling,
        lora_ceiling: r,
        separated: total_ceiling > r,
        rho,
        per_block,
    })
}

/// Ceiling when every anchor has full local rank: `K·min(s, ρ·s)`.
pub fn full_rank_ceiling(d_out: usize, d_in: usize, k: usize, r: usize) -> Result<usize> {
    if k == 0 || !d_out.is_multiple_of(k) || !d_in.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "K={k} must divide d_out={d_out} and d_in={d_in}"
        )));
    }
    let rho = local_rank(r, k)?;
    let s = (d_out / k).min(d_in / k);
    Ok(k * s.min(rho * s))
}

/// Measured rank of an update; `None` uses the default tolerance.
pub fn achieved_rank(update: &Matrix, epsilon: Option<f64>) -> Result<usize> {
    match epsilon {
        Some(eps) => spectrum::numerical_rank(update, eps),
        None => Ok(default_rank(update)?.0),
    }
}

/// A block-aligned target `P_outᵀ blkdiag(C_1⊙M_1, …, C_K⊙M_K) P_in` with `rank(C_k) ≤ ρ`.
#[derive(Debug, Clone)]
pub struct WitnessInstance {
    pub plan: Arc<BlockPlan>,
    pub rho: usize,
    pub seed: u64,
    pub coefficients: Vec<Matrix>,
    /// Target in original coordinates.
    pub target: Matrix,
    pub reordered_target_rank: usize,
}

impl WitnessInstance {
    /// Assembles a witness from given coefficients, checking their shapes.
    pub fn from_coefficients(plan: Arc<BlockPlan>, rho: usize, seed: u64, coefficients: Vec<Matrix>) -> Result<Self> {
        if coefficients.len() != plan.k() {
            return Err(Error::Config(format!(
                "{} coefficient blocks for K={}",
                coefficients.len(),
                plan.k()
            )));
        }
        let blocks = coefficients
            .iter()
            .zip(plan.anchors())
            .map(|(c, m)| c.hadamard(m))
            .collect::<Result<Vec<_>>>()?;
        let reordered = block_diagonal(&blocks)?;
        let reordered_target_rank = default_rank(&reordered)?.0;
        let target = reordered.invert_permutations(plan.p_out(), plan.p_in())?;
        Ok(Self {
            plan,
            rho,
            seed,
            coefficients,
            target,
            reordered_target_rank,
        })
    }

    pub fn reordered_target(&self) -> Matrix {
        self.target
            .apply_permutations(self.plan.p_out(), self.plan.p_in())
            .expect("target shares the plan shape")
    }
}

/// Samples `C_k = G_b·G_a` from independent standard Gaussian factors of inner
/// dimension `ρ`; `ρ = 0` gives the zero target.
pub fn make_witness(plan: Arc<BlockPlan>, rho: usize, seed: u64) -> Result<WitnessInstance> {
    let (br, bc) = plan.block_shape();
    if rho > br.min(bc) {
        return Err(Error::Config(format!(
            "witness rank ρ={rho} exceeds the block dimension {}",
            br.min(bc)
        )));
    }
    let mut rng = seeded_rng(seed);
    let coefficients = (0..plan.k())
        .map(|_| {
            if rho == 0 {
                Ok(Matrix::zeros(br, bc))
            } else {
                let gb = gaussian_matrix(br, rho, 1.0, &mut rng);
                let ga = gaussian_matrix(rho, bc, 1.0, &mut rng);
                gb.matmul(&ga)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    WitnessInstance::from_coefficients(plan, rho, seed, coefficients)
}

/// Factor each `C_k` at rank `ρ` through its SVD, `B_k = U√Σ`, `A_k = √ΣVᵀ`.
pub fn smoa_exact_fit(witness: &WitnessInstance) -> Result<SmoaAdapter> {
    let rho = witness.rho.max(1);
    let factors = witness
        .coefficients
        .iter()
        .map(|c| {
            if witness.rho == 0 {
                return Ok(BlockFactors {
                    a: Matrix::zeros(rho, c.cols()),
                    b: Matrix::zeros(c.rows(), rho),
                });
            }
            let d = svd(c)?;
            let (u, v) = (d.left_vectors(), d.right_vectors());
            let root: Vec<f64> = d.singular_values()[..rho].iter().map(|s| s.sqrt()).collect();
            Ok(BlockFactors {
                a: Matrix::from_fn(rho, c.cols(), |i, j| root[i] * v.get(j, i)),
                b: Matrix::from_fn(c.rows(), rho, |i, j| u.get(i, j) * root[j]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SmoaAdapter::new(witness.plan.clone(), factors)
}

/// Best rank-`r` Frobenius error of the witness target, `Σ_{j>r} σ_j²`.
pub fn lora_gap(witness: &WitnessInstance, r: usize) -> Result<f64> {
    let m = witness.target.rows().min(witness.target.cols());
    spectrum::tail_energy(&witness.target, r.min(m))
}

pub const WITNESS_FORMAT: &str = "SMOA-WITNESS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub r: usize,
    pub gap: f64,
}

/// `witness.json` manifest of a witness bundle directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub rho: usize,
    pub k: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub reordered_target_rank: usize,
    pub target_rank: usize,
    pub plan: String,
    pub plan_hash: String,
    pub target: String,
    pub target_hash: String,
    pub coefficients: Vec<String>,
    pub coefficient_hashes: Vec<String>,
    /// `lora_gap` for every `r` in `0..=min(d_out, d_in)`.
    pub gaps: Vec<GapEntry>,
}

pub fn save_witness(dir: &Path, w: &WitnessInstance) -> Result<WitnessManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plan_path = dir.join("plan.json");
    save_plan(&plan_path, &w.plan)?;
    write_matrix(&dir.join("target.smat"), &w.target)?;
    let mut coefficients = Vec::new();
    let mut coefficient_hashes = Vec::new();
    for (i, c) in w.coefficients.iter().enumerate() {
        let name = format!("coeff_{}.smat", i + 1);
        write_matrix(&dir.join(&name), c)?;
        coefficients.push(name);
        coefficient_hashes.push(content_hash(c));
    }
    let sigma = spectrum::singular_values(&w.target)?;
    let gaps = (0..=sigma.len())
        .map(|r| GapEntry {
            r,
            gap: sigma[r..].iter().map(|s| s * s).sum(),
        })
        .collect();
    let (d_out, d_in) = w.target.shape();
    let manifest = WitnessManifest {
        format: WITNESS_FORMAT.into(),
        version: 1,
        seed: w.seed,
        rho: w.rho,
        k: w.plan.k(),
        d_out,
        d_in,
        reordered_target_rank: w.reordered_target_rank,
        target_rank: default_rank(&w.target)?.0,
        plan: "plan.json".into(),
        plan_hash: file_hash(&plan_path)?,
        target: "target.smat".into(),
        target_hash: content_hash(&w.target),
        coefficients,
        coefficient_hashes,
        gaps,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("witness.json"), json.as_bytes())?;
    Ok(manifest)
}

/// Loads a bundle, verifying hashes and that the stored target equals the
/// target reassembled from plan and coefficients.
pub fn load_witness(dir: &Path) -> Result<(WitnessInstance, WitnessManifest)> {
    let mpath = dir.join("witness.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: WitnessManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("malformed witness manifest: {e}")))?;
    if manifest.format != WITNESS_FORMAT || manifest.version != 1 {
        return Err(Error::Validation(format!(
            "expected {WITNESS_FORMAT} v1, got {} v{}",
            manifest.format, manifest.version
        )));
    }
    let plan = Arc::new(crate::adapters::load_checked_plan(
        &io::resolve(dir, &manifest.plan),
        Some(&manifest.plan_hash),
    )?);
    let load_checked = |name: &str, hash: &str| -> Result<Matrix> {
        let m = read_matrix(&io::resolve(dir, name))?;
        if content_hash(&m) != hash {
            return Err(Error::Validation(format!("stale reference: {name} does not match its recorded hash")));
        }
        Ok(m)
    };
    let target = load_checked(&manifest.target, &manifest.target_hash)?;
    let coefficients = manifest
        .coefficients
        .iter()
        .zip(&manifest.coefficient_hashes)
        .map(|(n, h)| load_checked(n, h))
        .collect::<Result<Vec<_>>>()?;
    let w = WitnessInstance::from_coefficients(plan, manifest.rho, manifest.seed, coefficients)?;
    let scale = w.target.frobenius_norm().max(f64::MIN_POSITIVE);
    if w.target.sub(&target)?.frobenius_norm() > 1e-12 * scale {
        return Err(Error::Validation("stored target disagrees with plan and coefficients".into()));
    }
    Ok((WitnessInstance { target, ..w }, manifest))
}
