//! The two update families: a global rank-`r` LoRA branch `ΔW = BA`, and the
//! `K`-block Hadamard-modulated SMoA branch
//! `ΔW = P_outᵀ blkdiag((B_1A_1)⊙M_1, …, (B_KA_K)⊙M_K) P_in` with local rank `ρ = r/K`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, file_hash, parent_dir, read_matrix, resolve, write_atomic, write_matrix};
use crate::matrix::{block_diagonal, Matrix};
use crate::preprocess::BlockPlan;
use crate::random::{gaussian_matrix, seeded_rng};
use crate::spectrum::svd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Smoa,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Smoa => "smoa",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `B = 0`, `A` Gaussian with std `scale/√d_in`; the initial update is exactly zero.
    ZeroUpdate,
    /// Both factors i.i.d. `N(0, scale²)`.
    Gaussian,
    /// LoRA only: factors from the target's leading singular triplets,
    /// `B = U_r √(scale·Σ_r)`, `A = √(scale·Σ_r) V_rᵀ`.
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    pub scheme: InitScheme,
    pub seed: u64,
    pub scale: f64,
}

impl AdapterInit {
    pub fn zero_update(seed: u64) -> Self {
        Self { scheme: InitScheme::ZeroUpdate, seed, scale: 1.0 }
    }

    pub fn gaussian(seed: u64, scale: f64) -> Self {
        Self { scheme: InitScheme::Gaussian, seed, scale }
    }

    pub fn spectral(scale: f64) -> Self {
        Self { scheme: InitScheme::Spectral, seed: 0, scale }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Argument(format!("init scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

impl Default for AdapterInit {
    fn default() -> Self {
        Self::zero_update(0)
    }
}

fn init_pair(
    rows: usize,
    cols: usize,
    rank: usize,
    init: &AdapterInit,
    rng: &mut crate::random::Rng,
) -> Result<(Matrix, Matrix)> {
    match init.scheme {
        InitScheme::ZeroUpdate => {
            let a = gaussian_matrix(rank, cols, init.scale / (cols as f64).sqrt(), rng);
            Ok((a, Matrix::zeros(rows, rank)))
        }
        InitScheme::Gaussian => {
            let a = gaussian_matrix(rank, cols, init.scale, rng);
            let b = gaussian_matrix(rows, rank, init.scale, rng);
            Ok((a, b))
        }
        InitScheme::Spectral => Err(Error::Config(
            "spectral initialization needs a target; use LoraAdapter::spectral".into(),
        )),
    }
}

/// `ΔW = B·A` with `A: r x d_in`, `B: d_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::dim("lora factors", b.shape(), a.shape()));
        }
        Ok(Self { a, b })
    }

    pub fn init(d_out: usize, d_in: usize, r: usize, init: &AdapterInit) -> Result<Self> {
        init.validate()?;
        if r == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut rng = seeded_rng(init.seed);
        let (a, b) = init_pair(d_out, d_in, r, init, &mut rng)?;
        Self::new(a, b)
    }

    /// Spectral initialization from `target`'s leading `r` singular triplets.
    /// With `scale = 1` this is exactly the truncated-SVD optimum.
    pub fn spectral(target: &Matrix, r: usize, scale: f64) -> Result<Self> {
        AdapterInit::spectral(scale).validate()?;
        let m = target.rows().min(target.cols());
        if r == 0 || r > m {
            return Err(Error::Config(format!("spectral init rank {r} must lie in 1..={m}")));
        }
        let d = svd(target)?;
        let (u, v, s) = (d.left_vectors(), d.right_vectors(), d.singular_values());
        let root: Vec<f64> = s[..r].iter().map(|x| (scale * x).sqrt()).collect();
        let b = Matrix::from_fn(target.rows(), r, |i, j| u.get(i, j) * root[j]);
        let a = Matrix::from_fn(r, target.cols(), |i, j| root[i] * v.get(j, i));
        Self::new(a, b)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn r(&self) -> usize {
        self.a.rows()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }
}

/// Trainable factors of one SMoA block: `A_k: ρ x d_in/K`, `B_k: d_out/K x ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFactors {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoaAdapter {
    plan: Arc<BlockPlan>,
    rho: usize,
    factors: Vec<BlockFactors>,
}

impl SmoaAdapter {
    pub fn new(plan: Arc<BlockPlan>, factors: Vec<BlockFactors>) -> Result<Self> {
        if factors.len() != plan.k() {
            return Err(Error::Config(format!(
                "plan has K={} blocks but {} factor pairs were given",
                plan.k(),
                factors.len()
            )));
        }
        let rho = factors[0].a.rows();
        let (br, bc) = plan.block_shape();
        for f in &factors {
            if f.a.shape() != (rho, bc) {
                return Err(Error::dim("smoa A_k", f.a.shape(), (rho, bc)));
            }
            if f.b.shape() != (br, rho) {
                return Err(Error::dim("smoa B_k", f.b.shape(), (br, rho)));
            }
        }
        Ok(Self { plan, rho, factors })
    }

    /// Fresh factors for reference budget `r`; `K` must divide `r`.
    pub fn init(plan: Arc<BlockPlan>, r: usize, init: &AdapterInit) -> Result<Self> {
        init.validate()?;
        let rho = local_rank(r, plan.k())?;
        let (br, bc) = plan.block_shape();
        let mut rng = seeded_rng(init.seed);
        let factors = (0..plan.k())
            .map(|_| init_pair(br, bc, rho, init, &mut rng).map(|(a, b)| BlockFactors { a, b }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(plan, factors)
    }

    /// Spectral initialization for block-aligned targets: each block of the
    /// reordered target is divided entrywise by its anchor (entries where the
    /// anchor is negligible are dropped) and the leading `ρ` singular triplets
    /// of the quotient seed `B_k`, `A_k`. With `scale = 1` a witness target is
    /// recovered exactly.
    pub fn spectral(plan: Arc<BlockPlan>, target: &Matrix, r: usize, scale: f64) -> Result<Self> {
        AdapterInit::spectral(scale).validate()?;
        plan.check_shape("spectral init target", target)?;
        let rho = local_rank(r, plan.k())?;
        let (br, bc) = plan.block_shape();
        if rho > br.min(bc) {
            return Err(Error::Config(format!("local rank {rho} exceeds block shape {br}x{bc}")));
        }
        let reordered = target.apply_permutations(plan.p_out(), plan.p_in())?;
        let factors = plan
            .diagonal_blocks(&reordered)?
            .iter()
            .zip(plan.anchors())
            .map(|(t, m)| {
                let cutoff = 1e-12 * m.max_abs();
                let quotient = Matrix::from_fn(br, bc, |i, j| {
                    let a = m.get(i, j);
                    if a.abs() > cutoff {
                        t.get(i, j) / a
                    } else {
                        0.0
                    }
                });
                let l = LoraAdapter::spectral(&quotient, rho, scale)?;
                Ok(BlockFactors { a: l.a, b: l.b })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(plan, factors)
    }

    pub fn plan(&self) -> &Arc<BlockPlan> {
        &self.plan
    }

    pub fn rho(&self) -> usize {
        self.rho
    }

    pub fn k(&self) -> usize {
        self.plan.k()
    }

    /// Reference LoRA budget `r = ρK`.
    pub fn r(&self) -> usize {
        self.rho * self.plan.k()
    }

    pub fn factors(&self) -> &[BlockFactors] {
        &self.factors
    }

    pub fn shape(&self) -> (usize, usize) {
        self.plan.shape()
    }

    /// Local updates `(B_kA_k)⊙M_k`.
    pub fn block_updates(&self) -> Vec<Matrix> {
        self.factors
            .iter()
            .zip(self.plan.anchors())
            .map(|(f, m)| {
                f.b.matmul(&f.a)
                    .and_then(|c| c.hadamard(m))
                    .expect("factor shapes checked at construction")
            })
            .collect()
    }

    /// `ΔW̃ = blkdiag(ΔM_1, …, ΔM_K)` in reordered coordinates.
    pub fn reordered_update(&self) -> Matrix {
        block_diagonal(&self.block_updates()).expect("K >= 1")
    }
}

/// `ρ = r/K`, requiring `K | r` and `r > 0`.
pub fn local_rank(r: usize, k: usize) -> Result<usize> {
    if k == 0 || r == 0 || !r.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "rank budget r={r} must be a positive multiple of K={k}"
        )));
    }
    Ok(r / k)
}

pub fn lora_update(adapter: &LoraAdapter) -> Matrix {
    adapter.b.matmul(&adapter.a).expect("factor shapes checked at construction")
}

/// `ΔW` in original coordinates.
pub fn smoa_update(adapter: &SmoaAdapter) -> Matrix {
    adapter
        .reordered_update()
        .invert_permutations(adapter.plan.p_out(), adapter.plan.p_in())
        .expect("plan permutations match the block layout")
}

/// Either adapter family behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    Smoa(SmoaAdapter),
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Smoa(_) => AdapterKind::Smoa,
        }
    }

    pub fn update(&self) -> Matrix {
        match self {
            Adapter::Lora(a) => lora_update(a),
            Adapter::Smoa(a) => smoa_update(a),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Adapter::Lora(a) => a.shape(),
            Adapter::Smoa(a) => a.shape(),
        }
    }

    /// Reference rank budget `r`.
    pub fn r(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.r(),
            Adapter::Smoa(a) => a.r(),
        }
    }

    fn matrices(&self) -> Vec<&Matrix> {
        match self {
            Adapter::Lora(l) => vec![&l.a, &l.b],
            Adapter::Smoa(s) => s.factors.iter().flat_map(|f| [&f.a, &f.b]).collect(),
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.matrices().iter().map(|m| m.as_slice().len()).sum()
    }

    /// All trainable entries, in factor order (`A`, `B` or `A_1, B_1, …`).
    pub fn to_flat(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    /// Same structure with entries replaced from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Adapter> {
        if flat.len() != self.trainable_params() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                self.trainable_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        let mut take = |m: &Matrix| -> Result<Matrix> {
            let n = m.as_slice().len();
            let out = Matrix::new(m.rows(), m.cols(), flat[at..at + n].to_vec());
            at += n;
            out
        };
        Ok(match self {
            Adapter::Lora(l) => Adapter::Lora(LoraAdapter::new(take(&l.a)?, take(&l.b)?)?),
            Adapter::Smoa(s) => {
                let factors = s
                    .factors
                    .iter()
                    .map(|f| Ok(BlockFactors { a: take(&f.a)?, b: take(&f.b)? }))
                    .collect::<Result<Vec<_>>>()?;
                Adapter::Smoa(SmoaAdapter::new(s.plan.clone(), factors)?)
            }
        })
    }
}

impl From<LoraAdapter> for Adapter {
    fn from(a: LoraAdapter) -> Self {
        Adapter::Lora(a)
    }
}

impl From<SmoaAdapter> for Adapter {
    fn from(a: SmoaAdapter) -> Self {
        Adapter::Smoa(a)
    }
}

/// `(W0 + ΔW)·x` for `x: d_in x batch`.
pub fn apply_forward(w0: &Matrix, update: &Matrix, x: &Matrix) -> Result<Matrix> {
    w0.add(update)?.matmul(x)
}

/// `W0 + ΔW`.
pub fn merge(w0: &Matrix, adapter: &Adapter) -> Result<Matrix> {
    if w0.shape() != adapter.shape() {
        return Err(Error::dim("merge", w0.shape(), adapter.shape()));
    }
    w0.add(&adapter.update())
}

/// Trainable parameter count: `r(d_in + d_out)` for LoRA, `(r/K)(d_in + d_out)` for SMoA.
pub fn param_count(kind: AdapterKind, d_in: usize, d_out: usize, r: usize, k: usize) -> Result<usize> {
    match kind {
        AdapterKind::Lora => Ok(r * (d_in + d_out)),
        AdapterKind::Smoa => {
            if k == 0 || !r.is_multiple_of(k) || !d_in.is_multiple_of(k) || !d_out.is_multiple_of(k) {
                return Err(Error::Config(format!(
                    "K={k} must divide r={r}, d_in={d_in} and d_out={d_out}"
                )));
            }
            Ok(r / k * (d_in + d_out))
        }
    }
}

pub const ADAPTER_FORMAT: &str = "SMOA-ADPT";

/// JSON envelope of a stored adapter; factor matrices live in sibling SMOA-MAT files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterFile {
    pub format: String,
    pub version: u32,
    pub kind: AdapterKind,
    pub r: usize,
    pub k: Option<usize>,
    pub rho: Option<usize>,
    pub d_out: usize,
    pub d_in: usize,
    pub plan_path: Option<String>,
    pub plan_hash: Option<String>,
    /// `[A, B]` for LoRA, `[A_1, B_1, …, A_K, B_K]` for SMoA; relative to the envelope.
    pub factors: Vec<String>,
    pub factor_hashes: Vec<String>,
    pub init: Option<AdapterInit>,
    pub seed: Option<u64>,
}

/// Writes `<stem>.json` plus factor files into the directory of `path`.
/// `plan_path` is recorded relative to that directory when possible.
pub fn save_adapter(
    path: &Path,
    adapter: &Adapter,
    plan_path: Option<&Path>,
    init: Option<AdapterInit>,
) -> Result<AdapterFile> {
    let dir = parent_dir(path);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("adapter")
        .to_string();
    let mut names = Vec::new();
    let mut hashes = Vec::new();
    let mut put = |label: String, m: &Matrix| -> Result<()> {
        let name = format!("{stem}_{label}.smat");
        write_matrix(&dir.join(&name), m)?;
        hashes.push(io::content_hash(m));
        names.push(name);
        Ok(())
    };
    let (d_out, d_in) = adapter.shape();
    let (k, rho) = match adapter {
        Adapter::Lora(l) => {
            put("A".into(), &l.a)?;
            put("B".into(), &l.b)?;
            (None, None)
        }
        Adapter::Smoa(s) => {
            for (i, f) in s.factors.iter().enumerate() {
                put(format!("A{}", i + 1), &f.a)?;
                put(format!("B{}", i + 1), &f.b)?;
            }
            (Some(s.k()), Some(s.rho))
        }
    };
    let (plan_rel, plan_hash) = match plan_path {
        Some(p) => (Some(relative_to(&dir, p)), Some(file_hash(p)?)),
        None => (None, None),
    };
    if adapter.kind() == AdapterKind::Smoa && plan_rel.is_none() {
        return Err(Error::Argument("an SMoA adapter file must reference its plan".into()));
    }
    let file = AdapterFile {
        format: ADAPTER_FORMAT.into(),
        version: 1,
        kind: adapter.kind(),
        r: adapter.r(),
        k,
        rho,
        d_out,
        d_in,
        plan_path: plan_rel,
        plan_hash,
        factors: names,
        factor_hashes: hashes,
        seed: init.map(|i| i.seed),
        init,
    };
    let json = serde_json::to_string_pretty(&file).expect("adapter envelope serializes");
    write_atomic(path, json.as_bytes())?;
    Ok(file)
}

/// Loads an adapter, rejecting envelopes whose plan or factor files changed
/// since they were written.
pub fn load_adapter(path: &Path) -> Result<(Adapter, AdapterFile)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AdapterFile = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("malformed adapter JSON: {e}")))?;
    if file.format != ADAPTER_FORMAT || file.version != 1 {
        return Err(Error::Validation(format!(
            "expected {ADAPTER_FORMAT} v1, got {} v{}",
            file.format, file.version
        )));
    }
    let dir = parent_dir(path);
    if file.factors.len() != file.factor_hashes.len() {
        return Err(Error::Validation("factor list and hash list differ in length".into()));
    }
    let mut mats = Vec::with_capacity(file.factors.len());
    for (name, want) in file.factors.iter().zip(&file.factor_hashes) {
        let m = read_matrix(&resolve(&dir, name))?;
        if &io::content_hash(&m) != want {
            return Err(Error::Validation(format!("factor file {name} does not match its recorded hash")));
        }
        mats.push(m);
    }
    let adapter = match file.kind {
        AdapterKind::Lora => {
            let [a, b]: [Matrix; 2] = mats
                .try_into()
                .map_err(|_| Error::Validation("LoRA adapter needs exactly two factors".into()))?;
            Adapter::Lora(LoraAdapter::new(a, b)?)
        }
        AdapterKind::Smoa => {
            let plan_rel = file
                .plan_path
                .as_deref()
                .ok_or_else(|| Error::Validation("SMoA adapter without plan_path".into()))?;
            let plan = Arc::new(load_checked_plan(&resolve(&dir, plan_rel), file.plan_hash.as_deref())?);
            if mats.len() != 2 * plan.k() {
                return Err(Error::Validation(format!(
                    "SMoA adapter lists {} factor files for K={}",
                    mats.len(),
                    plan.k()
                )));
            }
            let mut it = mats.into_iter();
            let factors = (0..plan.k())
                .map(|_| BlockFactors {
                    a: it.next().expect("counted"),
                    b: it.next().expect("counted"),
                })
                .collect();
            Adapter::Smoa(SmoaAdapter::new(plan, factors)?)
        }
    };
    if adapter.shape() != (file.d_out, file.d_in) || adapter.r() != file.r {
        return Err(Error::Validation("adapter envelope disagrees with its factor shapes".into()));
    }
    Ok((adapter, file))
}

/// Loads a plan and checks its file hash when one was recorded.
pub fn load_checked_plan(path: &Path, expected_hash: Option<&str>) -> Result<BlockPlan> {
    if let Some(want) = expected_hash {
        let got = file_hash(path)?;
        if got != want {
            return Err(Error::Validation(format!(
                "stale reference: plan {} has hash {got}, expected {want}",
                path.display()
            )));
        }
    }
    io::load_plan(path)
}

fn relative_to(dir: &Path, target: &Path) -> String {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (d, t) = (abs(dir), abs(target));
    match t.strip_prefix(&d) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => t.to_string_lossy().into_owned(),
    }
}
