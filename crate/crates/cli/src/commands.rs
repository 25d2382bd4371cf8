use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::bail;
use clap::{Args, ValueEnum};
use serde_json::{json, Value};

use smoa_core::adapters::{self, Adapter, AdapterInit, AdapterKind, InitScheme, LoraAdapter, SmoaAdapter};
use smoa_core::capacity;
use smoa_core::diagnostics::{self, ActivationSample, ReportOptions};
use smoa_core::io::{content_hash, file_hash, load_plan, read_matrix, save_plan, write_atomic, write_matrix};
use smoa_core::preprocess::{build_plan_with, DominantDirection, PermutationRule, SpectralCentroid};
use smoa_core::random::{gaussian_matrix, low_rank_plus_noise, planted_spikes, seeded_rng};
use smoa_core::spectrum::{self, rank_tolerance};
use smoa_core::sweep::{run_sweep, sweep_csv, SweepSpec};
use smoa_core::trainer::{self, FitConfig, FitProblem};
use smoa_core::{Error, Matrix};

use crate::RunArgs;

pub struct Output {
    pub json: Value,
    pub csv: Option<String>,
}

impl Output {
    fn json(json: Value) -> Self {
        Self { json, csv: None }
    }

    fn with_csv(json: Value, csv: String) -> Self {
        Self { json, csv: Some(csv) }
    }
}

type CmdResult = anyhow::Result<Output>;

/// 1 usage, 2 validation, 3 I/O, 4 numerical.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => 3,
                Error::Numerical(_) => 4,
                Error::Argument(_) => 1,
                Error::Dimension { .. } | Error::Range(_) | Error::Config(_) | Error::Validation(_) => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
    }
    2
}

#[derive(Debug)]
struct UsageError(String);

impl std::error::Error for UsageError {}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn out_path(run: &RunArgs, name: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&run.out).map_err(|e| Error::Io { path: run.out.clone(), source: e })?;
    Ok(run.out.join(name))
}

fn seed(run: &RunArgs) -> u64 {
    run.seed.unwrap_or(0)
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GenKind {
    Gaussian,
    Diagonal,
    Spiked,
    LowRankPlusNoise,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    rows: usize,
    cols: usize,
    #[arg(value_enum)]
    kind: GenKind,
    /// Diagonal entries (diagonal kind).
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Number of planted spikes (spiked kind).
    #[arg(long, default_value_t = 1)]
    spikes: usize,
    /// Spike strength in normalized units, or low-rank scale.
    #[arg(long, default_value_t = 10.0)]
    strength: f64,
    /// Rank of the low-rank part.
    #[arg(long, default_value_t = 1)]
    rank: usize,
    /// Entry standard deviation of the Gaussian part.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value = "matrix.smat")]
    name: String,
}

pub fn gen(run: &RunArgs, a: &GenArgs) -> CmdResult {
    if a.rows == 0 || a.cols == 0 {
        bail!(Error::Argument(format!("shape must be positive, got {}x{}", a.rows, a.cols)));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        bail!(Error::Argument(format!("noise must be finite and >= 0, got {}", a.noise)));
    }
    let mut rng = seeded_rng(seed(run));
    let m = match a.kind {
        GenKind::Gaussian => gaussian_matrix(a.rows, a.cols, a.noise, &mut rng),
        GenKind::Diagonal => {
            if a.values.len() > a.rows.min(a.cols) {
                bail!(Error::Argument(format!(
                    "{} diagonal values do not fit a {}x{} matrix",
                    a.values.len(),
                    a.rows,
                    a.cols
                )));
            }
            Matrix::diagonal(a.rows, a.cols, &a.values)?
        }
        GenKind::Spiked => {
            if a.spikes > a.rows.min(a.cols) {
                bail!(Error::Argument(format!("{} spikes exceed min dimension", a.spikes)));
            }
            planted_spikes(a.rows, a.cols, a.spikes, a.strength, a.noise, &mut rng)
        }
        GenKind::LowRankPlusNoise => low_rank_plus_noise(a.rows, a.cols, a.rank, a.strength, a.noise, &mut rng),
    };
    let path = out_path(run, &a.name)?;
    write_matrix(&path, &m)?;
    log::info!("wrote {}x{} matrix to {}", a.rows, a.cols, path.display());
    Ok(Output::json(json!({
        "path": show(&path),
        "rows": a.rows,
        "cols": a.cols,
        "kind": a.kind.to_possible_value().map(|v| v.get_name().to_string()),
        "seed": seed(run),
        "hash": content_hash(&m),
    })))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Rule {
    Centroid,
    Dominant,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Base weight (SMOA-MAT or CSV).
    #[arg(long)]
    w0: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Rule::Centroid)]
    rule: Rule,
    #[arg(long, default_value = "plan.json")]
    name: String,
}

pub fn plan(run: &RunArgs, a: &PlanArgs) -> CmdResult {
    let w0 = read_matrix(&a.w0)?;
    let rule: &dyn PermutationRule = match a.rule {
        Rule::Centroid => &SpectralCentroid,
        Rule::Dominant => &DominantDirection,
    };
    let plan = build_plan_with(&w0, a.k, rule)?;
    let path = out_path(run, &a.name)?;
    save_plan(&path, &plan)?;
    let (br, bc) = plan.block_shape();
    Ok(Output::json(json!({
        "path": show(&path),
        "k": plan.k(),
        "d_out": plan.d_out(),
        "d_in": plan.d_in(),
        "block_shape": [br, bc],
        "source_hash": plan.source_hash(),
        "plan_hash": file_hash(&path)?,
    })))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Lora,
    Smoa,
}

impl From<KindArg> for AdapterKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Lora => AdapterKind::Lora,
            KindArg::Smoa => AdapterKind::Smoa,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    ZeroUpdate,
    Gaussian,
    Spectral,
}

fn make_init(scheme: InitArg, scale: Option<f64>, seed: u64) -> AdapterInit {
    match scheme {
        InitArg::ZeroUpdate => AdapterInit { scale: scale.unwrap_or(1.0), ..AdapterInit::zero_update(seed) },
        InitArg::Gaussian => AdapterInit::gaussian(seed, scale.unwrap_or(1.0)),
        InitArg::Spectral => AdapterInit::spectral(scale.unwrap_or(0.1)),
    }
}

#[derive(Debug, Args)]
pub struct AdapterArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    r: usize,
    /// Block plan; required for SMoA, supplies dimensions for LoRA.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long, value_enum, default_value_t = InitArg::ZeroUpdate)]
    init: InitArg,
    /// Init scale (default 1, or 0.1 for spectral).
    #[arg(long)]
    scale: Option<f64>,
    /// Target matrix for spectral init.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value = "adapter.json")]
    name: String,
}

pub fn adapter(run: &RunArgs, a: &AdapterArgs) -> CmdResult {
    let init = make_init(a.init, a.scale, seed(run));
    let plan = a.plan.as_deref().map(load_plan).transpose()?.map(Arc::new);
    let target = a.target.as_deref().map(read_matrix).transpose()?;
    let kind: AdapterKind = a.kind.into();
    let adapter: Adapter = match kind {
        AdapterKind::Lora => {
            let (d_out, d_in) = match (&plan, &target, a.d_out, a.d_in) {
                (_, _, Some(o), Some(i)) => (o, i),
                (Some(p), _, _, _) => p.shape(),
                (None, Some(t), _, _) => t.shape(),
                _ => return Err(usage("LoRA adapter needs --d-out/--d-in, --plan or --target")),
            };
            match (init.scheme, &target) {
                (InitScheme::Spectral, Some(t)) => {
                    if t.shape() != (d_out, d_in) {
                        bail!(Error::Dimension {
                            op: "adapter target",
                            left: format!("{d_out}x{d_in}"),
                            right: format!("{}x{}", t.rows(), t.cols()),
                        });
                    }
                    LoraAdapter::spectral(t, a.r, init.scale)?.into()
                }
                (InitScheme::Spectral, None) => return Err(usage("spectral init needs --target")),
                _ => LoraAdapter::init(d_out, d_in, a.r, &init)?.into(),
            }
        }
        AdapterKind::Smoa => {
            let plan = plan.clone().ok_or_else(|| usage("SMoA adapter needs --plan"))?;
            match (init.scheme, &target) {
                (InitScheme::Spectral, Some(t)) => SmoaAdapter::spectral(plan, t, a.r, init.scale)?.into(),
                (InitScheme::Spectral, None) => return Err(usage("spectral init needs --target")),
                _ => SmoaAdapter::init(plan, a.r, &init)?.into(),
            }
        }
    };
    let path = out_path(run, &a.name)?;
    let file = adapters::save_adapter(&path, &adapter, a.plan.as_deref(), Some(init))?;
    Ok(Output::json(json!({
        "path": show(&path),
        "kind": kind,
        "r": adapter.r(),
        "k": file.k,
        "rho": file.rho,
        "shape": [file.d_out, file.d_in],
        "trainable_params": adapter.trainable_params(),
        "plan_hash": file.plan_hash,
        "factors": file.factors,
    })))
}

#[derive(Debug, Args)]
pub struct UpdateArgs {
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long, default_value = "update.smat")]
    name: String,
}

pub fn update(run: &RunArgs, a: &UpdateArgs) -> CmdResult {
    let (adapter, _) = adapters::load_adapter(&a.adapter)?;
    let m = adapter.update();
    let path = out_path(run, &a.name)?;
    write_matrix(&path, &m)?;
    Ok(Output::json(json!({
        "path": show(&path),
        "shape": [m.rows(), m.cols()],
        "kind": adapter.kind(),
        "adapter_hash": file_hash(&a.adapter)?,
        "hash": content_hash(&m),
    })))
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long, conflicts_with = "adapter", required_unless_present = "adapter")]
    matrix: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<PathBuf>,
}

pub fn rank(run: &RunArgs, a: &RankArgs) -> CmdResult {
    let (m, source) = match (&a.matrix, &a.adapter) {
        (Some(p), _) => (read_matrix(p)?, json!({ "matrix": show(p) })),
        (None, Some(p)) => {
            let (ad, file) = adapters::load_adapter(p)?;
            (ad.update(), json!({ "adapter": show(p), "kind": file.kind, "r": file.r }))
        }
        (None, None) => return Err(usage("rank needs --matrix or --adapter")),
    };
    let sigma = spectrum::singular_values(&m)?;
    let eps = match run.epsilon {
        Some(e) if e >= 0.0 && e.is_finite() => e,
        Some(e) => bail!(Error::Argument(format!("epsilon must be finite and >= 0, got {e}"))),
        None => rank_tolerance(m.rows(), m.cols(), sigma.first().copied().unwrap_or(0.0)),
    };
    let rank = sigma.iter().filter(|&&s| s > eps).count();
    let mut csv = String::from("index,sigma\n");
    for (i, s) in sigma.iter().enumerate() {
        writeln!(csv, "{},{s:?}", i + 1)?;
    }
    Ok(Output::with_csv(
        json!({
            "source": source,
            "shape": [m.rows(), m.cols()],
            "rank": rank,
            "epsilon": eps,
            "singular_values": sigma,
        }),
        csv,
    ))
}

#[derive(Debug, Args)]
pub struct CeilingArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    r: usize,
}

pub fn ceiling(_run: &RunArgs, a: &CeilingArgs) -> CmdResult {
    let plan = load_plan(&a.plan)?;
    let report = capacity::rank_ceiling(&plan, a.r)?;
    Ok(Output::json(serde_json::to_value(&report)?))
}

#[derive(Debug, Args)]
pub struct WitnessArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    rho: usize,
    /// Bundle directory name under --out.
    #[arg(long, default_value = "witness")]
    name: String,
}

pub fn witness(run: &RunArgs, a: &WitnessArgs) -> CmdResult {
    let plan = Arc::new(load_plan(&a.plan)?);
    let w = capacity::make_witness(plan, a.rho, seed(run))?;
    let dir = out_path(run, &a.name)?;
    let manifest = capacity::save_witness(&dir, &w)?;
    Ok(Output::json(json!({
        "path": show(&dir),
        "seed": manifest.seed,
        "rho": manifest.rho,
        "k": manifest.k,
        "shape": [manifest.d_out, manifest.d_in],
        "reordered_target_rank": manifest.reordered_target_rank,
        "target_rank": manifest.target_rank,
        "target_hash": manifest.target_hash,
        "plan_hash": manifest.plan_hash,
    })))
}

#[derive(Debug, Args)]
pub struct GapArgs {
    /// Witness bundle directory.
    #[arg(long)]
    witness: PathBuf,
    #[arg(long)]
    r: usize,
}

pub fn gap(_run: &RunArgs, a: &GapArgs) -> CmdResult {
    let (w, manifest) = capacity::load_witness(&a.witness)?;
    let gap = capacity::lora_gap(&w, a.r)?;
    let energy = w.target.frobenius_sq();
    let mut csv = String::from("r,gap\n");
    for g in &manifest.gaps {
        writeln!(csv, "{},{:?}", g.r, g.gap)?;
    }
    Ok(Output::with_csv(
        json!({
            "r": a.r,
            "gap": gap,
            "relative_gap": if energy > 0.0 { gap / energy } else { 0.0 },
            "target_rank": manifest.target_rank,
            "target_hash": manifest.target_hash,
        }),
        csv,
    ))
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Target update matrix.
    #[arg(long, conflicts_with = "witness", required_unless_present = "witness")]
    target: Option<PathBuf>,
    /// Witness bundle; supplies target and plan.
    #[arg(long)]
    witness: Option<PathBuf>,
    /// Block plan (SMoA fits on a plain target).
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    r: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Spectral)]
    init: InitArg,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, default_value_t = FitConfig::default().step_size)]
    step_size: f64,
    #[arg(long, default_value_t = FitConfig::default().max_steps)]
    max_steps: usize,
    #[arg(long, default_value_t = FitConfig::default().grad_tol)]
    grad_tol: f64,
    #[arg(long, default_value_t = FitConfig::default().loss_floor_tol)]
    loss_floor_tol: f64,
    /// Prefix for `<name>_trace.csv`, `<name>.json` and the fitted adapter.
    #[arg(long, default_value = "fit")]
    name: String,
}

pub fn fit(run: &RunArgs, a: &FitArgs) -> CmdResult {
    let (target, plan_path) = match (&a.target, &a.witness) {
        (Some(t), _) => (read_matrix(t)?, a.plan.clone()),
        (None, Some(dir)) => {
            let (w, m) = capacity::load_witness(dir)?;
            (w.target, Some(dir.join(m.plan)))
        }
        (None, None) => return Err(usage("fit needs --target or --witness")),
    };
    let plan = plan_path.as_deref().map(load_plan).transpose()?.map(Arc::new);
    let kind: AdapterKind = a.kind.into();
    let problem = FitProblem::new(target, if kind == AdapterKind::Smoa { plan } else { None })?;
    let init = make_init(a.init, a.scale, seed(run));
    let config = FitConfig {
        step_size: a.step_size,
        max_steps: a.max_steps,
        grad_tol: a.grad_tol,
        loss_floor_tol: a.loss_floor_tol,
        ..FitConfig::default()
    };
    let trace = trainer::fit_with_init(&problem, kind, a.r, &init, &config)?;
    let summary = trace.summary(&config, Some(seed(run)));
    log::info!("fit stopped after {} steps ({:?})", summary.steps, summary.stop);

    let trace_path = out_path(run, &format!("{}_trace.csv", a.name))?;
    let csv = trace.to_csv();
    write_atomic(&trace_path, csv.as_bytes())?;
    let adapter_path = out_path(run, &format!("{}_adapter.json", a.name))?;
    let plan_ref = if kind == AdapterKind::Smoa { plan_path.as_deref() } else { None };
    adapters::save_adapter(&adapter_path, &trace.adapter, plan_ref, Some(init))?;

    let mut out = serde_json::to_value(&summary)?;
    let obj = out.as_object_mut().expect("summary is an object");
    obj.insert("target_hash".into(), json!(content_hash(problem.target())));
    obj.insert(
        "plan_hash".into(),
        json!(plan_ref.map(file_hash).transpose()?),
    );
    obj.insert("trace".into(), json!(show(&trace_path)));
    obj.insert("adapter".into(), json!(show(&adapter_path)));
    let summary_path = out_path(run, &format!("{}.json", a.name))?;
    write_atomic(&summary_path, serde_json::to_string_pretty(&out)?.as_bytes())?;
    Ok(Output::with_csv(out, csv))
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Activation sample, one column per sample (rows = matrix cols).
    #[arg(long)]
    activations: Option<PathBuf>,
    /// Noise scale; estimated from the median singular value when absent.
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long, default_value_t = diagnostics::DEFAULT_BULK_PROBES)]
    probes: usize,
    #[arg(long, default_value_t = diagnostics::DEFAULT_HISTOGRAM_BINS)]
    bins: usize,
    /// Report directory name under --out.
    #[arg(long, default_value = "diagnostics")]
    name: String,
}

pub fn diagnose(run: &RunArgs, a: &DiagnoseArgs) -> CmdResult {
    let w = read_matrix(&a.matrix)?;
    let act = a.activations.as_deref().map(read_matrix).transpose()?.map(ActivationSample::new);
    let opts = ReportOptions {
        epsilon: run.epsilon,
        noise_scale: a.noise_scale,
        seed: seed(run),
        bulk_probes: a.probes,
    };
    let report = diagnostics::full_report(&w, act.as_ref(), &opts)?;
    let dir = out_path(run, &a.name)?;
    report.write_to(&dir, a.bins)?;
    let files: Vec<String> = ["report.json", "nu_histogram.csv", "overlaps.csv"]
        .iter()
        .map(|f| show(&dir.join(f)))
        .collect();
    Ok(Output::with_csv(
        json!({
            "shape": report.shape,
            "noise_scale": report.noise_scale,
            "bulk_edge": report.bulk_edge,
            "outlier_count": report.outlier_count,
            "numerical_rank": report.numerical_rank,
            "epsilon": report.epsilon,
            "bulk_overlap_mean": report.bulk_overlap_mean,
            "bulk_overlap_sigma": report.bulk_overlap_sigma,
            "matrix_hash": content_hash(&w),
            "files": files,
        }),
        report.histogram_csv(a.bins),
    ))
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep spec JSON: {"d": [...], "k": [...], "r": [...], "trials", "seed", "methods", "epsilon"}.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value = "sweep.csv")]
    name: String,
}

pub fn sweep(run: &RunArgs, a: &SweepArgs) -> CmdResult {
    let mut spec = SweepSpec::load(&a.spec)?;
    if let Some(s) = run.seed {
        spec.seed = s;
    }
    if run.epsilon.is_some() {
        spec.epsilon = run.epsilon;
    }
    let rows = run_sweep(&spec)?;
    let csv = sweep_csv(&rows);
    let path = out_path(run, &a.name)?;
    write_atomic(&path, csv.as_bytes())?;

    let smoa_exceeds = rows
        .iter()
        .filter(|r| r.method == AdapterKind::Smoa)
        .all(|r| r.achieved_rank > r.r);
    let within_ceiling = rows.iter().all(|r| r.achieved_rank <= r.ceiling);
    Ok(Output::with_csv(
        json!({
            "path": show(&path),
            "rows": rows.len(),
            "seed": spec.seed,
            "smoa_exceeds_lora_rank": smoa_exceeds,
            "within_ceiling": within_ceiling,
        }),
        csv,
    ))
}
