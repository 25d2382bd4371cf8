//! Full-batch gradient descent of LoRA and SMoA factors against a target
//! update under `L(θ) = ½‖Δ(θ) − T‖_F²`.
//!
//! Traces record the squared residual `‖Δ(θ) − T‖_F² = 2L`, the quantity the
//! Eckart–Young floor `Σ_{j>r} σ_j(T)²` bounds from below for LoRA.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterInit, AdapterKind, BlockFactors, InitScheme, LoraAdapter, SmoaAdapter};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::preprocess::BlockPlan;
use crate::spectrum;

#[derive(Debug, Clone)]
pub struct FitProblem {
    target: Matrix,
    plan: Option<Arc<BlockPlan>>,
}

impl FitProblem {
    pub fn new(target: Matrix, plan: Option<Arc<BlockPlan>>) -> Result<Self> {
        if let Some(p) = &plan {
            p.check_shape("fit target", &target)?;
        }
        Ok(Self { target, plan })
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn plan(&self) -> Option<&Arc<BlockPlan>> {
        self.plan.as_ref()
    }
}

/// Target pre-split for the adapter family being fitted.
enum Prepared<'a> {
    Lora { target: &'a Matrix },
    Smoa { blocks: Vec<Matrix>, off_block: f64 },
}

impl<'a> Prepared<'a> {
    fn new(problem: &'a FitProblem, adapter: &Adapter) -> Result<Self> {
        if problem.target.shape() != adapter.shape() {
            return Err(Error::dim("fit", adapter.shape(), problem.target.shape()));
        }
        match adapter {
            Adapter::Lora(_) => Ok(Prepared::Lora { target: &problem.target }),
            Adapter::Smoa(s) => {
                let plan = problem
                    .plan
                    .as_ref()
                    .ok_or_else(|| Error::Config("an SMoA fit needs the block plan".into()))?;
                if **plan != **s.plan() {
                    return Err(Error::Config("adapter was built on a different plan than the problem".into()));
                }
                let reordered = problem.target.apply_permutations(plan.p_out(), plan.p_in())?;
                let (br, bc) = plan.block_shape();
                let mut off_block = 0.0;
                for i in 0..reordered.rows() {
                    for j in 0..reordered.cols() {
                        if i / br != j / bc {
                            off_block += reordered.get(i, j).powi(2);
                        }
                    }
                }
                Ok(Prepared::Smoa {
                    blocks: plan.diagonal_blocks(&reordered)?,
                    off_block,
                })
            }
        }
    }

    /// Factor-dependent residual entries in double-double: `BA − T` for LoRA,
    /// the per-block `(B_kA_k)⊙M_k − T̃_k` for SMoA.
    fn residuals_dd(&self, adapter: &Adapter) -> Vec<Dd> {
        let parts: Vec<(&Matrix, &Matrix, Option<&Matrix>, &Matrix)> = match (self, adapter) {
            (Prepared::Lora { target }, Adapter::Lora(l)) => vec![(l.b(), l.a(), None, *target)],
            (Prepared::Smoa { blocks, .. }, Adapter::Smoa(s)) => s
                .factors()
                .iter()
                .zip(s.plan().anchors())
                .zip(blocks)
                .map(|((f, m), t)| (&f.b, &f.a, Some(m), t))
                .collect(),
            _ => unreachable!("prepared for the same adapter kind"),
        };
        let mut out = Vec::new();
        for (b, a, m, t) in parts {
            for i in 0..b.rows() {
                for j in 0..a.cols() {
                    let mut acc = Dd::default();
                    for l in 0..b.cols() {
                        acc = acc.add(Dd::prod(b.get(i, l), a.get(l, j)));
                    }
                    if let Some(m) = m {
                        acc = acc.scale(m.get(i, j));
                    }
                    out.push(acc.add(Dd(-t.get(i, j), 0.0)));
                }
            }
        }
        out
    }

    /// `‖Δ − T‖_F²`.
    fn residual_sq(&self, adapter: &Adapter) -> f64 {
        match (self, adapter) {
            (Prepared::Lora { target }, Adapter::Lora(l)) => crate::adapters::lora_update(l)
                .sub(target)
                .expect("shapes checked")
                .frobenius_sq(),
            (Prepared::Smoa { blocks, off_block }, Adapter::Smoa(s)) => {
                s.block_updates()
                    .iter()
                    .zip(blocks)
                    .map(|(u, t)| u.sub(t).expect("shapes checked").frobenius_sq())
                    .sum::<f64>()
                    + off_block
            }
            _ => unreachable!("prepared for the same adapter kind"),
        }
    }

    fn gradient(&self, adapter: &Adapter) -> Adapter {
        match (self, adapter) {
            (Prepared::Lora { target }, Adapter::Lora(l)) => {
                let r = crate::adapters::lora_update(l).sub(target).expect("shapes checked");
                let ga = l.b().transpose().matmul(&r).expect("shapes checked");
                let gb = r.matmul(&l.a().transpose()).expect("shapes checked");
                Adapter::Lora(LoraAdapter::new(ga, gb).expect("gradient mirrors factor shapes"))
            }
            (Prepared::Smoa { blocks, .. }, Adapter::Smoa(s)) => {
                let factors = s
                    .factors()
                    .iter()
                    .zip(s.block_updates())
                    .zip(blocks.iter().zip(s.plan().anchors()))
                    .map(|((f, du), (t, m))| {
                        let g = du.sub(t).and_then(|r| r.hadamard(m)).expect("shapes checked");
                        BlockFactors {
                            a: f.b.transpose().matmul(&g).expect("shapes checked"),
                            b: g.matmul(&f.a.transpose()).expect("shapes checked"),
                        }
                    })
                    .collect();
                Adapter::Smoa(SmoaAdapter::new(s.plan().clone(), factors).expect("gradient mirrors factor shapes"))
            }
            _ => unreachable!("prepared for the same adapter kind"),
        }
    }
}

/// Squared residual `‖Δ(θ) − T‖_F²` of an adapter against the problem target.
pub fn residual_sq(problem: &FitProblem, adapter: &Adapter) -> Result<f64> {
    Ok(Prepared::new(problem, adapter)?.residual_sq(adapter))
}

/// `∂L/∂θ` for `L = ½‖Δ(θ) − T‖_F²`, shaped like the adapter's factors.
///
/// LoRA: `∂B = R·Aᵀ`, `∂A = Bᵀ·R` with `R = BA − T`. SMoA, per block with
/// reordered residual `R̃_k = (B_kA_k)⊙M_k − T̃_k`: `∂B_k = (R̃_k⊙M_k)·A_kᵀ`,
/// `∂A_k = B_kᵀ·(R̃_k⊙M_k)`.
pub fn gradient(problem: &FitProblem, adapter: &Adapter) -> Result<Adapter> {
    Ok(Prepared::new(problem, adapter)?.gradient(adapter))
}

/// Max over trainable entries of `|analytic − central FD| / max(|analytic|, |FD|, 1e-12)`.
///
/// `L(θ+h) − L(θ−h)` is summed entrywise as `½ Σ (r₊ − r₋)(r₊ + r₋)` with the
/// residuals and the sum carried in double-double, so neither the difference of
/// two nearly equal losses nor that of two rounded products loses the signal.
pub fn finite_difference_check(problem: &FitProblem, adapter: &Adapter, step: f64) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Argument(format!("finite-difference step must lie in (0, 1e-3], got {step}")));
    }
    let prep = Prepared::new(problem, adapter)?;
    let analytic = prep.gradient(adapter).to_flat();
    let theta = adapter.to_flat();
    let residuals = |flat: &[f64]| -> Result<Vec<Dd>> { Ok(prep.residuals_dd(&adapter.with_flat(flat)?)) };
    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for (i, &g) in analytic.iter().enumerate() {
        probe[i] = theta[i] + step;
        let up = residuals(&probe)?;
        let hi = probe[i];
        probe[i] = theta[i] - step;
        let down = residuals(&probe)?;
        let width = hi - probe[i];
        probe[i] = theta[i];
        let mut diff = Dd::default();
        for (u, d) in up.iter().zip(&down) {
            let delta = u.add(d.neg());
            diff = diff.add(delta.scale(0.5 * (u.0 + d.0)));
        }
        let fd = diff.0 / width;
        let denom = g.abs().max(fd.abs()).max(1e-12);
        worst = worst.max((g - fd).abs() / denom);
    }
    Ok(worst)
}

/// Unevaluated sum `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Debug, Clone, Copy, Default)]
struct Dd(f64, f64);

impl Dd {
    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd(s, (a - (s - bb)) + (b - bb))
    }

    fn prod(a: f64, b: f64) -> Dd {
        let p = a * b;
        Dd(p, a.mul_add(b, -p))
    }

    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.0, o.0);
        let lo = s.1 + self.1 + o.1;
        Dd::two_sum(s.0, lo)
    }

    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }

    fn scale(self, x: f64) -> Dd {
        let p = Dd::prod(self.0, x);
        Dd::two_sum(p.0, p.1 + self.1 * x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub step_size: f64,
    pub max_steps: usize,
    pub grad_tol: f64,
    /// Relative slack when comparing a LoRA fit against its Eckart–Young floor.
    pub loss_floor_tol: f64,
    pub max_halvings: u32,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            max_steps: 50_000,
            grad_tol: 1e-9,
            loss_floor_tol: 1e-3,
            max_halvings: 10,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Argument(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.max_steps == 0 {
            return Err(Error::Argument("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `‖Δ − T‖_F²`.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    GradientTolerance,
    MaxSteps,
    /// No step within the halving budget decreased the loss, and the
    /// first-order decrease `η‖g‖²` is already below roundoff in the loss.
    Roundoff,
    /// No step within the halving budget decreased the loss.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct FitTrace {
    pub records: Vec<StepRecord>,
    pub adapter: Adapter,
    pub converged: bool,
    pub stop: StopReason,
    /// Eckart–Young floor `Σ_{j>r} σ_j(T)²`, present for LoRA fits.
    pub floor: Option<f64>,
    pub target_energy: f64,
}

impl FitTrace {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Final loss over `‖T‖_F²` (0 when the target is zero).
    pub fn relative_loss(&self) -> f64 {
        if self.target_energy == 0.0 {
            self.final_loss()
        } else {
            self.final_loss() / self.target_energy
        }
    }

    /// `step,loss,grad_norm` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_norm\n");
        for r in &self.records {
            writeln!(s, "{},{:?},{:?}", r.step, r.loss, r.grad_norm).expect("writing to a String");
        }
        s
    }

    pub fn summary(&self, config: &FitConfig, seed: Option<u64>) -> FitSummary {
        FitSummary {
            kind: self.adapter.kind(),
            r: self.adapter.r(),
            final_loss: self.final_loss(),
            relative_loss: self.relative_loss(),
            floor: self.floor,
            converged: self.converged,
            stop: self.stop,
            steps: self.records.last().map_or(0, |r| r.step),
            seed,
            config: *config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub kind: AdapterKind,
    pub r: usize,
    pub final_loss: f64,
    pub relative_loss: f64,
    pub floor: Option<f64>,
    pub converged: bool,
    pub stop: StopReason,
    pub steps: usize,
    pub seed: Option<u64>,
    pub config: FitConfig,
}

/// Builds the starting adapter; spectral schemes read the problem target.
pub fn initial_adapter(problem: &FitProblem, kind: AdapterKind, r: usize, init: &AdapterInit) -> Result<Adapter> {
    let (d_out, d_in) = problem.target.shape();
    match (kind, init.scheme) {
        (AdapterKind::Lora, InitScheme::Spectral) => Ok(LoraAdapter::spectral(&problem.target, r, init.scale)?.into()),
        (AdapterKind::Lora, _) => Ok(LoraAdapter::init(d_out, d_in, r, init)?.into()),
        (AdapterKind::Smoa, scheme) => {
            let plan = problem
                .plan
                .clone()
                .ok_or_else(|| Error::Config("an SMoA fit needs the block plan".into()))?;
            if scheme == InitScheme::Spectral {
                Ok(SmoaAdapter::spectral(plan, &problem.target, r, init.scale)?.into())
            } else {
                Ok(SmoaAdapter::init(plan, r, init)?.into())
            }
        }
    }
}

pub fn fit_with_init(
    problem: &FitProblem,
    kind: AdapterKind,
    r: usize,
    init: &AdapterInit,
    config: &FitConfig,
) -> Result<FitTrace> {
    fit(problem, initial_adapter(problem, kind, r, init)?, config)
}

/// Gradient descent with backtracking: each step starts from
/// `config.step_size` and halves on loss increase. Accepted steps never
/// increase the loss.
pub fn fit(problem: &FitProblem, start: Adapter, config: &FitConfig) -> Result<FitTrace> {
    config.validate()?;
    let prep = Prepared::new(problem, &start)?;
    let floor = match &start {
        Adapter::Lora(l) => {
            let m = problem.target.rows().min(problem.target.cols());
            Some(spectrum::tail_energy(&problem.target, l.r().min(m))?)
        }
        Adapter::Smoa(_) => None,
    };
    let check = |loss: f64, step: usize| -> Result<f64> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::Numerical(format!("non-finite loss at step {step}")))
        }
    };

    let mut adapter = start;
    let mut theta = adapter.to_flat();
    let mut loss = check(prep.residual_sq(&adapter), 0)?;
    let mut grad = prep.gradient(&adapter).to_flat();
    let mut grad_norm = norm(&grad);
    let mut records = vec![StepRecord { step: 0, loss, grad_norm }];
    let mut stop = StopReason::MaxSteps;

    for step in 1..=config.max_steps {
        if grad_norm < config.grad_tol || loss == 0.0 {
            stop = StopReason::GradientTolerance;
            break;
        }
        let mut accepted = None;
        let mut eta = config.step_size;
        for _ in 0..=config.max_halvings {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - eta * g).collect();
            let cand = adapter.with_flat(&trial).map_err(|_| {
                Error::Numerical(format!("non-finite parameters at step {step}"))
            })?;
            let trial_loss = check(prep.residual_sq(&cand), step)?;
            if trial_loss <= loss {
                accepted = Some((trial, cand, trial_loss));
                break;
            }
            eta *= 0.5;
        }
        let Some((t, a, l)) = accepted else {
            let predicted = config.step_size * grad_norm * grad_norm;
            stop = if predicted <= 64.0 * f64::EPSILON * loss {
                StopReason::Roundoff
            } else {
                StopReason::Stalled
            };
            break;
        };
        theta = t;
        adapter = a;
        loss = l;
        grad = prep.gradient(&adapter).to_flat();
        grad_norm = norm(&grad);
        records.push(StepRecord { step, loss, grad_norm });
    }
    if grad_norm < config.grad_tol || loss == 0.0 {
        stop = StopReason::GradientTolerance;
    }

    Ok(FitTrace {
        records,
        adapter,
        converged: matches!(stop, StopReason::GradientTolerance | StopReason::Roundoff),
        stop,
        floor,
        target_energy: problem.target.frobenius_sq(),
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
