//! Rank sweeps over a `(d, K, r)` grid: for every cell and trial a random
//! square base weight is drawn, adapters with nonzero factors are built, and
//! the measured update rank is compared with the analytic ceiling.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{param_count, AdapterInit, AdapterKind, LoraAdapter, SmoaAdapter, Adapter};
use crate::capacity::{achieved_rank, rank_ceiling};
use crate::error::{Error, Result};
use crate::preprocess::build_plan;
use crate::random::{gaussian_matrix, seeded_rng};
use crate::spectrum::tail_energy;

fn default_trials() -> usize {
    1
}

fn default_methods() -> Vec<AdapterKind> {
    vec![AdapterKind::Lora, AdapterKind::Smoa]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub d: Vec<usize>,
    pub k: Vec<usize>,
    pub r: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<AdapterKind>,
    /// Rank tolerance; the default `max(rows, cols) · σ₁ · u` when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid sweep spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.d.is_empty() || self.k.is_empty() || self.r.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("sweep grid needs at least one d, k, r and method".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("sweep needs at least one trial".into()));
        }
        let smoa = self.methods.contains(&AdapterKind::Smoa);
        for (d, k, r) in self.cells() {
            if d == 0 || r == 0 || k == 0 {
                return Err(Error::Config(format!("grid cell d={d} K={k} r={r} has a zero entry")));
            }
            if r > d {
                return Err(Error::Config(format!("grid cell d={d} K={k} r={r}: r exceeds d")));
            }
            if smoa && (d % k != 0 || r % k != 0) {
                return Err(Error::Config(format!("grid cell d={d} K={k} r={r}: K must divide d and r")));
            }
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &d in &self.d {
            for &k in &self.k {
                for &r in &self.r {
                    out.push((d, k, r));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: AdapterKind,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub r: usize,
    pub params: usize,
    pub achieved_rank: usize,
    pub ceiling: usize,
    /// `Σ_{j>r} σ_j(ΔW)²`: squared distance from the update to the nearest rank-`r` matrix.
    pub gap: f64,
}

/// Runs every `(cell, trial)` with seed `spec.seed + index` (index counts
/// cells in `d`, `k`, `r` order, trials innermost). Rows come back in that
/// order, methods in spec order within each trial.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let jobs: Vec<((usize, usize, usize), u64)> = spec
        .cells()
        .into_iter()
        .flat_map(|cell| std::iter::repeat_n(cell, spec.trials))
        .enumerate()
        .map(|(i, cell)| (cell, spec.seed.wrapping_add(i as u64)))
        .collect();
    let rows: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|&((d, k, r), seed)| run_trial(spec, d, k, r, seed))
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

fn run_trial(spec: &SweepSpec, d: usize, k: usize, r: usize, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rng = seeded_rng(seed);
    let w0 = gaussian_matrix(d, d, 1.0, &mut rng);
    let init = AdapterInit::gaussian(seed, 1.0);
    spec.methods
        .iter()
        .map(|&method| {
            let (adapter, ceiling): (Adapter, usize) = match method {
                AdapterKind::Lora => (LoraAdapter::init(d, d, r, &init)?.into(), r.min(d)),
                AdapterKind::Smoa => {
                    let plan = Arc::new(build_plan(&w0, k)?);
                    let ceiling = rank_ceiling(&plan, r)?.total_ceiling;
                    (SmoaAdapter::init(plan, r, &init)?.into(), ceiling)
                }
            };
            let update = adapter.update();
            Ok(SweepRow {
                method,
                d,
                k,
                r,
                params: param_count(method, d, d, r, k)?,
                achieved_rank: achieved_rank(&update, spec.epsilon)?,
                ceiling,
                gap: tail_energy(&update, r.min(d))?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("method,d,K,r,params,achieved_rank,ceiling,gap\n");
    for row in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{:?}",
            row.method, row.d, row.k, row.r, row.params, row.achieved_rank, row.ceiling, row.gap
        )
        .expect("String write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: usize, k: usize, r: Vec<usize>) -> SweepSpec {
        SweepSpec {
            d: vec![d],
            k: vec![k],
            r,
            trials: 1,
            seed: 11,
            methods: default_methods(),
            epsilon: None,
        }
    }

    #[test]
    fn smoa_exceeds_lora_on_small_grid() {
        let rows = run_sweep(&spec(16, 2, vec![2, 4, 8])).unwrap();
        assert_eq!(rows.len(), 6);
        for pair in rows.chunks(2) {
            let (lora, smoa) = (&pair[0], &pair[1]);
            assert_eq!(lora.method, AdapterKind::Lora);
            assert_eq!(lora.achieved_rank, lora.r);
            assert!(smoa.achieved_rank > lora.r);
            assert!(smoa.achieved_rank <= smoa.ceiling);
            assert_eq!(smoa.params * 2, lora.params);
            assert!(lora.gap < 1e-18, "{}", lora.gap);
            assert!(smoa.gap > 0.0);
        }
    }

    #[test]
    fn single_cell_and_determinism() {
        let mut s = spec(8, 2, vec![2]);
        s.methods = vec![AdapterKind::Smoa];
        let a = run_sweep(&s).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(sweep_csv(&a), sweep_csv(&run_sweep(&s).unwrap()));
        assert!(sweep_csv(&a).starts_with("method,d,K,r,params,achieved_rank,ceiling,gap\nsmoa,8,2,2,"));
    }

    #[test]
    fn spec_parsing_and_validation() {
        let s = SweepSpec::from_json(r#"{"d":[16],"k":[2],"r":[2,4]}"#).unwrap();
        assert_eq!(s.trials, 1);
        assert_eq!(s.methods, default_methods());
        assert!(SweepSpec::from_json(r#"{"d":[16],"k":[2]}"#).is_err());
        assert!(SweepSpec::from_json(r#"{"d":[16],"k":[2],"r":[2],"bogus":1}"#).is_err());
        assert!(matches!(run_sweep(&spec(16, 3, vec![3])), Err(Error::Config(_))));
        assert!(matches!(run_sweep(&spec(4, 2, vec![8])), Err(Error::Config(_))));
    }
}
