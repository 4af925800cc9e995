//! Ground truth for validation: Monte Carlo hitting times, closed-form
//! solutions, and lattice evaluation with CSV export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chains::{ChainError, Kernel, Region};
use crate::format::fmt_g;
use crate::rng::{domain, Streams};

pub const DEFAULT_STEP_CAP: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("replication {replication} did not hit the target within {steps} steps")]
    NonHitting { replication: u64, steps: u64 },
    #[error("grid has no points inside the region")]
    EmptyGrid,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid oracle request: {0}")]
    Invalid(String),
    #[error("oracle output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: u64,
}

impl OracleEstimate {
    /// Sample mean and `sd / √n`, summed in slice order.
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let nf = n as f64;
        let mean = values.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / nf).sqrt(),
            n: n as u64,
        }
    }
}

/// Where a Monte Carlo oracle draws its randomness and how it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleRun {
    pub seed: u64,
    /// Distinguishes independent oracle queries under one seed (e.g. grid point index).
    pub query: u64,
    /// 1 runs inline; more uses a rayon pool. Results are identical either way.
    pub threads: usize,
    pub step_cap: u64,
}

impl OracleRun {
    pub fn new(seed: u64, query: u64) -> Self {
        Self {
            seed,
            query,
            threads: 1,
            step_cap: DEFAULT_STEP_CAP,
        }
    }
}

/// `T_A = inf{n ≥ 0 : X_n ∈ A}` for one path from `x`.
pub fn hitting_time(
    kernel: &dyn Kernel,
    x: &[f64],
    target: &Region,
    rng: &mut crate::rng::SimRng,
    step_cap: u64,
) -> Result<Option<u64>, ChainError> {
    if target.contains(x) {
        return Ok(Some(0));
    }
    let mut cur = x.to_vec();
    for n in 1..=step_cap {
        cur = kernel.step(&cur, rng)?;
        if target.contains(&cur) {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

/// Mean and standard error of `T_A` over `n` independent paths from `x`.
pub fn mc_hitting_time(
    kernel: &dyn Kernel,
    x: &[f64],
    target: &Region,
    n: u64,
    run: OracleRun,
) -> Result<OracleEstimate, OracleError> {
    if n == 0 {
        return Err(OracleError::Invalid("replications must be positive".into()));
    }
    if !kernel.in_state_space(x) {
        return Err(ChainError::OutsideStateSpace(x.to_vec()).into());
    }
    if target.contains(x) {
        return Ok(OracleEstimate {
            mean: 0.0,
            stderr: 0.0,
            n,
        });
    }
    let streams = Streams::new(run.seed);
    let dom = domain::ORACLE | (run.query << 8);
    let one = |rep: u64| -> Result<f64, OracleError> {
        let mut rng = streams.rng(dom, rep);
        match hitting_time(kernel, x, target, &mut rng, run.step_cap)? {
            Some(t) => Ok(t as f64),
            None => Err(OracleError::NonHitting {
                replication: rep,
                steps: run.step_cap,
            }),
        }
    };
    let values: Vec<f64> = if run.threads <= 1 {
        (0..n).map(one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(run.threads)
            .build()
            .map_err(|e| OracleError::Invalid(e.to_string()))?;
        pool.install(|| (0..n).into_par_iter().map(one).collect::<Result<_, _>>())?
    };
    Ok(OracleEstimate::from_samples(&values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoissonReward {
    /// `r(x) = x`
    Linear,
    /// `r(x) = x²`
    Quadratic,
}

/// Closed-form Poisson solution for the Bernoulli convolution (defined up to
/// an additive constant; this representative vanishes at 0).
pub fn poisson_exact_bernoulli(kind: PoissonReward, x: f64) -> f64 {
    match kind {
        PoissonReward::Linear => 2.0 * x,
        PoissonReward::Quadratic => 4.0 / 3.0 * x * x + 2.0 / 3.0 * x,
    }
}

/// Normalizing constant of `(2 − x1²)(2 − x2²)(2 + x1 x2)` on `[-1, 1]²`.
pub const GIBBS_NORMALIZER: f64 = 200.0 / 9.0;

/// Normalized Gibbs target density (Lebesgue reference).
pub fn gibbs_exact_density(x: &[f64]) -> f64 {
    let (a, b) = (x[0], x[1]);
    if !(-1.0..=1.0).contains(&a) || !(-1.0..=1.0).contains(&b) {
        return 0.0;
    }
    (2.0 - a * a) * (2.0 - b * b) * (2.0 + a * b) / GIBBS_NORMALIZER
}

/// `π(x) / π(0, 0)`: the pinned density learned by density training.
pub fn gibbs_exact_ratio(x: &[f64]) -> f64 {
    gibbs_exact_density(x) / gibbs_exact_density(&[0.0, 0.0])
}

/// Regular lattice `lo + k · spacing` in each coordinate, up to `hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub spacing: f64,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, spacing: f64) -> Self {
        Self { lo, hi, spacing }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn counts(&self) -> Result<Vec<usize>, OracleError> {
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(OracleError::InvalidGrid("spacing must be positive".into()));
        }
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(OracleError::InvalidGrid("bounds have mismatched dimension".into()));
        }
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| {
                if !(l.is_finite() && h.is_finite() && l <= h) {
                    return Err(OracleError::InvalidGrid("bounds must be finite with lo <= hi".into()));
                }
                Ok(((h - l) / self.spacing + 1e-9).floor() as usize + 1)
            })
            .collect()
    }

    /// Lattice points in lexicographic order, optionally filtered by a region.
    pub fn points(&self, filter: Option<&Region>) -> Result<Vec<Vec<f64>>, OracleError> {
        let counts = self.counts()?;
        let total: usize = counts.iter().product();
        let mut out = Vec::new();
        let mut idx = vec![0usize; counts.len()];
        for _ in 0..total {
            let p: Vec<f64> = idx
                .iter()
                .zip(&self.lo)
                .map(|(k, l)| snap(l + *k as f64 * self.spacing))
                .collect();
            if filter.is_none_or(|r| r.contains(&p)) {
                out.push(p);
            }
            for d in (0..counts.len()).rev() {
                idx[d] += 1;
                if idx[d] < counts[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        if out.is_empty() {
            return Err(OracleError::EmptyGrid);
        }
        Ok(out)
    }
}

/// Removes representation noise such as `0.30000000000000004`.
fn snap(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub coords: Vec<f64>,
    pub value: f64,
    pub stderr: Option<f64>,
}

/// Evaluates `f` on every in-region lattice point.
pub fn grid_eval(
    f: &dyn Fn(&[f64]) -> f64,
    grid: &GridSpec,
    filter: Option<&Region>,
) -> Result<Vec<GridRow>, OracleError> {
    Ok(grid
        .points(filter)?
        .into_iter()
        .map(|p| GridRow {
            value: f(&p),
            coords: p,
            stderr: None,
        })
        .collect())
}

/// Monte Carlo hitting-time oracle on every in-region lattice point.
/// Point `k` uses oracle query `k`.
pub fn grid_hitting_times(
    kernel: &dyn Kernel,
    target: &Region,
    grid: &GridSpec,
    filter: Option<&Region>,
    replications: u64,
    seed: u64,
    threads: usize,
    step_cap: u64,
) -> Result<Vec<GridRow>, OracleError> {
    grid.points(filter)?
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let run = OracleRun {
                seed,
                query: k as u64,
                threads,
                step_cap,
            };
            let est = mc_hitting_time(kernel, &p, target, replications, run)?;
            Ok(GridRow {
                coords: p,
                value: est.mean,
                stderr: Some(est.stderr),
            })
        })
        .collect()
}

/// CSV header `x1[,x2],value[,stderr]`.
pub fn grid_csv_header(dim: usize, with_stderr: bool) -> String {
    let mut cols: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    cols.push("value".into());
    if with_stderr {
        cols.push("stderr".into());
    }
    cols.join(",")
}

/// Renders rows with `%.10g` numbers. A stderr column is emitted when any row has one.
pub fn grid_csv(rows: &[GridRow]) -> String {
    let dim = rows.first().map_or(1, |r| r.coords.len());
    let with_stderr = rows.iter().any(|r| r.stderr.is_some());
    let mut out = grid_csv_header(dim, with_stderr);
    out.push('\n');
    for r in rows {
        let mut fields: Vec<String> = r.coords.iter().map(|v| fmt_g(*v)).collect();
        fields.push(fmt_g(r.value));
        if with_stderr {
            fields.push(fmt_g(r.stderr.unwrap_or(0.0)));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<(), OracleError> {
    let mut f = fs::File::create(path)?;
    f.write_all(grid_csv(rows).as_bytes())?;
    Ok(())
}
