//! Limited-memory BFGS with a backtracking (Armijo) line search, plus the
//! multi-start training driver used by every model variant.

use std::fmt;

use log::{debug, info};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::data::{median_pairwise_distance, principal_directions};
use crate::error::{invalid, Error, Result};
use crate::exact_gp::GpParams;
use crate::gradients::{nlml_and_grad, pack, unpack, GradResult, ModelKind, ModelParams, ParamVector};
use crate::kernels::{ArdParams, ProjParams};
use crate::spgp::{SpgpKernel, SpgpParams};
use crate::{Matrix, Vector};

/// Sufficient-decrease constant of the line search.
pub const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub max_iterations: usize,
    /// Stop when the gradient infinity-norm drops to this.
    pub grad_tolerance: f64,
    /// Stop when an accepted step improves the value by less than
    /// `value_tolerance * max(1, |f|)`.
    pub value_tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Number of curvature pairs kept by L-BFGS.
    pub history: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { max_iterations: 500, grad_tolerance: 1e-5, value_tolerance: 1e-9, restarts: 5, seed: 0, history: 10 }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.restarts == 0 || self.history == 0 {
            return invalid("iteration, restart and history counts must be at least 1");
        }
        if !(self.grad_tolerance > 0.0 && self.value_tolerance > 0.0) {
            return invalid("tolerances must be positive");
        }
        Ok(())
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    ValueTolerance,
    MaxIterations,
    LineSearchFailed,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::GradientTolerance => "gradient tolerance",
            Termination::ValueTolerance => "value tolerance",
            Termination::MaxIterations => "iteration limit",
            Termination::LineSearchFailed => "line search failed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub value: f64,
    pub grad_norm: f64,
    /// Step length accepted along the search direction (0 for the start point).
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptTrace {
    /// Start point first, then one record per accepted iteration.
    pub records: Vec<IterRecord>,
    pub termination: Termination,
    pub best: Vec<f64>,
    pub best_value: f64,
}

impl OptTrace {
    pub fn initial_value(&self) -> f64 {
        self.records[0].value
    }

    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type Accepted = (Vec<f64>, f64, Vec<f64>, f64);

/// Backtracking from a unit step until the Armijo condition holds.
fn line_search<F>(objective: &mut F, x: &[f64], f: f64, d: &[f64], slope: f64) -> Option<Accepted>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut step = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let trial: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + step * b).collect();
        if let Ok((ft, gt)) = objective(&trial) {
            if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= f + ARMIJO_C1 * step * slope {
                return Some((trial, ft, gt, step));
            }
        }
        step *= 0.5;
    }
    None
}

/// Minimises `objective`, which returns the value and gradient at a point.
///
/// Objective errors during the line search are treated as an infinite value so
/// the step is shortened; an error or non-finite value at `start` is an error.
pub fn minimize<F>(mut objective: F, start: &[f64], cfg: &OptConfig) -> Result<OptTrace>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let (mut f, mut g) = objective(start).map_err(|e| Error::InvalidArgument(format!("objective fails at the start point: {e}")))?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return invalid("objective is not finite at the start point");
    }
    let n = start.len();
    let mut x = start.to_vec();
    let mut records = vec![IterRecord { iter: 0, value: f, grad_norm: inf_norm(&g), step: 0.0 }];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    if inf_norm(&g) <= cfg.grad_tolerance {
        return Ok(OptTrace { records, termination: Termination::GradientTolerance, best: x, best_value: f });
    }

    let mut termination = Termination::MaxIterations;
    for iter in 1..=cfg.max_iterations {
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            for j in 0..n {
                d[j] -= alpha[i] * y_hist[i][j];
            }
        }
        let gamma = if k > 0 { dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]) } else { 1.0 / inf_norm(&g).max(1.0) };
        for v in d.iter_mut() {
            *v *= gamma;
        }
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            for j in 0..n {
                d[j] += s_hist[i][j] * (alpha[i] - beta);
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // lost descent; fall back to steepest descent and forget curvature
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &d);
        }

        let mut accepted = line_search(&mut objective, &x, f, &d, slope);
        if accepted.is_none() && !s_hist.is_empty() {
            // stale curvature pairs can produce a poor direction; retry once
            // along the scaled negative gradient before giving up
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &d);
            accepted = line_search(&mut objective, &x, f, &d, slope);
        }
        let Some((xn, fn_, gn, step)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == cfg.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
        }

        let improvement = f - fn_;
        x = xn;
        f = fn_;
        g = gn;
        let gnorm = inf_norm(&g);
        records.push(IterRecord { iter, value: f, grad_norm: gnorm, step });
        if gnorm <= cfg.grad_tolerance {
            termination = Termination::GradientTolerance;
            break;
        }
        if improvement <= cfg.value_tolerance * f.abs().max(1.0) {
            termination = Termination::ValueTolerance;
            break;
        }
    }
    debug!("optimizer stopped after {} iterations: {termination}", records.len() - 1);
    Ok(OptTrace { records, termination, best: x, best_value: f })
}

/// Sizes of a sparse model to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitShape {
    pub kind: ModelKind,
    /// Number of pseudo-inputs (ignored for the exact GP).
    pub n_pseudo: usize,
    /// Projected dimension (projected variants only).
    pub proj_dim: usize,
}

/// Outcome of [`multistart_fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub final_nlml: f64,
    /// Index of the selected restart.
    pub best_restart: usize,
    pub traces: Vec<OptTrace>,
}

impl FitResult {
    pub fn best_trace(&self) -> &OptTrace {
        &self.traces[self.best_restart]
    }
}

/// Variance with the `1/N` convention.
fn variance(y: &Vector) -> f64 {
    let m = y.mean();
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
}

/// Largest factor by which a restart shrinks the default lengthscales.
const MAX_LENGTHSCALE_SHRINK: f64 = 40.0;
/// Restarts scale random projections by a factor in `[MIN_PROJECTION_SCALE, 1]`;
/// long projected lengthscales let the gradient pick up broad trends first.
const MIN_PROJECTION_SCALE: f64 = 1.0 / 16.0;

/// Initial parameters for one restart.
///
/// Restart 0 uses the scale-aware defaults: `c = var(y)`, noise `0.1 var(y)`,
/// `b_d = 1 / range_d^2`, PCA directions for the projection and `log h = -4`.
/// Later restarts shrink all lengthscales by a random factor in
/// `[1, MAX_LENGTHSCALE_SHRINK]`, stratified on a log scale so that restart
/// `r` of `restarts` covers its own slice of the range, draw the noise
/// log-uniformly in `[0.01, 0.1] var(y)`, and jitter `c`, so they explore basins other than the
/// long-lengthscale, noise-dominated one. Projected variants restart from
/// random unit directions instead of the principal ones (which need not carry
/// any signal), scaled by `1 / median distance` times a stratified factor in
/// `[MIN_PROJECTION_SCALE, 1]`.
pub fn initial_params(x: &Matrix, y: &Vector, shape: FitShape, restart: usize, restarts: usize, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let (n, d) = x.shape();
    let vy = variance(y).max(1e-12);
    let perturb = restart > 0;
    // position of this restart within [0, 1), stratified across restarts
    let pos = if perturb {
        let strata = restarts.max(2) - 1;
        ((restart - 1) % strata) as f64 / strata as f64 + rng.random_range(0.0..1.0) / strata as f64
    } else {
        0.0
    };
    let (c, noise, shrink) = if perturb {
        let c_jitter: f64 = Normal::new(0.0, 0.5).expect("valid normal").sample(rng);
        let noise_frac = 10f64.powf(rng.random_range(-2.0..=-1.0));
        (vy * c_jitter.exp(), noise_frac * vy, MAX_LENGTHSCALE_SHRINK.powf(pos))
    } else {
        (vy, 0.1 * vy, 1.0)
    };
    let dim_jitter = Normal::new(0.0, 0.25).expect("valid normal");
    let b: Vec<f64> = (0..d)
        .map(|j| {
            let col = x.column(j);
            let range = col.max() - col.min();
            let b = if range > 0.0 { 1.0 / (range * range) } else { 1.0 };
            if perturb {
                b * shrink * shrink * f64::exp(dim_jitter.sample(rng))
            } else {
                b
            }
        })
        .collect();

    let kind = shape.kind;
    let ModelKind::Spgp(variant) = kind else {
        return Ok(ModelParams::Gp(GpParams::new(ArdParams::new(c, b)?, noise)?));
    };
    let m = shape.n_pseudo;
    if m == 0 {
        return invalid("need at least one pseudo-input");
    }
    let kernel = if variant.has_dr() {
        let g = shape.proj_dim;
        if g == 0 || g > d {
            return invalid(format!("projected dimension must satisfy 1 <= G <= D, got G = {g}, D = {d}"));
        }
        let dirs = if perturb {
            let mut r = Matrix::from_fn(g, d, |_, _| StandardNormal.sample(rng));
            for mut row in r.row_iter_mut() {
                let norm = row.norm();
                row /= norm;
            }
            r
        } else {
            principal_directions(x, g)?
        };
        let projected = x * dirs.transpose();
        let med = median_pairwise_distance(&projected, 500, rng);
        let factor = if perturb { MIN_PROJECTION_SCALE.powf(1.0 - pos) } else { 1.0 };
        let p = dirs * if med > 0.0 { factor / med } else { factor };
        SpgpKernel::Proj(ProjParams::new(c, p)?)
    } else {
        SpgpKernel::Ard(ArdParams::new(c, b)?)
    };
    let feats = kernel.features(x)?.into_owned();
    let idx = if m <= n { sample(rng, n, m).into_vec() } else { (0..m).map(|_| rng.random_range(0..n)).collect() };
    let mut xbar = Matrix::from_fn(m, feats.ncols(), |i, j| feats[(idx[i], j)]);
    if m > n {
        for v in xbar.iter_mut() {
            *v += 1e-3 * rng.random_range(-1.0..1.0);
        }
    }
    let log_h = variant.has_hs().then(|| vec![-4.0; m]);
    Ok(ModelParams::Spgp(SpgpParams::new(variant, kernel, xbar, log_h, noise)?))
}

/// Fits one model from one starting point.
pub fn fit_from(start: &ModelParams, x: &Matrix, y: &Vector, cfg: &OptConfig) -> Result<(ModelParams, OptTrace)> {
    let v0 = pack(start);
    let layout = v0.layout;
    let objective = |vals: &[f64]| -> Result<(f64, Vec<f64>)> {
        let pv = ParamVector { layout, values: vals.to_vec() };
        let GradResult { value, grad } = nlml_and_grad(&pv, x, y)?;
        Ok((value, grad))
    };
    let trace = minimize(objective, &v0.values, cfg)?;
    let params = unpack(&ParamVector { layout, values: trace.best.clone() })?;
    Ok((params, trace))
}

/// Trains `cfg.restarts` independently initialised models and keeps the one
/// with the lowest final NLML (ties go to the lowest restart index).
///
/// Restart `r` draws its initialisation from a generator seeded with
/// `(cfg.seed, r)`, so results do not depend on how many restarts run or in
/// which order they finish.
pub fn multistart_fit(x: &Matrix, y: &Vector, shape: FitShape, cfg: &OptConfig) -> Result<FitResult> {
    cfg.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return invalid(format!("{} inputs and {} targets", x.nrows(), y.len()));
    }
    let runs: Vec<Result<(ModelParams, OptTrace)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = restart_rng(cfg.seed, r);
            let start = initial_params(x, y, shape, r, cfg.restarts, &mut rng)?;
            fit_from(&start, x, y, cfg)
        })
        .collect();

    let mut best: Option<(usize, ModelParams, f64)> = None;
    let mut traces = Vec::with_capacity(runs.len());
    let mut failures = Vec::new();
    for (r, run) in runs.into_iter().enumerate() {
        match run {
            Ok((params, trace)) => {
                info!(
                    "restart {r}: nlml {:.6} -> {:.6} in {} iterations ({})",
                    trace.initial_value(),
                    trace.best_value,
                    trace.iterations(),
                    trace.termination
                );
                if best.as_ref().is_none_or(|b| trace.best_value < b.2) {
                    best = Some((traces.len(), params, trace.best_value));
                }
                traces.push(trace);
            }
            Err(e) => failures.push(format!("restart {r}: {e}")),
        }
    }
    match best {
        Some((best_restart, params, final_nlml)) => Ok(FitResult { params, final_nlml, best_restart, traces }),
        None => Err(Error::Numerical(format!("all restarts failed: {}", failures.join("; ")))),
    }
}

pub(crate) fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}
