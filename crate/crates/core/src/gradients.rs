//! Flat unconstrained parameter vectors, analytic NLML gradients, and a
//! central-difference gradient checker.
//!
//! Positive quantities (`c`, `b`, `h`, noise) are stored as logs. Projection
//! entries and pseudo-inputs are stored as-is. The layout is, in order:
//! `log c`, then `log b` (ARD) or `P` row-major (projected), then the
//! pseudo-inputs row-major, then `log h` (heteroscedastic only), then
//! `log noise`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::exact_gp::{self, GpModel, GpParams};
use crate::kernels::{ArdParams, ProjParams};
use crate::spgp::{spgp_nlml, spgp_nlml_grad, SpgpKernel, SpgpParams, SpgpVariant};
use crate::{Matrix, Vector};

/// Model family: exact GP or one of the sparse variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Gp,
    Spgp(SpgpVariant),
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Gp,
        ModelKind::Spgp(SpgpVariant::Plain),
        ModelKind::Spgp(SpgpVariant::Dr),
        ModelKind::Spgp(SpgpVariant::Hs),
        ModelKind::Spgp(SpgpVariant::DrHs),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gp => "gp",
            ModelKind::Spgp(SpgpVariant::Plain) => "spgp",
            ModelKind::Spgp(SpgpVariant::Dr) => "spgp-dr",
            ModelKind::Spgp(SpgpVariant::Hs) => "spgp-hs",
            ModelKind::Spgp(SpgpVariant::DrHs) => "spgp-dr-hs",
        }
    }

    pub fn has_dr(self) -> bool {
        matches!(self, ModelKind::Spgp(v) if v.has_dr())
    }

    pub fn has_hs(self) -> bool {
        matches!(self, ModelKind::Spgp(v) if v.has_hs())
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model variant '{s}'")))
    }
}

/// Parameters of either model family.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Gp(GpParams),
    Spgp(SpgpParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Gp(_) => ModelKind::Gp,
            ModelParams::Spgp(p) => ModelKind::Spgp(p.variant()),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        match self {
            ModelParams::Gp(p) => ParamLayout { kind: ModelKind::Gp, input_dim: p.kernel.dim(), n_pseudo: 0, proj_dim: 0 },
            ModelParams::Spgp(p) => ParamLayout {
                kind: ModelKind::Spgp(p.variant()),
                input_dim: p.kernel().input_dim(),
                n_pseudo: p.n_pseudo(),
                proj_dim: if p.variant().has_dr() { p.kernel().pseudo_dim() } else { 0 },
            },
        }
    }

    pub fn c(&self) -> f64 {
        match self {
            ModelParams::Gp(p) => p.kernel.c(),
            ModelParams::Spgp(p) => p.c(),
        }
    }

    pub fn noise(&self) -> f64 {
        match self {
            ModelParams::Gp(p) => p.noise,
            ModelParams::Spgp(p) => p.noise(),
        }
    }
}

/// One block of a [`ParamLayout`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    LogC,
    LogB,
    Projection,
    PseudoInputs,
    LogH,
    LogNoise,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::LogC => "c",
            Segment::LogB => "b",
            Segment::Projection => "P",
            Segment::PseudoInputs => "xbar",
            Segment::LogH => "h",
            Segment::LogNoise => "noise",
        }
    }
}

/// Shape information that maps a flat vector onto model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub kind: ModelKind,
    /// Input dimension `D`.
    pub input_dim: usize,
    /// Number of pseudo-inputs `M` (0 for the exact GP).
    pub n_pseudo: usize,
    /// Projected dimension `G` (0 unless projected).
    pub proj_dim: usize,
}

impl ParamLayout {
    pub fn new(kind: ModelKind, input_dim: usize, n_pseudo: usize, proj_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return invalid("input dimension must be at least 1");
        }
        match kind {
            ModelKind::Gp => Ok(Self { kind, input_dim, n_pseudo: 0, proj_dim: 0 }),
            ModelKind::Spgp(v) => {
                if n_pseudo == 0 {
                    return invalid("need at least one pseudo-input");
                }
                if v.has_dr() && (proj_dim == 0 || proj_dim > input_dim) {
                    return invalid(format!("projected dimension must satisfy 1 <= G <= D, got G = {proj_dim}, D = {input_dim}"));
                }
                let proj_dim = if v.has_dr() { proj_dim } else { 0 };
                Ok(Self { kind, input_dim, n_pseudo, proj_dim })
            }
        }
    }

    /// Dimension the pseudo-inputs live in.
    pub fn pseudo_dim(&self) -> usize {
        if self.kind.has_dr() {
            self.proj_dim
        } else {
            self.input_dim
        }
    }

    pub fn segments(&self) -> Vec<(Segment, Range<usize>)> {
        let mut out = Vec::with_capacity(5);
        let mut at = 0;
        let mut push = |s: Segment, len: usize| {
            if len > 0 {
                out.push((s, at..at + len));
            }
            at += len;
        };
        push(Segment::LogC, 1);
        match self.kind {
            ModelKind::Gp => push(Segment::LogB, self.input_dim),
            ModelKind::Spgp(v) => {
                if v.has_dr() {
                    push(Segment::Projection, self.proj_dim * self.input_dim);
                } else {
                    push(Segment::LogB, self.input_dim);
                }
                push(Segment::PseudoInputs, self.n_pseudo * self.pseudo_dim());
                if v.has_hs() {
                    push(Segment::LogH, self.n_pseudo);
                }
            }
        }
        push(Segment::LogNoise, 1);
        out
    }

    pub fn len(&self) -> usize {
        self.segments().last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment_of(&self, coord: usize) -> Option<Segment> {
        self.segments().into_iter().find(|(_, r)| r.contains(&coord)).map(|(s, _)| s)
    }
}

/// Unconstrained parameter vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return invalid(format!("parameter vector has {} entries, layout needs {}", values.len(), layout.len()));
        }
        Ok(Self { layout, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout, values)
    }
}

/// Flattens parameters into unconstrained coordinates.
pub fn pack(params: &ModelParams) -> ParamVector {
    let layout = params.layout();
    let mut values = Vec::with_capacity(layout.len());
    values.push(params.c().ln());
    match params {
        ModelParams::Gp(p) => values.extend(p.kernel.b().iter().map(|b| b.ln())),
        ModelParams::Spgp(p) => {
            match p.kernel() {
                SpgpKernel::Ard(k) => values.extend(k.b().iter().map(|b| b.ln())),
                SpgpKernel::Proj(k) => {
                    let pm = k.projection();
                    for g in 0..pm.nrows() {
                        values.extend(pm.row(g).iter());
                    }
                }
            }
            let xb = p.pseudo_inputs();
            for m in 0..xb.nrows() {
                values.extend(xb.row(m).iter());
            }
            values.extend_from_slice(p.log_h());
        }
    }
    values.push(params.noise().ln());
    ParamVector { layout, values }
}

/// Inverse of [`pack`].
pub fn unpack(v: &ParamVector) -> Result<ModelParams> {
    let layout = &v.layout;
    if v.values.len() != layout.len() {
        return invalid(format!("parameter vector has {} entries, layout needs {}", v.values.len(), layout.len()));
    }
    if let Some(i) = v.values.iter().position(|x| !x.is_finite()) {
        return invalid(format!("parameter {i} is not finite"));
    }
    let mut c = 0.0;
    let mut b = Vec::new();
    let mut proj = None;
    let mut xbar = None;
    let mut log_h = None;
    let mut noise = 0.0;
    for (seg, r) in layout.segments() {
        let s = &v.values[r];
        match seg {
            Segment::LogC => c = s[0].exp(),
            Segment::LogB => b = s.iter().map(|x| x.exp()).collect(),
            Segment::Projection => proj = Some(Matrix::from_row_slice(layout.proj_dim, layout.input_dim, s)),
            Segment::PseudoInputs => xbar = Some(Matrix::from_row_slice(layout.n_pseudo, layout.pseudo_dim(), s)),
            Segment::LogH => log_h = Some(s.to_vec()),
            Segment::LogNoise => noise = s[0].exp(),
        }
    }
    match layout.kind {
        ModelKind::Gp => Ok(ModelParams::Gp(GpParams::new(ArdParams::new(c, b)?, noise)?)),
        ModelKind::Spgp(variant) => {
            let kernel = match proj {
                Some(p) => SpgpKernel::Proj(ProjParams::new(c, p)?),
                None => SpgpKernel::Ard(ArdParams::new(c, b)?),
            };
            let xbar = xbar.ok_or_else(|| Error::InvalidArgument("layout has no pseudo-inputs".into()))?;
            Ok(ModelParams::Spgp(SpgpParams::new(variant, kernel, xbar, log_h, noise)?))
        }
    }
}

/// Objective value and gradient in the coordinates of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Negative log marginal likelihood at `v`.
pub fn nlml(v: &ParamVector, x: &Matrix, y: &Vector) -> Result<f64> {
    match unpack(v)? {
        ModelParams::Gp(p) => Ok(GpModel::new(p, x.clone(), y.clone())?.nlml()),
        ModelParams::Spgp(p) => spgp_nlml(&p, x, y),
    }
}

/// Negative log marginal likelihood and its exact gradient at `v`.
pub fn nlml_and_grad(v: &ParamVector, x: &Matrix, y: &Vector) -> Result<GradResult> {
    let params = unpack(v)?;
    let (value, grad) = match &params {
        ModelParams::Gp(p) => exact_gp::nlml_and_grad(p, x, y)?,
        ModelParams::Spgp(p) => {
            let (value, g) = spgp_nlml_grad(p, x, y)?;
            let mut grad = Vec::with_capacity(v.len());
            grad.push(g.log_c);
            for r in 0..g.kernel.nrows() {
                grad.extend(g.kernel.row(r).iter());
            }
            for r in 0..g.xbar.nrows() {
                grad.extend(g.xbar.row(r).iter());
            }
            grad.extend_from_slice(&g.log_h);
            grad.push(g.log_noise);
            (value, grad)
        }
    };
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("gradient coordinate {i} is not finite")));
    }
    debug_assert_eq!(grad.len(), v.len());
    Ok(GradResult { value, grad })
}

/// One coordinate of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordCheck {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub fn discrepancy(&self) -> f64 {
        self.abs_error() / self.analytic.abs().max(self.numeric.abs()).max(1e-8)
    }

    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.discrepancy() <= rel_tol || self.abs_error() <= abs_tol
    }
}

/// Result of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub layout: ParamLayout,
    pub coords: Vec<CoordCheck>,
    pub max_discrepancy: f64,
    pub worst_coord: usize,
}

impl FdReport {
    /// True when every coordinate is within `rel_tol` relative or `abs_tol` absolute error.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.coords.iter().all(|c| c.passes(rel_tol, abs_tol))
    }

    /// Coordinates that fail both tolerances.
    pub fn failures(&self, rel_tol: f64, abs_tol: f64) -> Vec<usize> {
        self.coords.iter().enumerate().filter(|(_, c)| !c.passes(rel_tol, abs_tol)).map(|(i, _)| i).collect()
    }

    /// Worst discrepancy and its coordinate within each parameter block.
    pub fn per_segment(&self) -> Vec<(Segment, f64, usize)> {
        self.layout
            .segments()
            .into_iter()
            .map(|(seg, r)| {
                let (i, d) = r
                    .map(|i| (i, self.coords[i].discrepancy()))
                    .fold((usize::MAX, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
                (seg, d, i)
            })
            .collect()
    }
}

/// Compares `analytic` with central differences of `objective` around `v`.
pub fn check_gradient<F>(analytic: &[f64], v: &ParamVector, step: f64, mut objective: F) -> Result<FdReport>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if !(step > 0.0) {
        return invalid(format!("finite-difference step must be positive, got {step}"));
    }
    if analytic.len() != v.len() {
        return invalid("analytic gradient length does not match the parameter vector");
    }
    let mut coords = Vec::with_capacity(v.len());
    let mut probe = v.clone();
    for i in 0..v.len() {
        let orig = v.values[i];
        probe.values[i] = orig + step;
        let up = objective(&probe)?;
        probe.values[i] = orig - step;
        let down = objective(&probe)?;
        probe.values[i] = orig;
        coords.push(CoordCheck { analytic: analytic[i], numeric: (up - down) / (2.0 * step) });
    }
    let (worst_coord, max_discrepancy) = coords
        .iter()
        .map(CoordCheck::discrepancy)
        .enumerate()
        .fold((0, 0.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    Ok(FdReport { layout: v.layout, coords, max_discrepancy, worst_coord })
}

/// Checks [`nlml_and_grad`] against central differences of [`nlml`].
pub fn finite_diff_check(v: &ParamVector, x: &Matrix, y: &Vector, step: f64) -> Result<FdReport> {
    let analytic = nlml_and_grad(v, x, y)?.grad;
    check_gradient(&analytic, v, step, |p| nlml(p, x, y))
}

/// Sizes of a random gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemSize {
    pub n: usize,
    pub n_pseudo: usize,
    pub input_dim: usize,
    pub proj_dim: usize,
}

impl Default for ProblemSize {
    fn default() -> Self {
        Self { n: 25, n_pseudo: 4, input_dim: 3, proj_dim: 2 }
    }
}

/// Random parameters, inputs and targets for gradient checking.
pub fn random_problem(kind: ModelKind, size: ProblemSize, seed: u64) -> Result<(ParamVector, Matrix, Vector)> {
    let ProblemSize { n, n_pseudo: m, input_dim: d, proj_dim: g } = size;
    if n == 0 || d == 0 || (kind != ModelKind::Gp && m == 0) {
        return invalid("random problem needs n, m and d of at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |r: usize, cols: usize, s: f64| Matrix::from_fn(r, cols, |_, _| rng.random_range(-s..s));
    let x = uniform(n, d, 2.0);
    let y: Vector = uniform(n, 1, 1.5).column(0).into_owned();
    let c = uniform(1, 1, 1.0)[0].exp();
    let noise = 0.05 + 0.25 * (uniform(1, 1, 1.0)[0] + 1.0) / 2.0;
    let b: Vec<f64> = uniform(d, 1, 1.0).iter().map(|v| 1.15 + 0.85 * v).collect();
    let params = match kind {
        ModelKind::Gp => ModelParams::Gp(GpParams::new(ArdParams::new(c, b)?, noise)?),
        ModelKind::Spgp(variant) => {
            let (kernel, pd) = if variant.has_dr() {
                if g == 0 || g > d {
                    return invalid(format!("projected dimension must be in 1..={d}, got {g}"));
                }
                (SpgpKernel::Proj(ProjParams::new(c, uniform(g, d, 1.0))?), g)
            } else {
                (SpgpKernel::Ard(ArdParams::new(c, b)?), d)
            };
            let xbar = uniform(m, pd, 1.5);
            let log_h = variant.has_hs().then(|| uniform(m, 1, 1.75).iter().map(|v| v - 1.25).collect());
            ModelParams::Spgp(SpgpParams::new(variant, kernel, xbar, log_h, noise)?)
        }
    };
    Ok((pack(&params), x, y))
}
