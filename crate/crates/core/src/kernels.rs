//! Squared-exponential covariance functions and kernel-matrix construction.
//!
//! Two families are provided:
//!
//! * ARD: `c * exp(-1/2 * sum_d b_d (x_d - x'_d)^2)`, with per-dimension
//!   inverse squared lengthscales `b`.
//! * Projected: data points are mapped through a `G x D` matrix `P` and
//!   compared with `G`-dimensional pseudo-inputs under unit lengthscales,
//!   `c * exp(-1/2 * |P x - xbar|^2)`. Pseudo-inputs are compared with each
//!   other directly, `c * exp(-1/2 * |xbar - xbar'|^2)`.

use log::debug;
use nalgebra::Cholesky;

use crate::error::{invalid, Error, Result};
use crate::Matrix;

/// Amplitude and inverse squared lengthscales of the ARD kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ArdParams {
    c: f64,
    b: Vec<f64>,
}

impl ArdParams {
    pub fn new(c: f64, b: Vec<f64>) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return invalid(format!("kernel amplitude must be positive and finite, got {c}"));
        }
        if b.is_empty() {
            return invalid("ARD kernel needs at least one input dimension");
        }
        if let Some((d, v)) = b.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return invalid(format!("inverse squared lengthscale b[{d}] = {v} must be finite and >= 0"));
        }
        Ok(Self { c, b })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// Amplitude and projection matrix of the projected kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjParams {
    c: f64,
    p: Matrix,
}

impl ProjParams {
    /// `p` has `G` rows and `D` columns, `1 <= G <= D`.
    pub fn new(c: f64, p: Matrix) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return invalid(format!("kernel amplitude must be positive and finite, got {c}"));
        }
        let (g, d) = p.shape();
        if g == 0 || g > d {
            return invalid(format!("projection must have 1 <= G <= D, got {g} x {d}"));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return invalid("projection matrix has non-finite entries");
        }
        Ok(Self { c, p })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn projection(&self) -> &Matrix {
        &self.p
    }

    /// Reduced dimension `G`.
    pub fn proj_dim(&self) -> usize {
        self.p.nrows()
    }

    /// Input dimension `D`.
    pub fn input_dim(&self) -> usize {
        self.p.ncols()
    }

    /// Maps every row of `x` (`N x D`) to `P x` (`N x G`).
    pub fn project(&self, x: &Matrix) -> Matrix {
        x * self.p.transpose()
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return invalid(format!("{what}: dimension mismatch ({a} vs {b})"));
    }
    Ok(())
}

#[inline]
fn weighted_sq_dist(a: &[f64], b: &[f64], w: Option<&[f64]>) -> f64 {
    match w {
        Some(w) => a
            .iter()
            .zip(b)
            .zip(w)
            .map(|((x, y), w)| {
                let diff = x - y;
                w * diff * diff
            })
            .sum(),
        None => a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let diff = x - y;
                diff * diff
            })
            .sum(),
    }
}

/// ARD squared-exponential covariance between two `D`-vectors.
pub fn ard_kernel(x: &[f64], x2: &[f64], p: &ArdParams) -> Result<f64> {
    check_len(x.len(), p.dim(), "ard_kernel")?;
    check_len(x2.len(), p.dim(), "ard_kernel")?;
    Ok(p.c * (-0.5 * weighted_sq_dist(x, x2, Some(&p.b))).exp())
}

/// Covariance between a raw data point (`D`) and a projected-space pseudo-input (`G`).
pub fn proj_kernel_data_pseudo(x: &[f64], xbar: &[f64], p: &ProjParams) -> Result<f64> {
    check_len(x.len(), p.input_dim(), "proj_kernel_data_pseudo (data point)")?;
    check_len(xbar.len(), p.proj_dim(), "proj_kernel_data_pseudo (pseudo-input)")?;
    let mut sq = 0.0;
    for g in 0..p.proj_dim() {
        let mut z = 0.0;
        for (d, xd) in x.iter().enumerate() {
            z += p.p[(g, d)] * xd;
        }
        let diff = z - xbar[g];
        sq += diff * diff;
    }
    Ok(p.c * (-0.5 * sq).exp())
}

/// Covariance between two projected-space pseudo-inputs.
pub fn proj_kernel_pseudo_pseudo(xbar: &[f64], xbar2: &[f64], c: f64) -> Result<f64> {
    check_len(xbar.len(), xbar2.len(), "proj_kernel_pseudo_pseudo")?;
    Ok(c * (-0.5 * weighted_sq_dist(xbar, xbar2, None)).exp())
}

/// Selects which covariance function a matrix is built from.
#[derive(Debug, Clone, Copy)]
pub enum CovKind<'a> {
    Ard(&'a ArdParams),
    /// Rows are raw `D`-dimensional data points, columns are `G`-dimensional pseudo-inputs.
    ProjDataPseudo(&'a ProjParams),
    /// Both sides are `G`-dimensional pseudo-inputs.
    ProjPseudoPseudo { c: f64 },
}

/// A covariance matrix together with any diagonal stabilisation added to it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub entries: Matrix,
    pub jitter_applied: f64,
}

impl KernelMatrix {
    pub fn new(entries: Matrix) -> Self {
        Self { entries, jitter_applied: 0.0 }
    }
}

/// Fast path shared with the sparse model: `c * exp(-1/2 * weighted |a_i - b_j|^2)`
/// for every row `i` of `a` and row `j` of `b`. Result is `a.nrows() x b.nrows()`.
pub(crate) fn sq_exp_cross(a: &Matrix, b: &Matrix, c: f64, w: Option<&[f64]>) -> Matrix {
    debug_assert_eq!(a.ncols(), b.ncols());
    let (na, nb, dim) = (a.nrows(), b.nrows(), a.ncols());
    let mut out = Matrix::zeros(na, nb);
    for j in 0..nb {
        for i in 0..na {
            let mut sq = 0.0;
            for d in 0..dim {
                let diff = a[(i, d)] - b[(j, d)];
                let wd = w.map_or(1.0, |w| w[d]);
                sq += wd * diff * diff;
            }
            out[(i, j)] = c * (-0.5 * sq).exp();
        }
    }
    out
}

/// Symmetric variant of [`sq_exp_cross`]: computes the upper triangle and mirrors
/// it, so the result is exactly symmetric with `c` on the diagonal.
pub(crate) fn sq_exp_gram(a: &Matrix, c: f64, w: Option<&[f64]>) -> Matrix {
    let (n, dim) = a.shape();
    let mut out = Matrix::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = c;
        for i in 0..j {
            let mut sq = 0.0;
            for d in 0..dim {
                let diff = a[(i, d)] - a[(j, d)];
                let wd = w.map_or(1.0, |w| w[d]);
                sq += wd * diff * diff;
            }
            let v = c * (-0.5 * sq).exp();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Builds the matrix whose `(i, j)` entry is the kernel between row `i` of
/// `rows` and row `j` of `cols`. No jitter is applied.
pub fn build_cross_matrix(rows: &Matrix, cols: &Matrix, kind: CovKind<'_>) -> Result<KernelMatrix> {
    let entries = match kind {
        CovKind::Ard(p) => {
            check_len(rows.ncols(), p.dim(), "build_cross_matrix rows")?;
            check_len(cols.ncols(), p.dim(), "build_cross_matrix cols")?;
            sq_exp_cross(rows, cols, p.c, Some(&p.b))
        }
        CovKind::ProjDataPseudo(p) => {
            check_len(rows.ncols(), p.input_dim(), "build_cross_matrix rows")?;
            check_len(cols.ncols(), p.proj_dim(), "build_cross_matrix cols")?;
            sq_exp_cross(&p.project(rows), cols, p.c, None)
        }
        CovKind::ProjPseudoPseudo { c } => {
            check_len(rows.ncols(), cols.ncols(), "build_cross_matrix")?;
            sq_exp_cross(rows, cols, c, None)
        }
    };
    Ok(KernelMatrix::new(entries))
}

/// Self-covariance of a point set; exactly symmetric as stored.
pub fn build_gram_matrix(points: &Matrix, kind: CovKind<'_>) -> Result<KernelMatrix> {
    let entries = match kind {
        CovKind::Ard(p) => {
            check_len(points.ncols(), p.dim(), "build_gram_matrix")?;
            sq_exp_gram(points, p.c, Some(&p.b))
        }
        CovKind::ProjDataPseudo(_) => {
            return invalid("data-to-pseudo covariance is rectangular; use build_cross_matrix");
        }
        CovKind::ProjPseudoPseudo { c } => sq_exp_gram(points, c, None),
    };
    Ok(KernelMatrix::new(entries))
}

/// Evaluates the scalar kernel for one pair of points; used by tests and diagnostics.
pub fn kernel_value(a: &[f64], b: &[f64], kind: CovKind<'_>) -> Result<f64> {
    match kind {
        CovKind::Ard(p) => ard_kernel(a, b, p),
        CovKind::ProjDataPseudo(p) => proj_kernel_data_pseudo(a, b, p),
        CovKind::ProjPseudoPseudo { c } => proj_kernel_pseudo_pseudo(a, b, c),
    }
}

/// Lower-triangular Cholesky factor with the diagonal jitter it needed.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    pub l: Matrix,
    pub jitter: f64,
}

impl CholFactor {
    /// `2 * sum(log(diag(L)))`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower_mut(&self, b: &mut Matrix) {
        let ok = self.l.solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_upper_mut(&self, b: &mut Matrix) {
        let ok = self.l.tr_solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }

    /// Dense inverse of `L L^T`.
    pub fn inverse(&self) -> Matrix {
        let n = self.l.nrows();
        let mut m = Matrix::identity(n, n);
        self.solve_lower_mut(&mut m);
        self.solve_upper_mut(&mut m);
        // symmetrise away round-off
        let t = m.transpose();
        (m + t) * 0.5
    }
}

/// Relative jitter levels tried after a plain factorization fails, as
/// multiples of the mean diagonal entry.
pub const JITTER_LADDER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky factorization that adds escalating diagonal jitter until the
/// matrix factorizes. `name` identifies the matrix in errors and logs.
pub fn stabilized_cholesky(m: &Matrix, name: &str) -> Result<CholFactor> {
    let n = m.nrows();
    if n != m.ncols() {
        return invalid(format!("{name}: Cholesky needs a square matrix, got {:?}", m.shape()));
    }
    if n == 0 {
        return invalid(format!("{name}: empty matrix"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{name}: matrix has non-finite entries")));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(CholFactor { l: c.unpack(), jitter: 0.0 });
    }
    let mean_diag = m.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    for rel in JITTER_LADDER {
        let jitter = rel * mean_diag;
        let mut jittered = m.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(jittered) {
            debug!("{name}: Cholesky needed jitter {jitter:.3e}");
            return Ok(CholFactor { l: c.unpack(), jitter });
        }
    }
    Err(Error::Numerical(format!(
        "{name}: not positive definite even with jitter {:.3e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1] * mean_diag
    )))
}

/// [`stabilized_cholesky`] for a [`KernelMatrix`], recording the jitter on a copy.
pub fn factor_kernel_matrix(km: &KernelMatrix, name: &str) -> Result<(CholFactor, KernelMatrix)> {
    let f = stabilized_cholesky(&km.entries, name)?;
    let mut out = km.clone();
    if f.jitter > 0.0 {
        for i in 0..out.entries.nrows() {
            out.entries[(i, i)] += f.jitter;
        }
        out.jitter_applied += f.jitter;
    }
    Ok((f, out))
}
