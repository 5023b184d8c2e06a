//! The sparse pseudo-input GP.
//!
//! The covariance between training points is
//!
//! ```text
//! K_SPGP = K_NM Km^-1 K_MN + diag(lambda),   lambda_n = K_nn - k_n^T Km^-1 k_n
//! ```
//!
//! where `Km` is the pseudo-input covariance, augmented with `diag(h)` for the
//! heteroscedastic variants. Everything below works from the factor `L` of `Km`
//! and `V = L^-1 K_MN`. With `G = diag(lambda + noise)` and
//! `A = I + V G^-1 V^T` we have `Q = Km + K_MN G^-1 K_NM = L A L^T`, so
//!
//! ```text
//! log|K_SPGP + noise I| = log|A| + sum_n log g_n
//! y^T (K_SPGP + noise I)^-1 y = y^T G^-1 y - |La^-1 V G^-1 y|^2
//! ```
//!
//! and no `N x N` matrix is ever formed.

use std::borrow::Cow;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::kernels::{sq_exp_cross, sq_exp_gram, stabilized_cholesky, ArdParams, CholFactor, KernelMatrix, ProjParams};
use crate::{Matrix, Vector, LN_2PI};

/// Which extensions of the sparse model are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpgpVariant {
    Plain,
    /// Learned linear projection of the inputs.
    Dr,
    /// Learned per-pseudo-input uncertainties.
    Hs,
    DrHs,
}

impl SpgpVariant {
    pub const ALL: [SpgpVariant; 4] = [SpgpVariant::Plain, SpgpVariant::Dr, SpgpVariant::Hs, SpgpVariant::DrHs];

    pub fn has_dr(self) -> bool {
        matches!(self, SpgpVariant::Dr | SpgpVariant::DrHs)
    }

    pub fn has_hs(self) -> bool {
        matches!(self, SpgpVariant::Hs | SpgpVariant::DrHs)
    }

    pub fn from_flags(dr: bool, hs: bool) -> Self {
        match (dr, hs) {
            (false, false) => SpgpVariant::Plain,
            (true, false) => SpgpVariant::Dr,
            (false, true) => SpgpVariant::Hs,
            (true, true) => SpgpVariant::DrHs,
        }
    }
}

/// Covariance function of a sparse model: ARD in input space, or projected.
#[derive(Debug, Clone, PartialEq)]
pub enum SpgpKernel {
    Ard(ArdParams),
    Proj(ProjParams),
}

impl SpgpKernel {
    pub fn c(&self) -> f64 {
        match self {
            SpgpKernel::Ard(p) => p.c(),
            SpgpKernel::Proj(p) => p.c(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SpgpKernel::Ard(p) => p.dim(),
            SpgpKernel::Proj(p) => p.input_dim(),
        }
    }

    /// Dimension of the space the pseudo-inputs live in.
    pub fn pseudo_dim(&self) -> usize {
        match self {
            SpgpKernel::Ard(p) => p.dim(),
            SpgpKernel::Proj(p) => p.proj_dim(),
        }
    }

    pub(crate) fn weights(&self) -> Option<&[f64]> {
        match self {
            SpgpKernel::Ard(p) => Some(p.b()),
            SpgpKernel::Proj(_) => None,
        }
    }

    /// Points in the space where the kernel compares them with pseudo-inputs:
    /// the inputs themselves for ARD, `X P^T` for the projected kernel.
    pub fn features<'a>(&self, x: &'a Matrix) -> Result<Cow<'a, Matrix>> {
        if x.ncols() != self.input_dim() {
            return invalid(format!("inputs have dimension {}, model expects {}", x.ncols(), self.input_dim()));
        }
        Ok(match self {
            SpgpKernel::Ard(_) => Cow::Borrowed(x),
            SpgpKernel::Proj(p) => Cow::Owned(p.project(x)),
        })
    }
}

/// Parameters of a sparse model.
#[derive(Debug, Clone, PartialEq)]
pub struct SpgpParams {
    variant: SpgpVariant,
    kernel: SpgpKernel,
    xbar: Matrix,
    log_h: Vec<f64>,
    noise: f64,
}

impl SpgpParams {
    /// `log_h` holds the log pseudo-input uncertainties and must be given
    /// (length `M`) exactly when the variant is heteroscedastic.
    pub fn new(variant: SpgpVariant, kernel: SpgpKernel, xbar: Matrix, log_h: Option<Vec<f64>>, noise: f64) -> Result<Self> {
        match (&kernel, variant.has_dr()) {
            (SpgpKernel::Ard(_), true) => return invalid("projected variants need a projection kernel"),
            (SpgpKernel::Proj(_), false) => return invalid("non-projected variants need an ARD kernel"),
            _ => {}
        }
        let m = xbar.nrows();
        if m == 0 {
            return invalid("need at least one pseudo-input");
        }
        if xbar.ncols() != kernel.pseudo_dim() {
            return invalid(format!(
                "pseudo-inputs have dimension {}, kernel expects {}",
                xbar.ncols(),
                kernel.pseudo_dim()
            ));
        }
        if xbar.iter().any(|v| !v.is_finite()) {
            return invalid("pseudo-inputs must be finite");
        }
        let log_h = match (log_h, variant.has_hs()) {
            (Some(h), true) => {
                if h.len() != m {
                    return invalid(format!("{} pseudo-input uncertainties for {m} pseudo-inputs", h.len()));
                }
                if h.iter().any(|v| !v.is_finite()) {
                    return invalid("log uncertainties must be finite");
                }
                h
            }
            (None, true) => return invalid("heteroscedastic variant needs pseudo-input uncertainties"),
            (Some(_), false) => return invalid("uncertainties given for a variant without them"),
            (None, false) => Vec::new(),
        };
        if !(noise.is_finite() && noise > 0.0) {
            return invalid(format!("noise variance must be positive, got {noise}"));
        }
        Ok(Self { variant, kernel, xbar, log_h, noise })
    }

    pub fn plain(kernel: ArdParams, xbar: Matrix, noise: f64) -> Result<Self> {
        Self::new(SpgpVariant::Plain, SpgpKernel::Ard(kernel), xbar, None, noise)
    }

    pub fn variant(&self) -> SpgpVariant {
        self.variant
    }

    pub fn kernel(&self) -> &SpgpKernel {
        &self.kernel
    }

    pub fn pseudo_inputs(&self) -> &Matrix {
        &self.xbar
    }

    pub fn n_pseudo(&self) -> usize {
        self.xbar.nrows()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn c(&self) -> f64 {
        self.kernel.c()
    }

    /// Log uncertainties; empty for non-heteroscedastic variants.
    pub fn log_h(&self) -> &[f64] {
        &self.log_h
    }

    /// Pseudo-input uncertainties, zeros for non-heteroscedastic variants.
    pub fn h(&self) -> Vec<f64> {
        if self.variant.has_hs() {
            self.log_h.iter().map(|r| r.exp()).collect()
        } else {
            vec![0.0; self.n_pseudo()]
        }
    }

    /// Number of free scalars in the model.
    pub fn n_trainable(&self) -> usize {
        let m = self.n_pseudo();
        let hs = if self.variant.has_hs() { m } else { 0 };
        match &self.kernel {
            SpgpKernel::Ard(p) => m * p.dim() + p.dim() + 2 + hs,
            SpgpKernel::Proj(p) => (m + p.input_dim()) * p.proj_dim() + 2 + hs,
        }
    }

    fn pure_km(&self) -> Matrix {
        sq_exp_gram(&self.xbar, self.c(), self.kernel.weights())
    }

    fn cross(&self, feats: &Matrix) -> Matrix {
        sq_exp_cross(&self.xbar, feats, self.c(), self.kernel.weights())
    }
}

/// Pseudo-input covariance, with `diag(h)` added for heteroscedastic variants.
pub fn effective_km(params: &SpgpParams) -> KernelMatrix {
    let mut km = params.pure_km();
    if params.variant.has_hs() {
        for (i, h) in params.h().into_iter().enumerate() {
            km[(i, i)] += h;
        }
    }
    KernelMatrix::new(km)
}

fn factor_km(params: &SpgpParams) -> Result<CholFactor> {
    let f = stabilized_cholesky(&effective_km(params).entries, "K_M")?;
    if f.jitter > 0.0 {
        debug!("K_M factorized with jitter {:.3e}", f.jitter);
    }
    Ok(f)
}

fn clamp_lambda(raw: f64, c: f64, n: usize) -> Result<f64> {
    if raw >= 0.0 {
        Ok(raw)
    } else if raw >= -1e-10 * c {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!(
            "residual variance lambda[{n}] = {raw:.3e} is negative; K_M factorization is unreliable"
        )))
    }
}

/// Shared intermediate quantities for a parameter setting and data set.
struct Factors<'a> {
    feats: Cow<'a, Matrix>,
    chol_km: CholFactor,
    kmn: Matrix,
    /// `L^-1 K_MN`
    v: Matrix,
    lambda: Vector,
}

fn factors<'a>(params: &SpgpParams, x: &'a Matrix) -> Result<Factors<'a>> {
    let feats = params.kernel.features(x)?;
    let chol_km = factor_km(params)?;
    let kmn = params.cross(&feats);
    let mut v = kmn.clone();
    chol_km.solve_lower_mut(&mut v);
    let c = params.c();
    let lambda = Vector::from_iterator(
        v.ncols(),
        v.column_iter().enumerate().map(|(n, col)| clamp_lambda(c - col.norm_squared(), c, n)).collect::<Result<Vec<_>>>()?,
    );
    Ok(Factors { feats, chol_km, kmn, v, lambda })
}

fn check_targets(x: &Matrix, y: &Vector) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset("sparse GP needs at least one training point".into()));
    }
    if x.nrows() != y.len() {
        return invalid(format!("{} inputs but {} targets", x.nrows(), y.len()));
    }
    Ok(())
}

/// Per-point residual variances `lambda_n = K_nn - k_n^T Km^-1 k_n`, clamped at 0.
pub fn compute_lambda(params: &SpgpParams, x: &Matrix) -> Result<Vector> {
    Ok(factors(params, x)?.lambda)
}

/// Dense `N x N` SPGP covariance (without noise). Intended for small `N`.
pub fn spgp_cov_matrix(params: &SpgpParams, x: &Matrix) -> Result<Matrix> {
    let f = factors(params, x)?;
    let mut k = f.v.transpose() * &f.v;
    for (i, l) in f.lambda.iter().enumerate() {
        k[(i, i)] += l;
    }
    Ok(k)
}

/// Negative log marginal likelihood `-log N(y | 0, K_SPGP + noise I)`.
///
/// Streams over the data one point at a time: `O(M^2 N)` time and `O(M^2)`
/// working memory beyond the inputs.
pub fn spgp_nlml(params: &SpgpParams, x: &Matrix, y: &Vector) -> Result<f64> {
    check_targets(x, y)?;
    let feats = params.kernel.features(x)?;
    let chol_km = factor_km(params)?;
    let l = &chol_km.l;
    let m = params.n_pseudo();
    let dim = feats.ncols();
    let c = params.c();
    let w = params.kernel.weights();
    let xbar = &params.xbar;

    let mut a = Matrix::identity(m, m);
    let mut r = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut quad = 0.0;
    let mut log_g = 0.0;
    for n in 0..feats.nrows() {
        for (i, vi) in v.iter_mut().enumerate() {
            let mut sq = 0.0;
            for d in 0..dim {
                let diff = xbar[(i, d)] - feats[(n, d)];
                sq += w.map_or(1.0, |w| w[d]) * diff * diff;
            }
            *vi = c * (-0.5 * sq).exp();
        }
        // forward substitution, L v = k
        for i in 0..m {
            let mut s = v[i];
            for j in 0..i {
                s -= l[(i, j)] * v[j];
            }
            v[i] = s / l[(i, i)];
        }
        let lambda = clamp_lambda(c - v.iter().map(|t| t * t).sum::<f64>(), c, n)?;
        let g = lambda + params.noise;
        let yn = y[n];
        for j in 0..m {
            let vj = v[j] / g;
            for i in j..m {
                a[(i, j)] += v[i] * vj;
            }
            r[j] += vj * yn;
        }
        quad += yn * yn / g;
        log_g += g.ln();
    }
    a.fill_upper_triangle_with_lower_triangle();
    let chol_a = stabilized_cholesky(&a, "I + V G^-1 V^T")?;
    let mut rr = Matrix::from_column_slice(m, 1, &r);
    chol_a.solve_lower_mut(&mut rr);
    let quad = quad - rr.norm_squared();
    let n = y.len() as f64;
    Ok(0.5 * (chol_a.log_det() + log_g + quad + n * LN_2PI))
}

/// Everything needed to predict in `O(M)` (mean) and `O(M^2)` (variance) per test point.
#[derive(Debug, Clone, PartialEq)]
pub struct SpgpPrecompute {
    params: SpgpParams,
    /// Cholesky factor of `Km`.
    chol_km: Matrix,
    /// Cholesky factor of `A = L^-1 Q L^-T`.
    chol_a: Matrix,
    /// `Q^-1 K_MN G^-1 y`; the predictive mean is `k_*^T weights`.
    weights: Vector,
    lambda: Vector,
    jitter_km: f64,
    jitter_a: f64,
}

/// Factorizes everything the predictor needs. `O(M^2 N)`.
pub fn spgp_precompute(params: &SpgpParams, x: &Matrix, y: &Vector) -> Result<SpgpPrecompute> {
    check_targets(x, y)?;
    let f = factors(params, x)?;
    let m = params.n_pseudo();
    let ginv = f.lambda.map(|l| 1.0 / (l + params.noise));
    let mut vg = f.v.clone();
    for (mut col, gi) in vg.column_iter_mut().zip(ginv.iter()) {
        col *= *gi;
    }
    let mut a = &vg * f.v.transpose();
    for i in 0..m {
        a[(i, i)] += 1.0;
    }
    a.fill_upper_triangle_with_lower_triangle();
    let chol_a = stabilized_cholesky(&a, "I + V G^-1 V^T")?;
    let mut wv = Matrix::from_column_slice(m, 1, (&vg * y).as_slice());
    chol_a.solve_lower_mut(&mut wv);
    chol_a.solve_upper_mut(&mut wv);
    f.chol_km.solve_upper_mut(&mut wv);
    Ok(SpgpPrecompute {
        params: params.clone(),
        chol_km: f.chol_km.l,
        chol_a: chol_a.l,
        weights: wv.column(0).into_owned(),
        lambda: f.lambda,
        jitter_km: f.chol_km.jitter,
        jitter_a: chol_a.jitter,
    })
}

impl SpgpPrecompute {
    /// Reassembles a predictor from stored factors, e.g. when loading a model file.
    pub fn from_parts(params: SpgpParams, chol_km: Matrix, chol_a: Matrix, weights: Vector) -> Result<Self> {
        let m = params.n_pseudo();
        if chol_km.shape() != (m, m) || chol_a.shape() != (m, m) || weights.len() != m {
            return invalid(format!("stored factors do not match {m} pseudo-inputs"));
        }
        Ok(Self { params, chol_km, chol_a, weights, lambda: Vector::zeros(0), jitter_km: 0.0, jitter_a: 0.0 })
    }

    pub fn params(&self) -> &SpgpParams {
        &self.params
    }

    pub fn chol_km(&self) -> &Matrix {
        &self.chol_km
    }

    pub fn chol_a(&self) -> &Matrix {
        &self.chol_a
    }

    pub fn weights(&self) -> &Vector {
        &self.weights
    }

    /// Training-point residual variances (empty when rebuilt from stored factors).
    pub fn lambda(&self) -> &Vector {
        &self.lambda
    }

    /// Jitter added to `Km` and to `A` during factorization.
    pub fn jitter(&self) -> (f64, f64) {
        (self.jitter_km, self.jitter_a)
    }

    /// Predictive mean and variance (including noise) at a raw-space test input.
    pub fn predict(&self, xstar: &[f64]) -> Result<(f64, f64)> {
        let d = self.params.kernel.input_dim();
        if xstar.len() != d {
            return invalid(format!("test point has dimension {}, model expects {d}", xstar.len()));
        }
        let xs = Matrix::from_row_slice(1, d, xstar);
        let feats = self.params.kernel.features(&xs)?;
        Ok(self.predict_feature_row(&feats, 0))
    }

    /// Predictions for every row of `x`.
    pub fn predict_many(&self, x: &Matrix) -> Result<Vec<(f64, f64)>> {
        let feats = self.params.kernel.features(x)?;
        Ok((0..feats.nrows()).map(|n| self.predict_feature_row(&feats, n)).collect())
    }

    fn predict_feature_row(&self, feats: &Matrix, n: usize) -> (f64, f64) {
        let m = self.params.n_pseudo();
        let c = self.params.c();
        let w = self.params.kernel.weights();
        let xbar = &self.params.xbar;
        let mut k = vec![0.0; m];
        for (i, ki) in k.iter_mut().enumerate() {
            let mut sq = 0.0;
            for d in 0..feats.ncols() {
                let diff = xbar[(i, d)] - feats[(n, d)];
                sq += w.map_or(1.0, |w| w[d]) * diff * diff;
            }
            *ki = c * (-0.5 * sq).exp();
        }
        let mean: f64 = k.iter().zip(self.weights.iter()).map(|(a, b)| a * b).sum();
        // var = (c - |L^-1 k|^2) + |La^-1 L^-1 k|^2 + noise
        forward_sub(&self.chol_km, &mut k);
        let lambda = (c - k.iter().map(|t| t * t).sum::<f64>()).max(0.0);
        forward_sub(&self.chol_a, &mut k);
        let var = lambda + k.iter().map(|t| t * t).sum::<f64>() + self.params.noise;
        (mean, var)
    }
}

fn forward_sub(l: &Matrix, v: &mut [f64]) {
    for i in 0..v.len() {
        let mut s = v[i];
        for j in 0..i {
            s -= l[(i, j)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

/// Predictive distribution at `xstar` from a precompute.
pub fn spgp_predict(pre: &SpgpPrecompute, xstar: &[f64]) -> Result<(f64, f64)> {
    pre.predict(xstar)
}

/// Draws `y ~ N(0, K_SPGP + noise I)` at the inputs `x`, deterministically
/// for a given seed.
///
/// Uses the low-rank structure directly: `y = V^T z + sqrt(lambda + noise) * e`
/// with `z` and `e` independent standard normals.
pub fn sample_marginal(params: &SpgpParams, x: &Matrix, seed: u64) -> Result<Vector> {
    let f = factors(params, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(draw(&f.v, &f.lambda, params.noise, &mut rng))
}

fn draw(v: &Matrix, lambda: &Vector, noise: f64, rng: &mut ChaCha8Rng) -> Vector {
    let m = v.nrows();
    let z = Vector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(rng)));
    let mut y = v.tr_mul(&z);
    for (yn, l) in y.iter_mut().zip(lambda.iter()) {
        let e: f64 = StandardNormal.sample(rng);
        *yn += (l + noise).sqrt() * e;
    }
    y
}

/// Repeated draws sharing one factorization; row `i` of the result is draw `i`.
pub fn sample_marginal_many(params: &SpgpParams, x: &Matrix, seed: u64, draws: usize) -> Result<Matrix> {
    let f = factors(params, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(draws, x.nrows());
    for i in 0..draws {
        let y = draw(&f.v, &f.lambda, params.noise, &mut rng);
        out.row_mut(i).copy_from(&y.transpose());
    }
    Ok(out)
}

/// Gradient of the NLML in natural coordinates of each parameter block.
#[derive(Debug, Clone)]
pub(crate) struct SpgpGrad {
    pub log_c: f64,
    /// `d/d log b_d` (ARD) or `d/dP` (projected, `G x D`).
    pub kernel: Matrix,
    pub xbar: Matrix,
    /// `d/d log h_m` for heteroscedastic variants, else empty.
    pub log_h: Vec<f64>,
    pub log_noise: f64,
}

/// NLML together with its analytic gradient, in `O(M^2 N + M N D)`.
pub(crate) fn spgp_nlml_grad(params: &SpgpParams, x: &Matrix, y: &Vector) -> Result<(f64, SpgpGrad)> {
    check_targets(x, y)?;
    let f = factors(params, x)?;
    let m = params.n_pseudo();
    let n = x.nrows();
    let c = params.c();
    let noise = params.noise;
    let wts = params.kernel.weights();
    let xbar = &params.xbar;
    let feats: &Matrix = &f.feats;
    let dim = feats.ncols();

    let g = f.lambda.map(|l| l + noise);
    let ginv = g.map(|v| 1.0 / v);
    let mut vg = f.v.clone();
    for (mut col, gi) in vg.column_iter_mut().zip(ginv.iter()) {
        col *= *gi;
    }
    let mut a = &vg * f.v.transpose();
    for i in 0..m {
        a[(i, i)] += 1.0;
    }
    a.fill_upper_triangle_with_lower_triangle();
    let chol_a = stabilized_cholesky(&a, "I + V G^-1 V^T")?;

    let r = &vg * y;
    let mut rr = Matrix::from_column_slice(m, 1, r.as_slice());
    chol_a.solve_lower_mut(&mut rr);
    let quad = y.component_mul(&ginv).dot(y) - rr.norm_squared();
    let value = 0.5 * (chol_a.log_det() + g.iter().map(|v| v.ln()).sum::<f64>() + quad + n as f64 * LN_2PI);

    // t = A^-1 r, alpha = (K_SPGP + noise I)^-1 y = G^-1 (y - V^T t)
    let mut t = rr;
    chol_a.solve_upper_mut(&mut t);
    let alpha = (y - f.v.tr_mul(&t.column(0))).component_mul(&ginv);

    // S = La^-1 V, diag of the inverse covariance
    let mut s = f.v.clone();
    chol_a.solve_lower_mut(&mut s);
    let wdiag = Vector::from_iterator(
        n,
        (0..n).map(|j| ginv[j] - s.column(j).norm_squared() * ginv[j] * ginv[j] - alpha[j] * alpha[j]),
    );

    // U = Km^-1 K_MN, T = Q^-1 K_MN G^-1
    let mut u = f.v.clone();
    f.chol_km.solve_upper_mut(&mut u);
    let mut tq = s;
    for (mut col, gi) in tq.column_iter_mut().zip(ginv.iter()) {
        col *= *gi;
    }
    chol_a.solve_upper_mut(&mut tq);
    f.chol_km.solve_upper_mut(&mut tq);
    let beta = &u * &alpha;

    // dL/dK_MN
    let mut g_mn = tq - &beta * alpha.transpose();
    let mut uw = u.clone();
    for (mut col, wj) in uw.column_iter_mut().zip(wdiag.iter()) {
        col *= *wj;
    }
    g_mn -= &uw;

    // dL/dKm = -1/2 (Km^-1 - Q^-1 - beta beta^T - U diag(w) U^T)
    let kinv = f.chol_km.inverse();
    let mut li = Matrix::identity(m, m);
    f.chol_km.solve_lower_mut(&mut li);
    chol_a.solve_lower_mut(&mut li);
    let qinv = li.tr_mul(&li);
    let uwu = &uw * u.transpose();
    let mut g_km = (kinv - qinv - &beta * beta.transpose() - uwu) * -0.5;
    let gt = g_km.transpose();
    g_km = (g_km + gt) * 0.5;

    let kmm = params.pure_km();
    let e = g_mn.component_mul(&f.kmn); // M x N
    let fm = g_km.component_mul(&kmm); // M x M

    let log_c = fm.sum() + e.sum() + 0.5 * c * wdiag.sum();
    let log_noise = 0.5 * noise * wdiag.sum();
    let log_h = if params.variant.has_hs() {
        params.h().iter().enumerate().map(|(i, h)| h * g_km[(i, i)]).collect()
    } else {
        Vec::new()
    };

    let e_rows = Vector::from_iterator(m, e.row_iter().map(|r| r.sum()));
    let e_cols = Vector::from_iterator(n, e.column_iter().map(|c| c.sum()));
    let f_rows = Vector::from_iterator(m, fm.row_iter().map(|r| r.sum()));
    let ez = &e * feats; // M x dim
    let fx = &fm * xbar; // M x dim

    let mut g_xbar = Matrix::zeros(m, dim);
    for d in 0..dim {
        let wd = wts.map_or(1.0, |w| w[d]);
        for i in 0..m {
            let from_kmn = ez[(i, d)] - xbar[(i, d)] * e_rows[i];
            let from_km = -2.0 * (xbar[(i, d)] * f_rows[i] - fx[(i, d)]);
            g_xbar[(i, d)] = wd * (from_kmn + from_km);
        }
    }

    let g_kernel = match &params.kernel {
        SpgpKernel::Ard(p) => {
            let mut gb = Matrix::zeros(1, dim);
            for (d, bd) in p.b().iter().enumerate() {
                let mut km_part = 0.0;
                let mut xb_sq = 0.0;
                for i in 0..m {
                    km_part += f_rows[i] * xbar[(i, d)] * xbar[(i, d)];
                    xb_sq += e_rows[i] * xbar[(i, d)] * xbar[(i, d)] - 2.0 * xbar[(i, d)] * ez[(i, d)];
                }
                let mut xfx = 0.0;
                for i in 0..m {
                    xfx += xbar[(i, d)] * fx[(i, d)];
                }
                let km_sum = 2.0 * km_part - 2.0 * xfx;
                let mut x_sq = 0.0;
                for j in 0..n {
                    x_sq += e_cols[j] * feats[(j, d)] * feats[(j, d)];
                }
                let kmn_sum = x_sq + xb_sq;
                gb[(0, d)] = -0.5 * bd * (km_sum + kmn_sum);
            }
            gb
        }
        SpgpKernel::Proj(_) => {
            // dL/dZ (N x G), then dL/dP = dZ^T X
            let ext = e.tr_mul(xbar); // N x G
            let mut gz = ext;
            for j in 0..n {
                for d in 0..dim {
                    gz[(j, d)] -= feats[(j, d)] * e_cols[j];
                }
            }
            gz.tr_mul(x)
        }
    };

    Ok((value, SpgpGrad { log_c, kernel: g_kernel, xbar: g_xbar, log_h, log_noise }))
}
