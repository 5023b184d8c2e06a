//! Exact GP regression. Serves as the baseline model and as the reference the
//! sparse approximations are checked against.

use crate::error::{invalid, Error, Result};
use crate::kernels::{sq_exp_cross, sq_exp_gram, stabilized_cholesky, ArdParams, CholFactor};
use crate::{Matrix, Vector, LN_2PI};

/// Hyperparameters of the exact GP: ARD kernel plus noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GpParams {
    pub kernel: ArdParams,
    pub noise: f64,
}

impl GpParams {
    pub fn new(kernel: ArdParams, noise: f64) -> Result<Self> {
        if !(noise.is_finite() && noise > 0.0) {
            return invalid(format!("noise variance must be positive, got {noise}"));
        }
        Ok(Self { kernel, noise })
    }
}

/// A GP conditioned on training data. The Cholesky factor of `K_N + noise I`
/// is computed once at construction and reused for every prediction.
#[derive(Debug, Clone)]
pub struct GpModel {
    params: GpParams,
    x: Matrix,
    y: Vector,
    chol: CholFactor,
    alpha: Vector,
}

impl GpModel {
    pub fn new(params: GpParams, x: Matrix, y: Vector) -> Result<Self> {
        check_data(&params, &x, &y)?;
        let chol = factor(&params, &x)?;
        let mut a = Matrix::from_column_slice(y.len(), 1, y.as_slice());
        chol.solve_lower_mut(&mut a);
        chol.solve_upper_mut(&mut a);
        let alpha = a.column(0).into_owned();
        Ok(Self { params, x, y, chol, alpha })
    }

    pub fn params(&self) -> &GpParams {
        &self.params
    }

    pub fn inputs(&self) -> &Matrix {
        &self.x
    }

    pub fn targets(&self) -> &Vector {
        &self.y
    }

    pub fn jitter(&self) -> f64 {
        self.chol.jitter
    }

    /// Negative log marginal likelihood `-log N(y | 0, K_N + noise I)`.
    pub fn nlml(&self) -> f64 {
        let n = self.y.len() as f64;
        0.5 * self.chol.log_det() + 0.5 * self.y.dot(&self.alpha) + 0.5 * n * LN_2PI
    }

    /// Predictive mean and variance (including noise) at a test input.
    pub fn predict(&self, xstar: &[f64]) -> Result<(f64, f64)> {
        let d = self.params.kernel.dim();
        if xstar.len() != d {
            return invalid(format!("test point has dimension {}, model expects {d}", xstar.len()));
        }
        let xs = Matrix::from_row_slice(1, d, xstar);
        let c = self.params.kernel.c();
        let k = sq_exp_cross(&self.x, &xs, c, Some(self.params.kernel.b()));
        let mean = k.column(0).dot(&self.alpha);
        let mut v = k;
        self.chol.solve_lower_mut(&mut v);
        let reduction = v.column(0).norm_squared();
        let var = (c - reduction).max(0.0) + self.params.noise;
        Ok((mean, var))
    }
}

fn check_data(params: &GpParams, x: &Matrix, y: &Vector) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::EmptyDataset("GP needs at least one training point".into()));
    }
    if x.nrows() != y.len() {
        return invalid(format!("{} inputs but {} targets", x.nrows(), y.len()));
    }
    if x.ncols() != params.kernel.dim() {
        return invalid(format!("inputs have dimension {}, kernel expects {}", x.ncols(), params.kernel.dim()));
    }
    Ok(())
}

fn factor(params: &GpParams, x: &Matrix) -> Result<CholFactor> {
    let mut c = sq_exp_gram(x, params.kernel.c(), Some(params.kernel.b()));
    for i in 0..c.nrows() {
        c[(i, i)] += params.noise;
    }
    stabilized_cholesky(&c, "K_N + noise I")
}

/// Negative log marginal likelihood of the exact GP.
pub fn gp_nlml(model: &GpModel) -> f64 {
    model.nlml()
}

/// Predictive distribution of the exact GP at `xstar`.
pub fn gp_predict(model: &GpModel, xstar: &[f64]) -> Result<(f64, f64)> {
    model.predict(xstar)
}

/// NLML and its gradient with respect to `(log c, log b_1..log b_D, log noise)`.
pub fn nlml_and_grad(params: &GpParams, x: &Matrix, y: &Vector) -> Result<(f64, Vec<f64>)> {
    check_data(params, x, y)?;
    let n = x.nrows();
    let c = params.kernel.c();
    let b = params.kernel.b();
    let k = sq_exp_gram(x, c, Some(b));
    let mut cm = k.clone();
    for i in 0..n {
        cm[(i, i)] += params.noise;
    }
    let chol = stabilized_cholesky(&cm, "K_N + noise I")?;
    let mut a = Matrix::from_column_slice(n, 1, y.as_slice());
    chol.solve_lower_mut(&mut a);
    chol.solve_upper_mut(&mut a);
    let alpha = a.column(0).into_owned();
    let value = 0.5 * chol.log_det() + 0.5 * y.dot(&alpha) + 0.5 * n as f64 * LN_2PI;

    // dL/dtheta = 1/2 tr(W dC/dtheta), W = C^-1 - alpha alpha^T
    let mut w = chol.inverse();
    w -= &alpha * alpha.transpose();

    let mut grad = Vec::with_capacity(b.len() + 2);
    grad.push(0.5 * w.component_mul(&k).sum());
    for (d, bd) in b.iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..n {
            for i in 0..n {
                let diff = x[(i, d)] - x[(j, d)];
                acc += w[(i, j)] * k[(i, j)] * diff * diff;
            }
        }
        grad.push(-0.25 * bd * acc);
    }
    grad.push(0.5 * params.noise * w.trace());
    Ok((value, grad))
}
