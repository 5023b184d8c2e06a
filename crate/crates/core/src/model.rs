//! Trained models: parameters, preprocessing and a ready-to-use predictor.
//! All user-facing predictions and scores are in original target units.

use crate::data::{Dataset, Preprocessing};
use crate::error::{invalid, Result};
use crate::exact_gp::GpModel;
use crate::gradients::{ModelKind, ModelParams};
use crate::optimizer::{multistart_fit, FitResult, FitShape, OptConfig};
use crate::spgp::{spgp_precompute, SpgpPrecompute};
use crate::{Matrix, Vector, LN_2PI};

/// Predictive distribution at one test point, in model space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

/// Prediction at one test point in original units.
///
/// Without a log transform this is the Gaussian mean and variance and a
/// two-standard-deviation interval. Under `log(y + a)` the point prediction is
/// the median `exp(mu) - a`, the variance is that of the implied log-normal,
/// and the interval is `mu +/- 2 sigma` mapped back through the transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub enum Predictor {
    Gp(GpModel),
    Spgp(SpgpPrecompute),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub final_nlml: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub preprocessing: Preprocessing,
    pub input_names: Vec<String>,
    pub target_name: String,
    pub predictor: Predictor,
    pub meta: TrainMeta,
}

impl TrainedModel {
    /// Trains on `ds`, whose inputs and targets are already in model space
    /// (see [`crate::data::normalize`]); its preprocessing record is kept for
    /// prediction.
    pub fn fit(ds: &Dataset, shape: FitShape, cfg: &OptConfig) -> Result<(Self, FitResult)> {
        let fit = multistart_fit(&ds.x, &ds.y, shape, cfg)?;
        let meta = TrainMeta { seed: cfg.seed, final_nlml: fit.final_nlml, iterations: fit.best_trace().iterations() };
        let model = Self::from_params(fit.params.clone(), ds, meta)?;
        Ok((model, fit))
    }

    /// Conditions fixed parameters on a (model-space) training set.
    pub fn from_params(params: ModelParams, ds: &Dataset, meta: TrainMeta) -> Result<Self> {
        let predictor = match &params {
            ModelParams::Gp(p) => Predictor::Gp(GpModel::new(p.clone(), ds.x.clone(), ds.y.clone())?),
            ModelParams::Spgp(p) => Predictor::Spgp(spgp_precompute(p, &ds.x, &ds.y)?),
        };
        Ok(Self {
            params,
            preprocessing: ds.preprocessing.clone(),
            input_names: ds.input_names.clone(),
            target_name: ds.target_name.clone(),
            predictor,
            meta,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.params.kind()
    }

    pub fn input_dim(&self) -> usize {
        self.input_names.len()
    }

    /// Model-space predictive distributions for raw inputs.
    pub fn predict_latent(&self, x_raw: &Matrix) -> Result<Vec<Gaussian>> {
        let x = self.preprocessing.transform_inputs(x_raw)?;
        let raw = match &self.predictor {
            Predictor::Gp(m) => (0..x.nrows())
                .map(|i| m.predict(x.row(i).transpose().as_slice()))
                .collect::<Result<Vec<_>>>()?,
            Predictor::Spgp(p) => p.predict_many(&x)?,
        };
        Ok(raw.into_iter().map(|(mean, var)| Gaussian { mean, var }).collect())
    }

    pub fn predict(&self, x_raw: &Matrix) -> Result<Vec<Prediction>> {
        let pre = &self.preprocessing;
        Ok(self
            .predict_latent(x_raw)?
            .into_iter()
            .map(|g| {
                let mu = pre.unscale_target(g.mean);
                let sd = g.var.sqrt() * pre.target_scale;
                match pre.log_offset {
                    None => Prediction { mean: mu, variance: sd * sd, lower: mu - 2.0 * sd, upper: mu + 2.0 * sd },
                    Some(a) => {
                        let s2 = sd * sd;
                        Prediction {
                            mean: mu.exp() - a,
                            variance: s2.exp_m1() * (2.0 * mu + s2).exp(),
                            lower: (mu - 2.0 * sd).exp() - a,
                            upper: (mu + 2.0 * sd).exp() - a,
                        }
                    }
                }
            })
            .collect())
    }

    /// Log predictive density of each raw target, including the Jacobian of
    /// the target transform so densities are over original units.
    pub fn log_density(&self, x_raw: &Matrix, y_raw: &Vector) -> Result<Vec<f64>> {
        if x_raw.nrows() != y_raw.len() {
            return invalid(format!("{} inputs and {} targets", x_raw.nrows(), y_raw.len()));
        }
        let pre = &self.preprocessing;
        let preds = self.predict_latent(x_raw)?;
        preds
            .iter()
            .zip(y_raw.iter())
            .map(|(g, &y)| {
                let t = pre.transform_target(y)?;
                let r = t - g.mean;
                let mut lp = -0.5 * (LN_2PI + g.var.ln()) - r * r / (2.0 * g.var) - pre.target_scale.ln();
                if let Some(a) = pre.log_offset {
                    lp -= (y + a).ln();
                }
                Ok(lp)
            })
            .collect()
    }

    /// Mean NLPD and MSE over a raw test set.
    pub fn score(&self, x_raw: &Matrix, y_raw: &Vector) -> Result<(f64, f64)> {
        if y_raw.is_empty() {
            return invalid("empty test set");
        }
        let lp = self.log_density(x_raw, y_raw)?;
        let nlpd = -lp.iter().sum::<f64>() / lp.len() as f64;
        let preds = self.predict(x_raw)?;
        let mse = preds.iter().zip(y_raw.iter()).map(|(p, y)| (y - p.mean).powi(2)).sum::<f64>() / y_raw.len() as f64;
        Ok((nlpd, mse))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_heteroscedastic, log_transform_targets, normalize, Scenario};
    use crate::eval::nlpd;
    use crate::spgp::SpgpVariant;
    use approx::assert_relative_eq;

    fn trained(kind: ModelKind, log: bool) -> (TrainedModel, Dataset) {
        let raw = generate_heteroscedastic(60, 1, Scenario::SmoothVarying).unwrap();
        let base = if log { log_transform_targets(&raw, 3.0).unwrap() } else { raw.clone() };
        let ds = normalize(&base).unwrap();
        let shape = FitShape { kind, n_pseudo: 6, proj_dim: 1 };
        let cfg = OptConfig { restarts: 3, max_iterations: 100, ..Default::default() };
        (TrainedModel::fit(&ds, shape, &cfg).unwrap().0, raw)
    }

    #[test]
    fn predictions_are_in_original_units() {
        let (m, raw) = trained(ModelKind::Spgp(SpgpVariant::Plain), false);
        let preds = m.predict(&raw.x).unwrap();
        let lat = m.predict_latent(&raw.x).unwrap();
        let pre = &m.preprocessing;
        for (p, g) in preds.iter().zip(&lat) {
            assert_relative_eq!(p.mean, g.mean * pre.target_scale + pre.target_shift, epsilon = 1e-12);
            assert_relative_eq!(p.variance, g.var * pre.target_scale.powi(2), epsilon = 1e-12);
            assert!(p.lower < p.mean && p.mean < p.upper);
        }
        let (_, mse) = m.score(&raw.x, &raw.y).unwrap();
        assert!(mse < 0.1, "{mse}");
    }

    #[test]
    fn nlpd_matches_gaussian_in_raw_units() {
        let (m, raw) = trained(ModelKind::Gp, false);
        let preds: Vec<Gaussian> = m.predict(&raw.x).unwrap().iter().map(|p| Gaussian { mean: p.mean, var: p.variance }).collect();
        let (score, _) = m.score(&raw.x, &raw.y).unwrap();
        assert_relative_eq!(score, nlpd(&preds, raw.y.as_slice()).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn log_transform_reports_median_and_jacobian() {
        let (m, raw) = trained(ModelKind::Spgp(SpgpVariant::Hs), true);
        let lat = m.predict_latent(&raw.x).unwrap();
        let preds = m.predict(&raw.x).unwrap();
        let pre = &m.preprocessing;
        let lp = m.log_density(&raw.x, &raw.y).unwrap();
        for i in 0..raw.len() {
            let mu = lat[i].mean * pre.target_scale + pre.target_shift;
            let sd = lat[i].var.sqrt() * pre.target_scale;
            assert_relative_eq!(preds[i].mean, mu.exp() - 3.0, epsilon = 1e-12);
            assert!(preds[i].lower < preds[i].mean && preds[i].mean < preds[i].upper);
            // density of y where log(y + a) ~ N(mu, sd^2)
            let z = (raw.y[i] + 3.0).ln();
            let want = -0.5 * (LN_2PI + (sd * sd).ln()) - (z - mu).powi(2) / (2.0 * sd * sd) - (raw.y[i] + 3.0).ln();
            assert_relative_eq!(lp[i], want, epsilon = 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (m, _) = trained(ModelKind::Spgp(SpgpVariant::Dr), false);
        assert!(m.predict(&Matrix::zeros(3, 2)).is_err());
    }
}
