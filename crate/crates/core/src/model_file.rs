//! Text serialization of trained models.
//!
//! A model file is a list of `key value...` lines after a version line.
//! Floats are written in shortest round-trip form, so every parameter is
//! restored to the exact double and reloaded models predict bit-for-bit like
//! the original. Arrays are written as `key rows cols v...` in row-major order.
//!
//! Sparse models store the factorized predictor directly. Exact GP models
//! store their (model-space) training set and refactorize on load, which is
//! deterministic.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::data::{format_float, Preprocessing};
use crate::error::{Error, Result};
use crate::exact_gp::{GpModel, GpParams};
use crate::gradients::{ModelKind, ModelParams};
use crate::kernels::{ArdParams, ProjParams};
use crate::model::{Predictor, TrainMeta, TrainedModel};
use crate::spgp::{SpgpKernel, SpgpParams, SpgpPrecompute};
use crate::{Matrix, Vector};

pub const FORMAT_NAME: &str = "spgp-model";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::ModelFile(msg.into())
}

struct Writer(String);

impl Writer {
    fn line(&mut self, key: &str, value: impl std::fmt::Display) {
        self.0.push_str(&format!("{key} {value}\n"));
    }

    fn floats(&mut self, key: &str, values: &[f64]) {
        let parts: Vec<String> = values.iter().map(|v| format_float(*v)).collect();
        self.0.push_str(&format!("{key} {} {}\n", values.len(), parts.join(" ")));
    }

    fn matrix(&mut self, key: &str, m: &Matrix) {
        let mut parts = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                parts.push(format_float(m[(i, j)]));
            }
        }
        self.0.push_str(&format!("{key} {} {} {}\n", m.nrows(), m.ncols(), parts.join(" ")));
    }
}

pub fn to_string(model: &TrainedModel) -> String {
    let mut w = Writer(format!("{FORMAT_NAME} {FORMAT_VERSION}\n"));
    let layout = model.params.layout();
    w.line("kind", model.kind());
    w.line("input_dim", layout.input_dim);
    w.line("n_pseudo", layout.n_pseudo);
    w.line("proj_dim", layout.proj_dim);
    w.line("input_names", model.input_names.join(","));
    w.line("target_name", &model.target_name);
    w.line("seed", model.meta.seed);
    w.line("final_nlml", format_float(model.meta.final_nlml));
    w.line("iterations", model.meta.iterations);
    let pre = &model.preprocessing;
    w.floats("input_shift", &pre.input_shift);
    w.floats("input_scale", &pre.input_scale);
    w.line("target_shift", format_float(pre.target_shift));
    w.line("target_scale", format_float(pre.target_scale));
    match pre.log_offset {
        Some(a) => w.line("log_offset", format_float(a)),
        None => w.line("log_offset", "none"),
    }
    match (&model.params, &model.predictor) {
        (ModelParams::Gp(p), Predictor::Gp(gp)) => {
            w.line("c", format_float(p.kernel.c()));
            w.floats("b", p.kernel.b());
            w.line("noise", format_float(p.noise));
            w.matrix("train_x", gp.inputs());
            w.floats("train_y", gp.targets().as_slice());
        }
        (ModelParams::Spgp(_), Predictor::Spgp(pre)) => {
            let p = pre.params();
            w.line("c", format_float(p.c()));
            match p.kernel() {
                SpgpKernel::Ard(k) => w.floats("b", k.b()),
                SpgpKernel::Proj(k) => w.matrix("projection", k.projection()),
            }
            w.matrix("pseudo_inputs", p.pseudo_inputs());
            if p.variant().has_hs() {
                w.floats("log_h", p.log_h());
            }
            w.line("noise", format_float(p.noise()));
            w.matrix("chol_km", pre.chol_km());
            w.matrix("chol_a", pre.chol_a());
            w.floats("weights", pre.weights().as_slice());
        }
        _ => unreachable!("predictor always matches the parameters"),
    }
    w.0
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    write_atomic(path, &to_string(model))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    from_str(&std::fs::read_to_string(path)?)
}

struct Fields<'a>(HashMap<&'a str, Vec<&'a str>>);

impl<'a> Fields<'a> {
    fn raw(&self, key: &str) -> Result<&[&'a str]> {
        self.0.get(key).map(|v| v.as_slice()).ok_or_else(|| bad(format!("missing field '{key}'")))
    }

    fn text(&self, key: &str) -> Result<String> {
        Ok(self.raw(key)?.join(" "))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        if v.len() != 1 {
            return Err(bad(format!("field '{key}' should hold one value")));
        }
        v[0].parse().map_err(|_| bad(format!("field '{key}' has invalid value '{}'", v[0])))
    }

    fn nums(&self, key: &str, vals: &[&str]) -> Result<Vec<f64>> {
        vals.iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("field '{key}' has invalid number '{s}'"))))
            .collect()
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.raw(key)?;
        let n: usize = v.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad(format!("field '{key}' lacks a length")))?;
        if v.len() != n + 1 {
            return Err(bad(format!("field '{key}' declares {n} values but has {}", v.len() - 1)));
        }
        self.nums(key, &v[1..])
    }

    fn matrix(&self, key: &str) -> Result<Matrix> {
        let v = self.raw(key)?;
        let dims: Option<(usize, usize)> = match v {
            [r, c, ..] => r.parse().ok().zip(c.parse().ok()),
            _ => None,
        };
        let (r, c) = dims.ok_or_else(|| bad(format!("field '{key}' lacks dimensions")))?;
        if v.len() != r * c + 2 {
            return Err(bad(format!("field '{key}' declares {r}x{c} values but has {}", v.len() - 2)));
        }
        Ok(Matrix::from_row_slice(r, c, &self.nums(key, &v[2..])?))
    }
}

pub fn from_str(text: &str) -> Result<TrainedModel> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    match head.as_slice() {
        [name, ver] if *name == FORMAT_NAME => {
            let v: u32 = ver.parse().map_err(|_| bad(format!("invalid format version '{ver}'")))?;
            if v != FORMAT_VERSION {
                return Err(bad(format!("unsupported model file version {v} (this build reads version {FORMAT_VERSION})")));
            }
        }
        _ => return Err(bad("not a model file (missing version line)")),
    }
    let mut map = HashMap::new();
    for line in lines {
        let mut it = line.split_whitespace();
        if let Some(key) = it.next() {
            if map.insert(key, it.collect::<Vec<_>>()).is_some() {
                return Err(bad(format!("duplicate field '{key}'")));
            }
        }
    }
    let f = Fields(map);
    let wrap = |e: Error| match e {
        Error::ModelFile(_) => e,
        other => bad(format!("inconsistent model: {other}")),
    };

    let kind: ModelKind = f.text("kind")?.parse().map_err(wrap)?;
    let input_dim: usize = f.parse("input_dim")?;
    let n_pseudo: usize = f.parse("n_pseudo")?;
    let proj_dim: usize = f.parse("proj_dim")?;
    let input_names: Vec<String> = f.text("input_names")?.split(',').map(str::to_string).collect();
    if input_names.len() != input_dim {
        return Err(bad(format!("{} input names for dimension {input_dim}", input_names.len())));
    }
    let meta = TrainMeta { seed: f.parse("seed")?, final_nlml: f.parse("final_nlml")?, iterations: f.parse("iterations")? };
    let log_offset = match f.text("log_offset")?.as_str() {
        "none" => None,
        _ => Some(f.parse("log_offset")?),
    };
    let preprocessing = Preprocessing {
        input_shift: f.floats("input_shift")?,
        input_scale: f.floats("input_scale")?,
        target_shift: f.parse("target_shift")?,
        target_scale: f.parse("target_scale")?,
        log_offset,
    };
    if preprocessing.input_shift.len() != input_dim || preprocessing.input_scale.len() != input_dim {
        return Err(bad("preprocessing record does not match the input dimension"));
    }
    let c: f64 = f.parse("c")?;
    let noise: f64 = f.parse("noise")?;

    let (params, predictor) = match kind {
        ModelKind::Gp => {
            let p = GpParams::new(ArdParams::new(c, f.floats("b")?).map_err(wrap)?, noise).map_err(wrap)?;
            let x = f.matrix("train_x")?;
            let y = Vector::from_vec(f.floats("train_y")?);
            let gp = GpModel::new(p.clone(), x, y).map_err(wrap)?;
            (ModelParams::Gp(p), Predictor::Gp(gp))
        }
        ModelKind::Spgp(variant) => {
            let kernel = if variant.has_dr() {
                SpgpKernel::Proj(ProjParams::new(c, f.matrix("projection")?).map_err(wrap)?)
            } else {
                SpgpKernel::Ard(ArdParams::new(c, f.floats("b")?).map_err(wrap)?)
            };
            let log_h = if variant.has_hs() { Some(f.floats("log_h")?) } else { None };
            let p = SpgpParams::new(variant, kernel, f.matrix("pseudo_inputs")?, log_h, noise).map_err(wrap)?;
            let pre = SpgpPrecompute::from_parts(p.clone(), f.matrix("chol_km")?, f.matrix("chol_a")?, Vector::from_vec(f.floats("weights")?))
                .map_err(wrap)?;
            (ModelParams::Spgp(p), Predictor::Spgp(pre))
        }
    };
    let layout = params.layout();
    if (layout.input_dim, layout.n_pseudo, layout.proj_dim) != (input_dim, n_pseudo, proj_dim) {
        return Err(bad("declared sizes do not match the stored parameters"));
    }
    Ok(TrainedModel { params, preprocessing, input_names, target_name: f.text("target_name")?, predictor, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, generate_heteroscedastic, log_transform_targets, normalize, GeneratorConfig, Scenario};
    use crate::optimizer::{FitShape, OptConfig};
    use crate::spgp::SpgpVariant;

    fn model(kind: ModelKind) -> (TrainedModel, Matrix) {
        let raw = generate(40, 2, Scenario::Wide, &GeneratorConfig { dim: 3, ..Default::default() }).unwrap();
        let ds = normalize(&log_transform_targets(&raw, 10.0).unwrap()).unwrap();
        let shape = FitShape { kind, n_pseudo: 5, proj_dim: 2 };
        let cfg = OptConfig { restarts: 1, max_iterations: 15, seed: 4, ..Default::default() };
        (TrainedModel::fit(&ds, shape, &cfg).unwrap().0, raw.x)
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_kind() {
        let kinds = [ModelKind::Gp].into_iter().chain(SpgpVariant::ALL.map(ModelKind::Spgp));
        for kind in kinds {
            let (m, x) = model(kind);
            let text = to_string(&m);
            let back = from_str(&text).unwrap();
            assert_eq!(back.params, m.params, "{kind}");
            assert_eq!(back.preprocessing, m.preprocessing);
            assert_eq!(back.meta, m.meta);
            assert_eq!(back.input_names, m.input_names);
            let a = m.predict(&x).unwrap();
            let b = back.predict(&x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert_eq!(p.mean.to_bits(), q.mean.to_bits());
                assert_eq!(p.variance.to_bits(), q.variance.to_bits());
            }
            assert_eq!(to_string(&back), text);
        }
    }

    #[test]
    fn save_and_load_via_disk() {
        let raw = generate_heteroscedastic(30, 1, Scenario::SmoothVarying).unwrap();
        let ds = normalize(&raw).unwrap();
        let shape = FitShape { kind: ModelKind::Spgp(SpgpVariant::Hs), n_pseudo: 4, proj_dim: 0 };
        let (m, _) = TrainedModel::fit(&ds, shape, &OptConfig { restarts: 1, max_iterations: 10, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let (m, _) = model(ModelKind::Spgp(SpgpVariant::Plain));
        let text = to_string(&m);
        let future = text.replacen("spgp-model 1", "spgp-model 2", 1);
        match from_str(&future) {
            Err(Error::ModelFile(msg)) => assert!(msg.contains("version 2")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(from_str("hello"), Err(Error::ModelFile(_))));
        let truncated: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(matches!(from_str(&truncated), Err(Error::ModelFile(_))));
        let tampered = text.replace("n_pseudo 5", "n_pseudo 6");
        assert!(matches!(from_str(&tampered), Err(Error::ModelFile(_))));
    }
}
