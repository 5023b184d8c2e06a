//! Datasets: CSV ingestion, preprocessing, splits, the PCA baseline, the
//! bundled motorcycle corpus and the synthetic generators.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::kernels::ArdParams;
use crate::spgp::{sample_marginal, SpgpKernel, SpgpParams, SpgpVariant};
use crate::{Matrix, Vector};

const MOTORCYCLE_CSV: &str = include_str!("../data/mcycle.csv");

/// Header plus numeric rows, as read from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Matrix,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Columns in the given order, looked up by name.
    pub fn select(&self, names: &[String]) -> Result<Matrix> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| Error::InvalidArgument(format!("column '{n}' not found"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_fn(self.rows.nrows(), idx.len(), |i, j| self.rows[(i, idx[j])]))
    }
}

/// Parses the CSV grammar: a header line, comma separated decimal fields, no
/// quoting, `#` lines ignored. Blank lines are skipped as well.
pub fn parse_csv(text: &str) -> Result<Table> {
    let mut header: Option<Vec<String>> = None;
    let mut values = Vec::new();
    let mut n_rows = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match &header {
            None => {
                if fields.iter().any(|f| f.is_empty()) {
                    return Err(Error::Parse { line: line_no, msg: "empty column name in header".into() });
                }
                header = Some(fields.iter().map(|s| s.to_string()).collect());
            }
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("expected {} fields, found {}", h.len(), fields.len()),
                    });
                }
                for f in fields {
                    let v: f64 = f.parse().map_err(|_| Error::Parse { line: line_no, msg: format!("'{f}' is not a number") })?;
                    if !v.is_finite() {
                        return Err(Error::Parse { line: line_no, msg: format!("non-finite value '{f}'") });
                    }
                    values.push(v);
                }
                n_rows += 1;
            }
        }
    }
    let header = header.ok_or_else(|| Error::EmptyDataset("no header line".into()))?;
    let rows = Matrix::from_row_slice(n_rows, header.len(), &values);
    Ok(Table { header, rows })
}

pub fn read_csv(path: &Path) -> Result<Table> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Formats rows as CSV; values are written so they parse back exactly.
pub fn format_csv(header: &[String], rows: &Matrix) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..rows.nrows() {
        let line: Vec<String> = rows.row(i).iter().map(|v| format_float(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Shortest decimal form that parses back to the same double.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Transformations applied to a dataset, in order: optional `log(y + a)` on the
/// targets, then per-column shift and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_shift: f64,
    pub target_scale: f64,
    pub log_offset: Option<f64>,
}

impl Preprocessing {
    pub fn identity(dim: usize) -> Self {
        Self { input_shift: vec![0.0; dim], input_scale: vec![1.0; dim], target_shift: 0.0, target_scale: 1.0, log_offset: None }
    }

    pub fn dim(&self) -> usize {
        self.input_shift.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.input_shift.iter().any(|v| *v != 0.0)
            || self.input_scale.iter().any(|v| *v != 1.0)
            || self.target_shift != 0.0
            || self.target_scale != 1.0
    }

    /// Maps raw inputs into model space.
    pub fn transform_inputs(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.dim() {
            return invalid(format!("data has {} input columns, model expects {}", x.ncols(), self.dim()));
        }
        Ok(Matrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.input_shift[j]) / self.input_scale[j]))
    }

    pub fn restore_inputs(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.input_scale[j] + self.input_shift[j])
    }

    /// Raw target to model space (log transform, then standardization).
    pub fn transform_target(&self, y: f64) -> Result<f64> {
        let t = match self.log_offset {
            Some(a) => {
                if !(y + a > 0.0) {
                    return invalid(format!("target {y} is outside the log transform domain (offset {a})"));
                }
                (y + a).ln()
            }
            None => y,
        };
        Ok((t - self.target_shift) / self.target_scale)
    }

    /// Model-space target back to the (possibly log-transformed) space, without
    /// undoing the log.
    pub fn unscale_target(&self, t: f64) -> f64 {
        t * self.target_scale + self.target_shift
    }

    pub fn restore_target(&self, t: f64) -> f64 {
        let u = self.unscale_target(t);
        match self.log_offset {
            Some(a) => u.exp() - a,
            None => u,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vector,
    pub input_names: Vec<String>,
    pub target_name: String,
    pub preprocessing: Preprocessing,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vector, input_names: Vec<String>, target_name: String) -> Result<Self> {
        if x.nrows() != y.len() {
            return invalid(format!("{} input rows but {} targets", x.nrows(), y.len()));
        }
        if input_names.len() != x.ncols() {
            return invalid(format!("{} names for {} input columns", input_names.len(), x.ncols()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return invalid("dataset contains non-finite values");
        }
        let d = x.ncols();
        Ok(Self { x, y, input_names, target_name, preprocessing: Preprocessing::identity(d) })
    }

    /// Builds a dataset from generic columns, naming them `x1..xD` and `y`.
    pub fn from_arrays(x: Matrix, y: Vector) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(x, y, names, "y".into())
    }

    pub fn from_table(table: &Table, target: &str) -> Result<Self> {
        let t = table.column_index(target).ok_or_else(|| Error::InvalidArgument(format!("target column '{target}' not found")))?;
        if table.rows.nrows() == 0 {
            return Err(Error::EmptyDataset("file has a header but no data rows".into()));
        }
        let names: Vec<String> = table.header.iter().filter(|h| *h != target).cloned().collect();
        if names.is_empty() {
            return invalid("no input columns besides the target");
        }
        let x = table.select(&names)?;
        let y = Vector::from_iterator(table.rows.nrows(), table.rows.column(t).iter().copied());
        Self::new(x, y, names, target.to_string())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: Matrix::from_fn(idx.len(), self.dim(), |i, j| self.x[(idx[i], j)]),
            y: Vector::from_fn(idx.len(), |i, _| self.y[idx[i]]),
            input_names: self.input_names.clone(),
            target_name: self.target_name.clone(),
            preprocessing: self.preprocessing.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut header = self.input_names.clone();
        header.push(self.target_name.clone());
        let mut rows = self.x.clone().insert_column(self.dim(), 0.0);
        rows.set_column(self.dim(), &self.y);
        format_csv(&header, &rows)
    }
}

pub fn load_csv(path: &Path, target: &str) -> Result<Dataset> {
    Dataset::from_table(&read_csv(path)?, target)
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes each input column and the targets to zero mean and unit
/// variance. Constant columns keep scale 1. Composes with any earlier log
/// transform.
pub fn normalize(ds: &Dataset) -> Result<Dataset> {
    if ds.len() < 2 {
        return invalid(format!("normalization needs at least 2 rows, got {}", ds.len()));
    }
    if ds.preprocessing.is_normalized() {
        return invalid("dataset is already normalized");
    }
    let mut pre = ds.preprocessing.clone();
    for j in 0..ds.dim() {
        let (m, s) = mean_std(ds.x.column(j).iter().copied());
        pre.input_shift[j] = m;
        pre.input_scale[j] = if s > 0.0 { s } else { 1.0 };
    }
    let (m, s) = mean_std(ds.y.iter().copied());
    pre.target_shift = m;
    pre.target_scale = if s > 0.0 { s } else { 1.0 };
    let x = pre.transform_inputs(&ds.x)?;
    let y = ds.y.map(|v| (v - m) / pre.target_scale);
    Ok(Dataset { x, y, preprocessing: pre, ..ds.clone() })
}

/// Undoes [`normalize`], leaving any log transform in place.
pub fn denormalize(ds: &Dataset) -> Dataset {
    let pre = &ds.preprocessing;
    let x = pre.restore_inputs(&ds.x);
    let y = ds.y.map(|v| pre.unscale_target(v));
    let mut out = Preprocessing::identity(ds.dim());
    out.log_offset = pre.log_offset;
    Dataset { x, y, preprocessing: out, ..ds.clone() }
}

/// Replaces targets with `log(y + a)`. Must precede normalization.
pub fn log_transform_targets(ds: &Dataset, a: f64) -> Result<Dataset> {
    if !a.is_finite() {
        return invalid("log offset must be finite");
    }
    if ds.preprocessing.is_normalized() || ds.preprocessing.log_offset.is_some() {
        return invalid("the log transform must be applied to raw targets");
    }
    let mut y = ds.y.clone();
    for (i, v) in y.iter_mut().enumerate() {
        if !(*v + a > 0.0) {
            return invalid(format!("row {}: y + a = {} is not positive", i + 1, *v + a));
        }
        *v = (*v + a).ln();
    }
    let mut pre = ds.preprocessing.clone();
    pre.log_offset = Some(a);
    Ok(Dataset { y, preprocessing: pre, ..ds.clone() })
}

/// Top `g` principal directions of the rows of `x` as a `g x D` matrix with
/// orthonormal rows, in decreasing eigenvalue order. Each row is signed so its
/// largest-magnitude entry is positive.
pub fn principal_directions(x: &Matrix, g: usize) -> Result<Matrix> {
    let (n, d) = x.shape();
    if g == 0 || g > d {
        return invalid(format!("projection dimension must satisfy 1 <= G <= D, got G = {g}, D = {d}"));
    }
    if n == 0 {
        return Err(Error::EmptyDataset("no rows to project".into()));
    }
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.tr_mul(&centered) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut p = Matrix::zeros(g, d);
    for (r, &k) in order.iter().take(g).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().fold(0.0f64, |m, e| if e.abs() > m.abs() { *e } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for j in 0..d {
            p[(r, j)] = sign * v[j];
        }
    }
    Ok(p)
}

/// PCA baseline: projects inputs onto the top `g` principal directions,
/// ignoring the targets. Returns the projection and the projected dataset
/// (inputs named `pc1..pcG`).
pub fn pca_project(ds: &Dataset, g: usize) -> Result<(Matrix, Dataset)> {
    let p = principal_directions(&ds.x, g)?;
    let x = &ds.x * p.transpose();
    let names = (1..=g).map(|k| format!("pc{k}")).collect();
    let projected = Dataset { x, y: ds.y.clone(), input_names: names, target_name: ds.target_name.clone(), preprocessing: ds.preprocessing.clone() };
    Ok((p, projected))
}

/// Median Euclidean distance between distinct rows, using at most
/// `max_points` randomly chosen rows.
pub fn median_pairwise_distance(x: &Matrix, max_points: usize, rng: &mut impl Rng) -> f64 {
    let n = x.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    if n > max_points {
        idx.shuffle(rng);
        idx.truncate(max_points);
    }
    let mut dists = Vec::with_capacity(idx.len() * idx.len() / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            dists.push((x.row(i) - x.row(j)).norm());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Random partition; whatever is left after train and validation is test.
    Fractions { train: f64, val: f64, seed: u64 },
    Indices { train: Vec<usize>, val: Vec<usize>, test: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    match spec {
        SplitSpec::Fractions { train, val, seed } => {
            if !(*train >= 0.0 && *val >= 0.0 && train + val <= 1.0) {
                return invalid(format!("bad split fractions {train}, {val}"));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let n_train = (train * n as f64).round() as usize;
            let n_val = ((val * n as f64).round() as usize).min(n - n_train);
            let test = idx.split_off(n_train + n_val);
            let val = idx.split_off(n_train);
            Ok(Split { train: idx, val, test })
        }
        SplitSpec::Indices { train, val, test } => {
            let mut seen = vec![false; n];
            for &i in train.iter().chain(val).chain(test) {
                if i >= n || seen[i] {
                    return invalid(format!("index {i} is out of range or repeated"));
                }
                seen[i] = true;
            }
            if seen.iter().any(|s| !s) {
                return invalid("split indices do not cover every row");
            }
            Ok(Split { train: train.clone(), val: val.clone(), test: test.clone() })
        }
    }
}

/// Random holdout of `k` test rows; returns (train, test) indices.
pub fn holdout(n: usize, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 || k >= n {
        return invalid(format!("cannot hold out {k} of {n} rows"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n - k);
    Ok((idx, test))
}

/// The motorcycle impact data (133 rows, input `times`, target `accel`).
pub fn motorcycle() -> Dataset {
    let table = parse_csv(MOTORCYCLE_CSV).expect("bundled corpus parses");
    Dataset::from_table(&table, "accel").expect("bundled corpus has an accel column")
}

/// Synthetic data generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Targets drawn from a fixed SPGP+HS marginal on a grid over `[-3, 3]`.
    Sampled,
    /// Smooth function with noise growing from left to right.
    SmoothVarying,
    /// High-dimensional inputs where the target depends on two directions
    /// that carry little of the input variance.
    Wide,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Sampled, Scenario::SmoothVarying, Scenario::Wide];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sampled => "sampled",
            Scenario::SmoothVarying => "smooth-varying",
            Scenario::Wide => "wide",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario '{s}' (expected sampled, smooth-varying or wide)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    /// Multiplies the noise standard deviation (`SmoothVarying`, `Wide`).
    pub noise_scale: f64,
    /// Input dimension for `Wide` (at least 3).
    pub dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { noise_scale: 1.0, dim: 20 }
    }
}

pub fn generate_heteroscedastic(n: usize, seed: u64, scenario: Scenario) -> Result<Dataset> {
    generate(n, seed, scenario, &GeneratorConfig::default())
}

pub fn generate(n: usize, seed: u64, scenario: Scenario, cfg: &GeneratorConfig) -> Result<Dataset> {
    if !(cfg.noise_scale >= 0.0 && cfg.noise_scale.is_finite()) {
        return invalid("noise scale must be finite and nonnegative");
    }
    match scenario {
        Scenario::Sampled => {
            let x = sampled_inputs(n);
            let y = if n == 0 { Vector::zeros(0) } else { sample_marginal(&sampled_params(), &x, seed)? };
            Dataset::from_arrays(x, y)
        }
        Scenario::SmoothVarying => Ok(smooth_varying(n, seed, cfg.noise_scale)),
        Scenario::Wide => wide(n, seed, cfg),
    }
}

/// The fixed SPGP+HS model behind [`Scenario::Sampled`]: six pseudo-inputs
/// with three uncertainty levels (two precise, two moderate, two nearly
/// switched off).
pub fn sampled_params() -> SpgpParams {
    let xbar = Matrix::from_column_slice(6, 1, &[-2.5, -1.5, -0.5, 0.5, 1.5, 2.5]);
    let log_h = vec![-9.0, -9.0, -1.0, -1.0, 3.0, 3.0];
    let kernel = ArdParams::new(1.0, vec![2.0]).expect("valid kernel");
    SpgpParams::new(SpgpVariant::Hs, SpgpKernel::Ard(kernel), xbar, Some(log_h), 0.01).expect("valid parameters")
}

/// Evenly spaced grid over `[-3, 3]` (a single point sits at 0).
pub fn sampled_inputs(n: usize) -> Matrix {
    Matrix::from_fn(n, 1, |i, _| if n == 1 { 0.0 } else { -3.0 + 6.0 * i as f64 / (n - 1) as f64 })
}

pub fn smooth_varying_mean(x: f64) -> f64 {
    (3.0 * x).sin() / (0.5 + x.abs())
}

pub fn smooth_varying_std(x: f64) -> f64 {
    0.05 + 0.3 * (x + 3.0) / 6.0
}

fn smooth_varying(n: usize, seed: u64, noise_scale: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..=3.0)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            smooth_varying_mean(x) + noise_scale * smooth_varying_std(x) * e
        })
        .collect();
    Dataset::from_arrays(Matrix::from_column_slice(n, 1, &xs), Vector::from_vec(ys)).expect("finite data")
}

/// Random orthonormal basis of R^d (columns).
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Latent coordinates `s` have standard deviation 1 in the first two
/// (informative) directions and 3 in the rest; inputs are `x = Q s` for a
/// random rotation `Q`, so the informative plane is not axis aligned and the
/// leading principal directions carry no signal.
fn wide(n: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Dataset> {
    let d = cfg.dim;
    if d < 3 {
        return invalid(format!("the wide scenario needs at least 3 dimensions, got {d}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_rotation(d, &mut rng);
    let mut x = Matrix::zeros(n, d);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let s = Vector::from_fn(d, |j, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if j < 2 {
                z
            } else {
                3.0 * z
            }
        });
        x.set_row(i, &(&q * &s).transpose());
        let e: f64 = StandardNormal.sample(&mut rng);
        y[i] = (1.5 * s[0]).sin() + 0.5 * s[1] * s[1] - 0.5 + cfg.noise_scale * 0.1 * e;
    }
    Dataset::from_arrays(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ds(rows: &[[f64; 3]]) -> Dataset {
        let x = Matrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
        let y = Vector::from_fn(rows.len(), |i, _| rows[i][2]);
        Dataset::from_arrays(x, y).unwrap()
    }

    #[test]
    fn parses_small_file() {
        let t = parse_csv("# comment\na,b,t\n1,2,3\n4,5.5,6\n\n7,-8e-1,9\n").unwrap();
        let d = Dataset::from_table(&t, "t").unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(d.x[(2, 1)], -0.8);
        assert_eq!(d.y[1], 6.0);
        assert_eq!(d.input_names, vec!["a", "b"]);
        let d = Dataset::from_table(&t, "a").unwrap();
        assert_eq!(d.input_names, vec!["b", "t"]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_csv("a,b\n1,2\n3\n") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_csv("a,b\n1,x\n") {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("'x'")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv("a,b\n1,nan\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn header_only_and_missing_target() {
        let t = parse_csv("a,b\n").unwrap();
        assert!(matches!(Dataset::from_table(&t, "b"), Err(Error::EmptyDataset(_))));
        assert!(matches!(parse_csv(""), Err(Error::EmptyDataset(_))));
        let t = parse_csv("a,b\n1,2\n").unwrap();
        assert!(matches!(Dataset::from_table(&t, "z"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn motorcycle_corpus() {
        let m = motorcycle();
        assert_eq!((m.len(), m.dim()), (133, 1));
        assert_eq!(m.x[(0, 0)], 2.4);
        assert_eq!(m.y[0], 0.0);
        assert_eq!(m.x[(132, 0)], 57.6);
        assert_eq!(m.y[132], 10.7);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = generate_heteroscedastic(17, 3, Scenario::SmoothVarying).unwrap();
        let back = Dataset::from_table(&parse_csv(&d.to_csv()).unwrap(), "y").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn normalize_degenerate_column() {
        let d = ds(&[[1.0, 5.0, 0.0], [2.0, 5.0, 1.0], [3.0, 5.0, 2.0]]);
        let n = normalize(&d).unwrap();
        assert_eq!(n.preprocessing.input_scale[1], 1.0);
        assert!(n.x.column(1).iter().all(|v| *v == 0.0));
        assert_relative_eq!(n.x.column(0).iter().map(|v| v * v).sum::<f64>() / 3.0, 1.0, epsilon = 1e-14);
        assert!(normalize(&d.subset(&[0])).is_err());
        assert!(normalize(&n).is_err());
    }

    #[test]
    fn normalize_is_idempotent_in_effect() {
        let d = generate(50, 1, Scenario::Wide, &GeneratorConfig { dim: 4, ..Default::default() }).unwrap();
        let n = normalize(&d).unwrap();
        let mut stripped = n.clone();
        stripped.preprocessing = Preprocessing::identity(4);
        let again = normalize(&stripped).unwrap();
        for (s, c) in again.preprocessing.input_shift.iter().zip(&again.preprocessing.input_scale) {
            assert!(s.abs() < 1e-10 && (c - 1.0).abs() < 1e-10);
        }
        assert!(again.preprocessing.target_shift.abs() < 1e-10);
    }

    #[test]
    fn log_transform_examples() {
        let d = ds(&[[0.0, 0.0, 0.0], [1.0, 1.0, std::f64::consts::E - 1.0]]);
        let l = log_transform_targets(&d, 1.0).unwrap();
        assert_eq!(l.y[0], 0.0);
        assert_relative_eq!(l.y[1], 1.0, epsilon = 1e-15);
        match log_transform_targets(&d, 0.0) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains("row 1")),
            other => panic!("{other:?}"),
        }
        assert!(log_transform_targets(&d, -0.5).is_err());
    }

    #[test]
    fn full_pipeline_inverts() {
        let d = ds(&[[1.0, 2.0, 3.0], [-4.0, 0.5, 10.0], [2.0, 7.0, 0.5]]);
        let p = normalize(&log_transform_targets(&d, 2.0).unwrap()).unwrap();
        let pre = &p.preprocessing;
        for i in 0..3 {
            assert_relative_eq!(pre.restore_target(p.y[i]), d.y[i], epsilon = 1e-12);
            assert_relative_eq!(pre.transform_target(d.y[i]).unwrap(), p.y[i], epsilon = 1e-12);
        }
        assert!((pre.restore_inputs(&p.x) - &d.x).amax() <= 1e-12);
    }

    #[test]
    fn pca_axis_aligned() {
        let x = Matrix::from_fn(6, 3, |i, j| if j == 0 { i as f64 - 2.5 } else { 0.0 });
        let p = principal_directions(&x, 1).unwrap();
        assert_relative_eq!(p[(0, 0)].abs(), 1.0, epsilon = 1e-12);
        assert!(p[(0, 1)].abs() < 1e-12 && p[(0, 2)].abs() < 1e-12);
        assert!(principal_directions(&x, 0).is_err());
        assert!(principal_directions(&x, 4).is_err());
    }

    #[test]
    fn pca_full_basis_is_lossless_and_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Matrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        let d = Dataset::from_arrays(x.clone(), Vector::zeros(20)).unwrap();
        let (p, proj) = pca_project(&d, 4).unwrap();
        assert!((&p * p.transpose() - Matrix::identity(4, 4)).amax() <= 1e-10);
        assert!((&proj.x * &p - &x).amax() <= 1e-12);
    }

    #[test]
    fn pca_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::from_fn(20, 4, |_, j| rng.random_range(-1.0..1.0) * (j + 1) as f64);
        let p = principal_directions(&x, 3).unwrap();
        let mean = x.row_mean();
        let mut c = x.clone();
        for mut r in c.row_iter_mut() {
            r -= &mean;
        }
        // right singular vectors of the centered data, sorted by singular value
        let svd = c.svd(false, true);
        let vt = svd.v_t.unwrap();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for (r, &k) in order.iter().take(3).enumerate() {
            let dot: f64 = (0..4).map(|j| p[(r, j)] * vt[(k, j)]).sum();
            let sign = dot.signum();
            for j in 0..4 {
                assert!((p[(r, j)] - sign * vt[(k, j)]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn splits_partition() {
        for seed in 0..5 {
            let s = split(37, &SplitSpec::Fractions { train: 0.6, val: 0.2, seed }).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            assert_eq!(all.len(), 37);
            all.sort();
            assert_eq!(all, (0..37).collect::<Vec<_>>());
            assert_eq!(s, split(37, &SplitSpec::Fractions { train: 0.6, val: 0.2, seed }).unwrap());
        }
        let ok = SplitSpec::Indices { train: vec![0, 2], val: vec![], test: vec![1] };
        assert!(split(3, &ok).is_ok());
        let dup = SplitSpec::Indices { train: vec![0, 1], val: vec![], test: vec![1, 2] };
        assert!(split(3, &dup).is_err());
        let gap = SplitSpec::Indices { train: vec![0], val: vec![], test: vec![1] };
        assert!(split(3, &gap).is_err());
        let (tr, te) = holdout(133, 10, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (123, 10));
    }

    #[test]
    fn generators_are_deterministic() {
        for sc in Scenario::ALL {
            let a = generate_heteroscedastic(30, 5, sc).unwrap();
            assert_eq!(a, generate_heteroscedastic(30, 5, sc).unwrap());
            assert_ne!(a.y, generate_heteroscedastic(30, 6, sc).unwrap().y);
            assert_eq!(generate_heteroscedastic(0, 5, sc).unwrap().len(), 0);
        }
    }

    #[test]
    fn smooth_varying_without_noise_is_exact() {
        let d = generate(40, 2, Scenario::SmoothVarying, &GeneratorConfig { noise_scale: 0.0, ..Default::default() }).unwrap();
        for i in 0..40 {
            assert_eq!(d.y[i], smooth_varying_mean(d.x[(i, 0)]));
        }
    }

    #[test]
    fn wide_signal_lives_off_the_principal_plane() {
        let d = generate(2000, 3, Scenario::Wide, &GeneratorConfig::default()).unwrap();
        let p = principal_directions(&d.x, 2).unwrap();
        let proj = &d.x * p.transpose();
        // correlation between target and the leading components is weak
        for k in 0..2 {
            let (mx, sx) = mean_std(proj.column(k).iter().copied());
            let (my, sy) = mean_std(d.y.iter().copied());
            let cov: f64 = proj.column(k).iter().zip(d.y.iter()).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / 2000.0;
            assert!((cov / (sx * sy)).abs() < 0.1);
        }
    }

    #[test]
    fn sampled_covariance_matches_generator_model() {
        // Monte Carlo check of the generator at N=4 against the dense SPGP+HS
        // covariance computed independently from the kernel formula.
        let x = sampled_inputs(4);
        let params = sampled_params();
        let dense = {
            let xb = params.pseudo_inputs();
            let k = |a: f64, b: f64| (-0.5 * 2.0 * (a - b) * (a - b)).exp();
            let h = params.h();
            let km = Matrix::from_fn(6, 6, |i, j| k(xb[(i, 0)], xb[(j, 0)]) + if i == j { h[i] } else { 0.0 });
            let knm = Matrix::from_fn(4, 6, |i, j| k(x[(i, 0)], xb[(j, 0)]));
            let q = &knm * km.lu().solve(&knm.transpose()).unwrap();
            Matrix::from_fn(4, 4, |i, j| if i == j { 1.0 + 0.01 } else { q[(i, j)] })
        };
        let draws = 100_000;
        let mut sum = Matrix::zeros(4, 4);
        let mut sum_sq = Matrix::zeros(4, 4);
        for s in 0..draws {
            let y = generate_heteroscedastic(4, s as u64, Scenario::Sampled).unwrap().y;
            let outer = &y * y.transpose();
            sum_sq += outer.component_mul(&outer);
            sum += outer;
        }
        let nd = draws as f64;
        for i in 0..4 {
            for j in 0..4 {
                let m = sum[(i, j)] / nd;
                let se = ((sum_sq[(i, j)] / nd - m * m) / nd).sqrt();
                assert!((m - dense[(i, j)]).abs() <= 5.0 * se, "({i},{j}) {m} vs {}", dense[(i, j)]);
            }
        }
    }

    proptest! {
        #[test]
        fn normalize_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 9..30)) {
            let n = vals.len() / 3;
            let d = ds(&(0..n).map(|i| [vals[3 * i], vals[3 * i + 1], vals[3 * i + 2]]).collect::<Vec<_>>());
            if let Ok(norm) = normalize(&d) {
                let back = denormalize(&norm);
                prop_assert!((back.x - &d.x).amax() <= 1e-12 * 1e3);
                prop_assert!((back.y - &d.y).amax() <= 1e-12 * 1e3);
            }
        }
    }
}
