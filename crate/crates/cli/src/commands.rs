use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use spgp::data::{self, format_csv, holdout, log_transform_targets, normalize, read_csv, GeneratorConfig, SplitSpec, Table};
use spgp::eval::{format_report, run_experiment, ExperimentRow, MeanSe, Preprocess, RowOutcome};
use spgp::gradients::{check_gradient, nlml, nlml_and_grad, random_problem};
use spgp::model_file::{self, write_atomic};
use spgp::optimizer::{FitResult, FitShape};
use spgp::{Dataset, Matrix, ModelKind, OptConfig, ParamLayout, ProblemSize, ScoreReport, TrainedModel, Vector};

use crate::exit::{CliError, CliResult};
use crate::{EvaluateArgs, FitArgs, GradcheckArgs, PredictArgs, SampleArgs, TrainArgs};

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_ABS_TOL: f64 = 1e-7;

fn with_path(path: &Path) -> impl Fn(spgp::Error) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        err.msg = format!("{}: {}", path.display(), err.msg);
        err
    }
}

fn read_table(path: &Path) -> CliResult<Table> {
    read_csv(path).map_err(with_path(path))
}

fn load(path: &Path, target: &str) -> CliResult<Dataset> {
    Dataset::from_table(&read_table(path)?, target).map_err(with_path(path))
}

fn fit_shape(kind: ModelKind, fit: &FitArgs) -> CliResult<FitShape> {
    let n_pseudo = match (kind, fit.m) {
        (ModelKind::Gp, _) => 0,
        (_, Some(m)) => m as usize,
        (_, None) => return Err(CliError::usage(format!("--variant {kind} requires --m"))),
    };
    let proj_dim = match (kind.has_dr(), fit.g) {
        (true, Some(g)) => g as usize,
        (true, None) => return Err(CliError::usage(format!("--variant {kind} requires --g"))),
        (false, _) => 0,
    };
    Ok(FitShape { kind, n_pseudo, proj_dim })
}

fn opt_config(fit: &FitArgs) -> OptConfig {
    OptConfig { max_iterations: fit.max_iter as usize, restarts: fit.restarts as usize, seed: fit.seed, ..Default::default() }
}

fn check_offset(fit: &FitArgs) -> CliResult<()> {
    match fit.log_target_offset {
        Some(a) if !a.is_finite() => Err(CliError::usage(format!("--log-target-offset must be finite, got {a}"))),
        _ => Ok(()),
    }
}

fn layout_for(shape: FitShape, input_dim: usize) -> CliResult<ParamLayout> {
    ParamLayout::new(shape.kind, input_dim, shape.n_pseudo, shape.proj_dim).map_err(|e| CliError::usage(e.to_string()))
}

/// Applies the target transform and, unless disabled, standardisation.
fn prepare_training(raw: &Dataset, fit: &FitArgs) -> CliResult<Dataset> {
    let ds = match fit.log_target_offset {
        Some(a) => log_transform_targets(raw, a)?,
        None => raw.clone(),
    };
    Ok(if fit.no_normalize { ds } else { normalize(&ds)? })
}

fn run_log(args: &TrainArgs, shape: FitShape, ds: &Dataset, layout: &ParamLayout, fit: &FitResult) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# train variant={} m={} g={} restarts={} seed={} n={} d={}",
        shape.kind,
        shape.n_pseudo,
        shape.proj_dim,
        args.fit.restarts,
        args.fit.seed,
        ds.len(),
        ds.dim()
    );
    let _ = writeln!(out, "# parameters {}", layout.len());
    let _ = writeln!(out, "# iter nlml grad_norm step");
    for (r, trace) in fit.traces.iter().enumerate() {
        let _ = writeln!(out, "# restart {r}");
        for rec in &trace.records {
            let _ = writeln!(out, "{} {:?} {:?} {:?}", rec.iter, rec.value, rec.grad_norm, rec.step);
        }
        let _ = writeln!(out, "# restart {r} stopped: {}", trace.termination);
    }
    let best = fit.best_trace();
    let _ = writeln!(
        out,
        "# best restart {} initial_nlml {:?} final_nlml {:?} iterations {}",
        fit.best_restart,
        best.initial_value(),
        fit.final_nlml,
        best.iterations()
    );
    out
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    check_offset(&args.fit)?;
    let shape = fit_shape(args.variant, &args.fit)?;
    if args.fit.g.is_some() && !shape.kind.has_dr() {
        return Err(CliError::usage(format!("--g does not apply to --variant {}", shape.kind)));
    }
    if args.fit.m.is_some() && shape.kind == ModelKind::Gp {
        warn!("--m is ignored for the exact GP");
    }
    let raw = load(&args.data, &args.target_col)?;
    let layout = layout_for(shape, raw.dim())?;
    info!("{} on {} points in {} dimensions: {} parameters", shape.kind, raw.len(), raw.dim(), layout.len());
    let ds = prepare_training(&raw, &args.fit)?;

    let t0 = Instant::now();
    let (model, fit) = TrainedModel::fit(&ds, shape, &opt_config(&args.fit))?;
    let secs = t0.elapsed().as_secs_f64();
    model_file::save(&model, &args.out).map_err(with_path(&args.out))?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    let text = run_log(&args, shape, &ds, &layout, &fit);
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| CliError::data(format!("{}: {e}", log_path.display())))?;

    let best = fit.best_trace();
    println!(
        "{}: {} parameters, nlml {:.6} -> {:.6} after {} iterations (restart {}, {:.2}s)",
        shape.kind,
        layout.len(),
        best.initial_value(),
        fit.final_nlml,
        best.iterations(),
        fit.best_restart,
        secs
    );
    Ok(())
}

/// The model's input columns from `table`. Every column other than the
/// model's target must be one of its inputs, and all inputs must be present.
fn model_inputs(table: &Table, model: &TrainedModel, path: &Path) -> CliResult<Matrix> {
    let inputs: Vec<&String> = table.header.iter().filter(|h| **h != model.target_name).collect();
    if inputs.len() != model.input_dim() {
        return Err(CliError::data(format!(
            "{}: model expects {} input columns ({}), data has {}",
            path.display(),
            model.input_dim(),
            model.input_names.join(","),
            inputs.len()
        )));
    }
    table.select(&model.input_names).map_err(with_path(path))
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    model_file::load(path).map_err(with_path(path))
}

pub fn predict(args: PredictArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let table = read_table(&args.data)?;
    let x = model_inputs(&table, &model, &args.data)?;
    let preds = model.predict(&x)?;
    let rows = Matrix::from_fn(preds.len(), 4, |i, j| {
        let p = &preds[i];
        [p.mean, p.variance, p.lower, p.upper][j]
    });
    let header: Vec<String> = ["mean", "variance", "lower95", "upper95"].map(String::from).to_vec();
    write_atomic(&args.out, &format_csv(&header, &rows)).map_err(with_path(&args.out))?;
    info!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(())
}

fn score_saved_model(model_path: &Path, test_path: &Path, target: Option<&str>) -> CliResult<ExperimentRow> {
    let model = load_model(model_path)?;
    let table = read_table(test_path)?;
    let target = target.unwrap_or(&model.target_name);
    let t = table
        .column_index(target)
        .ok_or_else(|| CliError::data(format!("{}: target column '{target}' not found", test_path.display())))?;
    let test_model = TrainedModel { target_name: target.to_string(), ..model };
    let x = model_inputs(&table, &test_model, test_path)?;
    let y = Vector::from_iterator(table.rows.nrows(), table.rows.column(t).iter().copied());
    let t0 = Instant::now();
    let (nlpd, mse) = test_model.score(&x, &y)?;
    let test_seconds = t0.elapsed().as_secs_f64();
    let report = ScoreReport { nlpd, mse, n_test: y.len(), train_seconds: 0.0, test_seconds };
    Ok(ExperimentRow {
        kind: test_model.kind(),
        outcome: RowOutcome::Scored {
            nlpd: MeanSe::of(&[nlpd]),
            mse: MeanSe::of(&[mse]),
            train_seconds: 0.0,
            test_seconds,
            n_test: y.len(),
            trials: vec![report],
        },
    })
}

fn evaluation_trials(args: &EvaluateArgs) -> CliResult<Vec<(Dataset, Dataset, u64)>> {
    let target = args.target_col.as_deref().unwrap_or("y");
    let seeds = (0..args.trials as u64).map(|t| args.fit.seed.wrapping_add(t));
    if let Some(train_path) = &args.train {
        let test_path = args.test.as_ref().expect("clap enforces --test with --train");
        let (train, test) = (load(train_path, target)?, load(test_path, target)?);
        if train.input_names != test.input_names {
            return Err(CliError::data(format!(
                "train columns ({}) differ from test columns ({})",
                train.input_names.join(","),
                test.input_names.join(",")
            )));
        }
        return Ok(seeds.map(|s| (train.clone(), test.clone(), s)).collect());
    }
    let Some(data_path) = &args.data else {
        return Err(CliError::usage("give --train and --test, or --data with --split or --holdout"));
    };
    let all = load(data_path, target)?;
    let n = all.len();
    seeds
        .map(|s| {
            let (train, test) = match (args.split, args.holdout) {
                (Some(f), None) => {
                    if !(f > 0.0 && f < 1.0) {
                        return Err(CliError::usage(format!("--split must be in (0, 1), got {f}")));
                    }
                    let sp = data::split(n, &SplitSpec::Fractions { train: f, val: 0.0, seed: s })?;
                    (sp.train, sp.test)
                }
                (None, Some(k)) => holdout(n, k, s).map_err(|e| CliError::usage(e.to_string()))?,
                _ => return Err(CliError::usage("--data needs --split or --holdout")),
            };
            if train.is_empty() || test.is_empty() {
                return Err(CliError::data(format!("split of {n} rows leaves an empty train or test set")));
            }
            Ok((all.subset(&train), all.subset(&test), s))
        })
        .collect()
}

pub fn evaluate(args: EvaluateArgs) -> CliResult<()> {
    check_offset(&args.fit)?;
    let rows = if let Some(model_path) = &args.model {
        let test = args.test.as_ref().ok_or_else(|| CliError::usage("--model needs --test"))?;
        vec![score_saved_model(model_path, test, args.target_col.as_deref())?]
    } else {
        if args.variant.is_empty() {
            return Err(CliError::usage("give --model, or --variant with training data"));
        }
        let shapes = args.variant.iter().map(|k| fit_shape(*k, &args.fit)).collect::<CliResult<Vec<_>>>()?;
        let mut trials = evaluation_trials(&args)?;
        for shape in &shapes {
            layout_for(*shape, trials[0].0.dim())?;
        }
        if let Some(a) = args.fit.log_target_offset {
            for (train, _, _) in &mut trials {
                *train = log_transform_targets(train, a)?;
            }
        }
        let pre = Preprocess { normalize: !args.fit.no_normalize };
        run_experiment(&trials, &shapes, &opt_config(&args.fit), pre)
    };

    let report = format_report(&rows);
    match &args.out {
        Some(path) => write_atomic(path, &report).map_err(with_path(path))?,
        None => print!("{report}"),
    }
    let failed: Vec<String> = rows
        .iter()
        .filter_map(|r| match &r.outcome {
            RowOutcome::Failed(msg) => Some(format!("{}: {msg}", r.kind)),
            RowOutcome::Scored { .. } => None,
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError { code: crate::exit::NUMERICAL, msg: failed.join("; ") })
    }
}

pub fn sample(args: SampleArgs) -> CliResult<()> {
    if !(args.noise_scale >= 0.0 && args.noise_scale.is_finite()) {
        return Err(CliError::usage(format!("--noise-scale must be finite and nonnegative, got {}", args.noise_scale)));
    }
    if args.scenario == spgp::Scenario::Wide && args.dim < 3 {
        return Err(CliError::usage(format!("--dim must be at least 3, got {}", args.dim)));
    }
    let cfg = GeneratorConfig { noise_scale: args.noise_scale, dim: args.dim };
    let ds = data::generate(args.n, args.seed, args.scenario, &cfg)?;
    write_atomic(&args.out, &ds.to_csv()).map_err(with_path(&args.out))?;
    info!("wrote {} {} rows to {}", ds.len(), args.scenario, args.out.display());
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    if !(args.step > 0.0 && args.step.is_finite()) {
        return Err(CliError::usage(format!("--step must be positive, got {}", args.step)));
    }
    let size = ProblemSize { n: args.n as usize, n_pseudo: args.m as usize, input_dim: args.d as usize, proj_dim: args.g as usize };
    let (v, x, y) = random_problem(args.variant, size, args.seed).map_err(|e| CliError::usage(e.to_string()))?;
    let mut analytic = nlml_and_grad(&v, &x, &y)?.grad;
    if let Some(i) = args.inject_fault {
        let g = analytic.get_mut(i).ok_or_else(|| CliError::usage(format!("coordinate {i} out of range 0..{}", v.len())))?;
        *g += 1e-2 * (1.0 + g.abs());
    }
    let rep = check_gradient(&analytic, &v, args.step, |p| nlml(p, &x, &y))?;

    println!(
        "variant {} n {} m {} d {} g {} seed {} step {:e} parameters {}",
        args.variant,
        size.n,
        size.n_pseudo,
        size.input_dim,
        size.proj_dim,
        args.seed,
        args.step,
        v.len()
    );
    println!("segment\tworst_discrepancy\tcoord\tanalytic\tnumeric");
    for (seg, d, i) in rep.per_segment() {
        let c = rep.coords[i];
        println!("{}\t{d:.3e}\t{i}\t{:.10e}\t{:.10e}", seg.name(), c.analytic, c.numeric);
    }
    let failures = rep.failures(GRAD_REL_TOL, GRAD_ABS_TOL);
    let worst = failures
        .iter()
        .copied()
        .max_by(|&a, &b| rep.coords[a].discrepancy().total_cmp(&rep.coords[b].discrepancy()))
        .unwrap_or(rep.worst_coord);
    let worst_seg = rep.layout.segment_of(worst).map_or("?", |s| s.name());
    println!("max discrepancy {:.3e} at coordinate {worst} ({worst_seg})", rep.coords[worst].discrepancy());
    if failures.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        let c = rep.coords[worst];
        Err(CliError::verification(format!(
            "{} of {} coordinates fail; worst is {worst} ({worst_seg}): analytic {:e}, numeric {:e}",
            failures.len(),
            v.len(),
            c.analytic,
            c.numeric
        )))
    }
}
