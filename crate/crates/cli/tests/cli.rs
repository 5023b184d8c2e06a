use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spgp::data::{generate_heteroscedastic, normalize, read_csv};
use spgp::model_file;
use spgp::optimizer::FitShape;
use spgp::{ModelKind, OptConfig, Scenario, SpgpVariant, TrainedModel};
use tempfile::TempDir;

fn spgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spgp")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sample(dir: &TempDir, name: &str, n: usize, seed: u64, scenario: &str, extra: &[&str]) -> PathBuf {
    let out = path(dir, name);
    let n = n.to_string();
    let seed = seed.to_string();
    let mut args = vec!["sample", "--n", &n, "--seed", &seed, "--scenario", scenario, "--out", s(&out)];
    args.extend_from_slice(extra);
    let res = spgp(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out
}

/// (initial, final) NLML of the selected restart, from a run log.
fn log_summary(log: &str) -> (f64, f64) {
    let line = log.lines().find(|l| l.starts_with("# best restart")).expect("summary line");
    let f: Vec<&str> = line.split_whitespace().collect();
    (f[5].parse().unwrap(), f[7].parse().unwrap())
}

#[test]
fn train_writes_model_and_decreasing_log() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 150, 3, "smooth-varying", &[]);
    let model = path(&dir, "m.txt");
    let res = spgp(&["train", "--data", s(&data), "--variant", "spgp", "--m", "10", "--out", s(&model)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(model.exists());
    let log = fs::read_to_string(path(&dir, "m.txt.log")).unwrap();
    let (initial, fin) = log_summary(&log);
    assert!(fin <= initial, "{fin} > {initial}");
    // iteration lines have four fields and the selected trace is monotone
    let rows: Vec<Vec<f64>> = log
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(rows.iter().all(|r| r.len() == 4));
    assert!(model_file::load(&model).is_ok());
}

#[test]
fn run_log_is_appended() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 60, 1, "smooth-varying", &[]);
    let model = path(&dir, "m.txt");
    let log = path(&dir, "run.log");
    for _ in 0..2 {
        let res = spgp(&["train", "--data", s(&data), "--variant", "gp", "--restarts", "1", "--out", s(&model), "--log", s(&log)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.matches("# best restart").count(), 2);
}

#[test]
fn dr_without_g_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 30, 0, "wide", &[]);
    let res = spgp(&["train", "--data", s(&data), "--variant", "spgp-dr", "--m", "5", "--out", s(&path(&dir, "m"))]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("--g"), "{}", stderr(&res));
    assert!(!path(&dir, "m").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 30, 0, "smooth-varying", &[]);
    let out = path(&dir, "m");
    let d = s(&data);
    let o = s(&out);
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--data", d, "--variant", "spgp-xl", "--m", "5", "--out", o],
        vec!["train", "--data", d, "--variant", "spgp", "--out", o],
        vec!["train", "--data", d, "--variant", "spgp", "--m", "0", "--out", o],
        vec!["train", "--data", d, "--variant", "spgp", "--m", "4", "--g", "1", "--out", o],
        vec!["train", "--data", d, "--variant", "spgp-dr", "--m", "4", "--g", "2", "--out", o],
        vec!["train", "--data", d, "--variant", "gp", "--restarts", "0", "--out", o],
        vec!["sample", "--n", "5", "--scenario", "bogus", "--out", o],
        vec!["sample", "--n", "-5", "--scenario", "wide", "--out", o],
        vec!["sample", "--n", "5", "--scenario", "wide", "--dim", "2", "--out", o],
        vec!["gradcheck", "--variant", "spgp", "--inject-fault", "999"],
        vec!["gradcheck", "--variant", "spgp-dr", "--d", "2", "--g", "3"],
        vec!["evaluate", "--variant", "spgp", "--m", "4", "--data", d],
        vec!["frobnicate"],
    ];
    for args in cases {
        let res = spgp(&args);
        assert_eq!(code(&res), 2, "{args:?}: {}", stderr(&res));
    }
    assert!(!out.exists());
}

#[test]
fn data_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 30, 0, "smooth-varying", &[]);
    let bad = path(&dir, "bad.csv");
    fs::write(&bad, "x1,y\n1.0,2.0\n3.0,oops\n").unwrap();
    let missing = path(&dir, "missing.csv");
    let out = path(&dir, "m");
    let o = s(&out);
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--data", s(&bad), "--variant", "gp", "--out", o],
        vec!["train", "--data", s(&missing), "--variant", "gp", "--out", o],
        vec!["train", "--data", s(&data), "--target-col", "z", "--variant", "gp", "--out", o],
        vec!["train", "--data", s(&data), "--variant", "gp", "--log-target-offset", "-100", "--out", o],
        vec!["predict", "--model", s(&data), "--data", s(&data), "--out", o],
    ];
    for args in cases {
        let res = spgp(&args);
        assert_eq!(code(&res), 3, "{args:?}: {}", stderr(&res));
    }
    let res = spgp(&["train", "--data", s(&bad), "--variant", "gp", "--out", o]);
    assert!(stderr(&res).contains("line 3"), "{}", stderr(&res));
}

#[test]
fn wide_dr_logs_parameter_count() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "wide.csv", 120, 2, "wide", &["--dim", "106"]);
    let model = path(&dir, "m.txt");
    let res = spgp(&[
        "train", "--data", s(&data), "--variant", "spgp-dr", "--m", "10", "--g", "5", "--restarts", "1", "--max-iter", "5", "--out",
        s(&model),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let log = fs::read_to_string(path(&dir, "m.txt.log")).unwrap();
    assert!(log.contains(&format!("# parameters {}", (10 + 106) * 5 + 2)), "{log}");
    assert!(stdout(&res).contains("582 parameters"));
}

#[test]
fn near_noiseless_fit_predicts_training_targets() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 40, 5, "smooth-varying", &["--noise-scale", "0.001"]);
    let model = path(&dir, "m.txt");
    let preds = path(&dir, "p.csv");
    let res = spgp(&["train", "--data", s(&data), "--variant", "gp", "--out", s(&model)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let res = spgp(&["predict", "--model", s(&model), "--data", s(&data), "--out", s(&preds)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let truth = read_csv(&data).unwrap();
    let p = read_csv(&preds).unwrap();
    assert_eq!(p.header, ["mean", "variance", "lower95", "upper95"]);
    assert_eq!(p.rows.nrows(), truth.rows.nrows());
    for i in 0..p.rows.nrows() {
        let (y, mean) = (truth.rows[(i, 1)], p.rows[(i, 0)]);
        assert!((y - mean).abs() < 0.02, "row {i}: {y} vs {mean}");
        assert!(p.rows[(i, 2)] < mean && mean < p.rows[(i, 3)]);
    }
}

#[test]
fn dimension_mismatch_exits_3() {
    let dir = TempDir::new().unwrap();
    let one_d = sample(&dir, "d.csv", 40, 0, "smooth-varying", &[]);
    let wide = sample(&dir, "w.csv", 40, 0, "wide", &["--dim", "4"]);
    let model = path(&dir, "m.txt");
    let res = spgp(&["train", "--data", s(&one_d), "--variant", "spgp", "--m", "4", "--restarts", "1", "--out", s(&model)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let out = path(&dir, "p.csv");
    let res = spgp(&["predict", "--model", s(&model), "--data", s(&wide), "--out", s(&out)]);
    assert_eq!(code(&res), 3);
    assert!(stderr(&res).contains("expects 1 input"), "{}", stderr(&res));
    assert!(!out.exists());
    // same width, wrong column name
    let renamed = path(&dir, "r.csv");
    fs::write(&renamed, fs::read_to_string(&one_d).unwrap().replacen("x1", "t", 1)).unwrap();
    let res = spgp(&["predict", "--model", s(&model), "--data", s(&renamed), "--out", s(&out)]);
    assert_eq!(code(&res), 3);
}

#[test]
fn saved_model_predicts_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let raw = generate_heteroscedastic(80, 4, Scenario::SmoothVarying).unwrap();
    let ds = normalize(&raw).unwrap();
    let shape = FitShape { kind: ModelKind::Spgp(SpgpVariant::Hs), n_pseudo: 7, proj_dim: 0 };
    let cfg = OptConfig { restarts: 2, max_iterations: 60, ..Default::default() };
    let (model, _) = TrainedModel::fit(&ds, shape, &cfg).unwrap();
    let before = model.predict(&raw.x).unwrap();

    let model_path = path(&dir, "m.txt");
    model_file::save(&model, &model_path).unwrap();
    let data = path(&dir, "d.csv");
    fs::write(&data, raw.to_csv()).unwrap();
    let out = path(&dir, "p.csv");
    let res = spgp(&["predict", "--model", s(&model_path), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let after = read_csv(&out).unwrap();
    for (i, p) in before.iter().enumerate() {
        let row = [p.mean, p.variance, p.lower, p.upper];
        for (j, v) in row.iter().enumerate() {
            assert_eq!(v.to_bits(), after.rows[(i, j)].to_bits(), "row {i} col {j}");
        }
    }
}

/// Report lines with the timing columns blanked out.
fn untimed(report: &str) -> Vec<String> {
    report
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split('\t').collect();
            f[6] = "-";
            f[7] = "-";
            f.join("\t")
        })
        .collect()
}

#[test]
fn evaluate_reports_three_rows_deterministically() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 120, 9, "smooth-varying", &[]);
    let args = [
        "evaluate", "--variant", "gp,spgp,spgp-hs", "--m", "6", "--data", s(&data), "--split", "0.7", "--restarts", "2", "--max-iter",
        "80", "--seed", "11",
    ];
    let a = spgp(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = spgp(&args);
    let report = stdout(&a);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("variant\tnlpd"));
    for (line, name) in lines[1..].iter().zip(["gp", "spgp", "spgp-hs"]) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[0], name);
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        assert_eq!(f[5], "36");
        assert_eq!(f[8], "ok");
    }
    assert_eq!(untimed(&report), untimed(&stdout(&b)));
}

#[test]
fn evaluate_saved_model_and_train_test_files() {
    let dir = TempDir::new().unwrap();
    let train = sample(&dir, "train.csv", 80, 1, "smooth-varying", &[]);
    let test = sample(&dir, "test.csv", 30, 2, "smooth-varying", &[]);
    let model = path(&dir, "m.txt");
    let res = spgp(&["train", "--data", s(&train), "--variant", "spgp", "--m", "6", "--restarts", "2", "--out", s(&model)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report = path(&dir, "r.tsv");
    let res = spgp(&["evaluate", "--model", s(&model), "--test", s(&test), "--out", s(&report)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let saved = fs::read_to_string(&report).unwrap();
    let res = spgp(&[
        "evaluate", "--variant", "spgp", "--m", "6", "--restarts", "2", "--train", s(&train), "--test", s(&test),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    // the same training run, so the same scores
    let nlpd = |r: &str| r.lines().nth(1).unwrap().split('\t').take(4).map(String::from).collect::<Vec<_>>();
    assert_eq!(nlpd(&saved), nlpd(&stdout(&res)));
}

#[test]
fn commands_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = sample(&dir, "a.csv", 64, 42, "sampled", &[]);
    let b = sample(&dir, "b.csv", 64, 42, "sampled", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = sample(&dir, "c.csv", 64, 43, "sampled", &[]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    for name in ["m1", "m2"] {
        let out = path(&dir, name);
        let res = spgp(&["train", "--data", s(&a), "--variant", "spgp-hs", "--m", "5", "--restarts", "3", "--seed", "7", "--out", s(&out)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    assert_eq!(fs::read(path(&dir, "m1")).unwrap(), fs::read(path(&dir, "m2")).unwrap());
    assert_eq!(fs::read(path(&dir, "m1.log")).unwrap(), fs::read(path(&dir, "m2.log")).unwrap());

    let g1 = spgp(&["gradcheck", "--variant", "spgp-dr-hs", "--seed", "3"]);
    let g2 = spgp(&["gradcheck", "--variant", "spgp-dr-hs", "--seed", "3"]);
    assert_eq!(g1.stdout, g2.stdout);
}

#[test]
fn empty_sample_is_header_only() {
    let dir = TempDir::new().unwrap();
    for scenario in ["sampled", "smooth-varying", "wide"] {
        let out = sample(&dir, &format!("{scenario}.csv"), 0, 0, scenario, &[]);
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 1, "{scenario}: {text}");
        assert!(text.trim_end().ends_with(",y"));
    }
}

#[test]
fn gradcheck_passes_for_every_variant() {
    for variant in ["gp", "spgp", "spgp-dr", "spgp-hs", "spgp-dr-hs"] {
        for seed in ["0", "1"] {
            let res = spgp(&["gradcheck", "--variant", variant, "--seed", seed]);
            assert_eq!(code(&res), 0, "{variant}: {}{}", stdout(&res), stderr(&res));
            assert!(stdout(&res).trim_end().ends_with("PASS"));
        }
    }
}

#[test]
fn gradcheck_reports_segments_and_injected_fault() {
    let res = spgp(&["gradcheck", "--variant", "spgp-dr-hs", "--seed", "4"]);
    let out = stdout(&res);
    for seg in ["c", "P", "xbar", "h", "noise"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{seg}\t"))), "{seg} missing from\n{out}");
    }
    let res = spgp(&["gradcheck", "--variant", "spgp-dr-hs", "--seed", "4", "--inject-fault", "9"]);
    assert_eq!(code(&res), 5);
    assert!(stdout(&res).contains("at coordinate 9 (xbar)"), "{}", stdout(&res));
    assert!(stderr(&res).contains("worst is 9"), "{}", stderr(&res));
}

#[test]
fn log_target_offset_round_trips_through_files() {
    let dir = TempDir::new().unwrap();
    let data = sample(&dir, "d.csv", 60, 8, "smooth-varying", &[]);
    let model = path(&dir, "m.txt");
    let res = spgp(&[
        "train", "--data", s(&data), "--variant", "spgp", "--m", "6", "--restarts", "2", "--log-target-offset", "3", "--out",
        s(&model),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let loaded = model_file::load(&model).unwrap();
    assert_eq!(loaded.preprocessing.log_offset, Some(3.0));
    let preds = path(&dir, "p.csv");
    let res = spgp(&["predict", "--model", s(&model), "--data", s(&data), "--out", s(&preds)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let p = read_csv(&preds).unwrap();
    for i in 0..p.rows.nrows() {
        assert!(p.rows[(i, 0)] > -3.0 && p.rows[(i, 2)] > -3.0);
    }
}
