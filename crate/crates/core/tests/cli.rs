use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sigee::sim::{generate_example, ExampleSpec};
use tempfile::TempDir;

fn sigee(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_sigee"))
        .args(args)
        .output()
        .expect("spawn sigee");
    out.status.code().expect("exit code")
}

fn example_csv(dir: &Path, example: u8, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("ex{example}_{n}_{seed}.csv"));
    let ds = generate_example(&ExampleSpec::new(example, n, 1, seed).unwrap(), 0);
    ds.write_csv(&path).unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(Result::unwrap).collect()
}

fn estimates(path: &Path) -> Vec<f64> {
    read_rows(path).iter().map(|r| r[1].parse().unwrap()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_writes_one_row_per_covariate_with_finite_se() {
    let dir = TempDir::new().unwrap();
    let input = example_csv(dir.path(), 1, 100, 7);
    let out = dir.path().join("fit");
    assert_eq!(sigee(&["fit", "--input", s(&input), "--out", s(&out)]), 0);

    let rows = read_rows(&out.join("fit.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let est: f64 = r[1].parse().unwrap();
        let se: f64 = r[2].parse().unwrap();
        assert!(est.is_finite());
        assert!(se.is_finite() && se > 0.0);
        assert_eq!(&r[3], "true");
    }
    let norm: f64 = estimates(&out.join("fit.csv")).iter().map(|b| b * b).sum();
    assert!((norm - 1.0).abs() < 1e-12);
    assert!(read_rows(&out.join("ghat.csv")).len() > 10);
}

#[test]
fn malformed_csv_exits_1() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "cluster_id,y,x1,x2\n1,0.5,abc,1.0\n").unwrap();
    assert_eq!(sigee(&["fit", "--input", s(&bad), "--out", s(dir.path())]), 1);

    fs::write(&bad, "y,x1\n1,2\n").unwrap();
    assert_eq!(sigee(&["fit", "--input", s(&bad), "--out", s(dir.path())]), 1);

    let missing = dir.path().join("nope.csv");
    assert_eq!(sigee(&["fit", "--input", s(&missing), "--out", s(dir.path())]), 1);
}

#[test]
fn identity_and_default_correlation_give_different_estimates() {
    let dir = TempDir::new().unwrap();
    let input = example_csv(dir.path(), 1, 100, 7);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(sigee(&["fit", "--input", s(&input), "--out", s(&a)]), 0);
    assert_eq!(
        sigee(&["fit", "--input", s(&input), "--out", s(&b), "--correlation", "identity"]),
        0
    );
    let (ea, eb) = (estimates(&a.join("fit.csv")), estimates(&b.join("fit.csv")));
    let diff = ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-4, "max difference {diff}");
}

#[test]
fn fixed_lambda_zero_reproduces_fit() {
    let dir = TempDir::new().unwrap();
    let input = example_csv(dir.path(), 1, 100, 7);
    let (f, sel) = (dir.path().join("f"), dir.path().join("s"));
    assert_eq!(sigee(&["fit", "--input", s(&input), "--out", s(&f)]), 0);
    assert_eq!(
        sigee(&["select", "--input", s(&input), "--out", s(&sel), "--fixed-lambda", "0"]),
        0
    );
    let (ef, es) = (estimates(&f.join("fit.csv")), estimates(&sel.join("selection.csv")));
    for (x, y) in ef.iter().zip(&es) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        assert!(*y != 0.0);
    }
}

#[test]
fn default_selection_keeps_the_two_signal_variables() {
    let dir = TempDir::new().unwrap();
    let input = example_csv(dir.path(), 1, 100, 7);
    let out = dir.path().join("s");
    assert_eq!(sigee(&["select", "--input", s(&input), "--out", s(&out)]), 0);
    let rows = read_rows(&out.join("selection.csv"));
    let active: Vec<&str> = rows.iter().filter(|r| &r[2] == "true").map(|r| r.get(0).unwrap()).collect();
    assert_eq!(active, ["x1", "x2"]);
    for r in rows.iter().filter(|r| &r[2] == "false") {
        assert_eq!(&r[1], "0");
    }
    // 16 lambdas x 3 gammas
    assert_eq!(read_rows(&out.join("bic_path.csv")).len(), 48);
}

#[test]
fn empty_lambda_grid_exits_1() {
    let dir = TempDir::new().unwrap();
    let input = example_csv(dir.path(), 1, 30, 1);
    assert_eq!(
        sigee(&["select", "--input", s(&input), "--out", s(dir.path()), "--lambda-grid", ""]),
        1
    );
    assert_eq!(
        sigee(&["select", "--input", s(&input), "--out", s(dir.path()), "--gamma-grid", "0"]),
        1
    );
}

#[test]
fn unknown_example_exits_1() {
    let dir = TempDir::new().unwrap();
    assert_eq!(sigee(&["simulate", "--example", "9", "--reps", "1", "--out", s(dir.path())]), 1);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(sigee(&["frobnicate"]), 1);
    assert_eq!(sigee(&["fit"]), 1);
    assert_eq!(sigee(&["--help"]), 0);
}

#[test]
fn single_replication_smoke_run() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim");
    assert_eq!(
        sigee(&["simulate", "--example", "1", "--n", "30,40", "--reps", "1", "--seed", "3", "--out", s(&out)]),
        0
    );
    let md = fs::read_to_string(out.join("table_example1.md")).unwrap();
    let method_rows = md.lines().filter(|l| l.starts_with('|') && !l.starts_with("| n") && !l.starts_with("|-")).count();
    assert_eq!(method_rows, 8);
    assert_eq!(read_rows(&out.join("table_example1.csv")).len(), 8);
    assert_eq!(read_rows(&out.join("records_example1.csv")).len(), 8);
}

#[test]
fn same_flags_give_identical_files() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let code = sigee(&["simulate", "--example", "4", "--n", "30", "--reps", "3", "--seed", "11", "--out", s(out)]);
        assert_eq!(code, 0);
    }
    for name in ["table_example4.md", "table_example4.csv", "records_example4.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }

    let input = example_csv(dir.path(), 2, 40, 5);
    let (c, d) = (dir.path().join("c"), dir.path().join("d"));
    for (out, threads) in [(&c, "1"), (&d, "3")] {
        sigee(&["select", "--input", s(&input), "--out", s(out), "--threads", threads]);
    }
    for name in ["selection.csv", "bic_path.csv", "ghat.csv"] {
        assert_eq!(fs::read(c.join(name)).unwrap(), fs::read(d.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let input = example_csv(dir.path(), 1, 60, 2);
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("# shared settings\ninput = {}\ncorrelation = identity\nbandwidth = 0.4\n", s(&input)),
    )
    .unwrap();

    let a = dir.path().join("a");
    assert_eq!(sigee(&["fit", "--config", s(&cfg), "--out", s(&a)]), 0);
    let rows = read_rows(&a.join("fit.csv"));
    assert_eq!(&rows[0][6], "0.4");
    assert_eq!(&rows[0][7], "identity");

    let b = dir.path().join("b");
    assert_eq!(
        sigee(&["fit", "--config", s(&cfg), "--out", s(&b), "--correlation", "exchangeable"]),
        0
    );
    assert_eq!(&read_rows(&b.join("fit.csv"))[0][7], "exchangeable");

    fs::write(&cfg, "no equals sign here\n").unwrap();
    assert_eq!(sigee(&["fit", "--config", s(&cfg), "--input", s(&input)]), 1);
}

#[test]
fn trace_flag_writes_iterations() {
    let dir = TempDir::new().unwrap();
    let input = example_csv(dir.path(), 1, 50, 4);
    let out = dir.path().join("t");
    sigee(&["fit", "--input", s(&input), "--out", s(&out), "--trace"]);
    let rows = read_rows(&out.join("trace.csv"));
    assert!(rows.iter().any(|r| &r[0] == "initial"));
    assert!(rows.iter().any(|r| &r[0] == "bc_gee"));
}
