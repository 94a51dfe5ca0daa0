use std::path::Path;
use std::process::Command as Process;

use shjb_cli::{emit_report, run_experiment, CliError, Command, ExperimentConfig, Table};

const TWO: &str = "problem = \"two_control_1d\"\n";

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_shjb"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn verify_on_two_control_passes_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "two.toml", TWO);
    let out = dir.path().join("out");
    let status = bin()
        .args(["--config", cfg.to_str().unwrap(), "--command", "verify", "--out", out.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let (header, rows) = read_csv(&out.join("verify.csv"));
    assert_eq!(header, ["name", "anchor", "residual", "tolerance", "pass"]);
    assert!(rows.len() >= 15);
    assert!(rows.iter().all(|r| r[4] == "true"), "{rows:?}");
    for name in ["oracle_equivalence", "energy_identity", "snell_oracle", "certificate_exact", "fd_cross_check"] {
        assert!(rows.iter().any(|r| r[0] == name), "missing {name}");
    }
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "two.toml", TWO);
    for command in ["value", "certificate", "snell", "verify"] {
        let mut files = Vec::new();
        for threads in ["1", "4"] {
            let out = dir.path().join(format!("{command}-{threads}"));
            let status = bin()
                .env("HJB_LAB_THREADS", threads)
                .args(["--config", cfg.to_str().unwrap(), "--command", command, "--out", out.to_str().unwrap()])
                .output()
                .unwrap()
                .status;
            assert!(status.success());
            files.push(std::fs::read(out.join(format!("{command}.csv"))).unwrap());
        }
        assert_eq!(files[0], files[1], "{command} differs");
    }
}

#[test]
fn unknown_command_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "two.toml", TWO);
    let out = bin().args(["--config", cfg.to_str().unwrap(), "--command", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert!(matches!("bogus".parse::<Command>(), Err(CliError::UnknownCommand(_))));
}

#[test]
fn malformed_control_matrix_names_the_field() {
    let text = "problem = \"two_control_1d\"\ncontrols = [[[0.5]], [[1.0, 2.0]]]\n";
    let err = ExperimentConfig::from_toml_str(text).unwrap_err();
    assert!(matches!(&err, CliError::Config { field, .. } if field == "controls[1]"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", text);
    let out = bin().args(["--config", cfg.to_str().unwrap(), "--command", "value"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("controls[1]"));
}

#[test]
fn config_errors_name_their_field() {
    let cases = [
        ("problem = \"nope\"\n", "problem"),
        ("problem = \"two_control_1d\"\n[certificate]\neps = [0.4, 0.15]\n", "certificate.eps[1]"),
        ("problem = \"two_control_1d\"\n[penalty]\nschedule = [1.0, -2.0]\n", "penalty.schedule[1]"),
        ("problem = \"two_control_1d\"\n[tree]\nsteps = 0\n", "tree.steps"),
        ("problem = \"two_control_1d\"\n[strategy]\ncontrol = 2\n", "strategy.control"),
        ("problem = \"partial_nonmarkov\"\n[tree]\nlayout = \"markov\"\n", "tree.layout"),
        ("problem = \"two_control_1d\"\ncontrols = [[[0.5]], [[\"x\"]]]\n", ""),
    ];
    for (text, field) in cases {
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        match err {
            CliError::Config { field: f, .. } => assert_eq!(f, field),
            CliError::Parse(_) => assert!(field.is_empty(), "{text}"),
            other => panic!("{other}"),
        }
    }
    assert!(matches!(
        ExperimentConfig::from_toml_str("problem = \"zero\"\n[tree]\nstepz = 3\n"),
        Err(CliError::Parse(m)) if m.contains("stepz")
    ));
}

#[test]
fn empty_table_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let table = Table::new("empty", &["cell", "gap", "mass", "eps"]);
    let paths = emit_report(&[table], dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(&paths[0]).unwrap(), "cell,gap,mass,eps\n");
}

#[test]
fn column_orders_are_fixed() {
    let cfg = ExperimentConfig::from_toml_str(TWO).unwrap();
    let expect: [(Command, &[&str]); 5] = [
        (Command::Value, &["t", "node", "x", "V", "argmin"]),
        (Command::Potential, &["x", "u0", "EK_T", "energy_residual"]),
        (Command::Certificate, &["cell", "gap", "mass", "eps"]),
        (Command::Reflected, &["x", "u0", "linear0", "mass", "skorohod"]),
        (Command::Pde, &["t", "x", "u"]),
    ];
    for (command, header) in expect {
        let o = run_experiment(&cfg, command, 1.0).unwrap();
        assert_eq!(o.tables[0].header, header, "{command:?}");
        assert!(!o.tables[0].rows.is_empty());
        assert!(o.passed);
    }
    let snell = run_experiment(&cfg, Command::Snell, 1.0).unwrap();
    let h = &snell.tables[0].header;
    assert_eq!(&h[..4], ["x", "envelope", "mass", "skorohod"]);
    assert_eq!(h.len(), 4 + cfg.penalty.schedule.len());
    assert!(h[4..].iter().all(|c| c.starts_with("penalized_err_n")));
}

#[test]
fn certificate_rows_run_from_large_to_small_eps() {
    let text = format!("{TWO}[certificate]\neps = [0.1, 0.4, 0.2]\n");
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let o = run_experiment(&cfg, Command::Certificate, 1.0).unwrap();
    let t = &o.tables[0];
    let eps: Vec<f64> = t.rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(eps.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(eps[0], 0.4);
    // Cells of width eps on the box [-1, 1]: 5 + 10 + 20 rows.
    assert_eq!(t.rows.len(), 35);
}

#[test]
fn penalized_errors_shrink_with_n() {
    let cfg = ExperimentConfig::from_toml_str(TWO).unwrap();
    let o = run_experiment(&cfg, Command::Snell, 1.0).unwrap();
    for row in &o.tables[0].rows {
        let errs: Vec<f64> = row[4..].iter().map(|v| v.parse().unwrap()).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
        assert!(row[3].parse::<f64>().unwrap().abs() <= 1e-10);
    }
}

#[test]
fn tight_tolerance_scale_fails_the_reference_check() {
    let cfg = ExperimentConfig::from_toml_str(TWO).unwrap();
    let o = run_experiment(&cfg, Command::Verify, 1e-4).unwrap();
    assert!(!o.passed);
    let t = &o.tables[0];
    let fd = t.rows.iter().find(|r| r[0] == "fd_cross_check").unwrap();
    assert_eq!(fd[4], "false");
    assert!(run_experiment(&cfg, Command::Verify, 0.0).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "two.toml", TWO);
    let status = bin()
        .args(["--config", path.to_str().unwrap(), "--command", "verify", "--tolerance-scale", "1e-4"])
        .current_dir(dir.path())
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(1));
}

#[test]
fn partial_problem_reports_the_discretization_bias_of_psi() {
    let text = "problem = \"partial_nonmarkov\"\n[grid]\nradius = 1.0\nspacing = 0.05\n";
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let o = run_experiment(&cfg, Command::Verify, 1.0).unwrap();
    let rows = &o.tables[0].rows;
    let failed: Vec<&str> = rows.iter().filter(|r| r[4] == "false").map(|r| r[0].as_str()).collect();
    // The central-difference residual is an O(dt) tree bias, far above its
    // tolerance at N = 3; the frozen-point split vanishes.
    assert_eq!(failed, ["psi_central_difference"]);
    assert!(rows.iter().any(|r| r[0] == "psi_frozen_point" && r[4] == "true"));
    assert!(rows.iter().any(|r| r[0] == "filtration_spread" && r[4] == "true"));
}

#[test]
fn validate_reports_the_sampled_cost_checks() {
    let cfg = ExperimentConfig::from_toml_str("problem = \"gaussian_terminal\"\n").unwrap();
    let o = run_experiment(&cfg, Command::Validate, 1.0).unwrap();
    assert!(o.passed);
    let names: Vec<&str> = o.tables[0].rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["a1_nonnegativity", "a1_domination", "a1_holder"]);
}

#[test]
fn markov_layout_matches_the_tree_layout() {
    let base = "problem = \"two_control_1d\"\n[tree]\nsteps = 4\n";
    let tree = ExperimentConfig::from_toml_str(base).unwrap();
    let markov = ExperimentConfig::from_toml_str(&format!("{base}layout = \"markov\"\n")).unwrap();
    let a = run_experiment(&tree, Command::Value, 1.0).unwrap();
    let b = run_experiment(&markov, Command::Value, 1.0).unwrap();
    let roots = |o: &shjb_cli::Outcome| -> Vec<String> {
        o.tables[0].rows.iter().filter(|r| r[0] == "0").map(|r| r[3].clone()).collect()
    };
    assert_eq!(roots(&a), roots(&b));
}
