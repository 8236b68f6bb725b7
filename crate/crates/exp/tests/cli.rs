use std::fs;
use std::process::Command;

use mdgnn_exp::{format_percent, percent_delta, read_csv, write_csv, ResultRow};
use proptest::prelude::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mdgnn-exp"));
    c.env("MDGNN_WORKERS", "1");
    c
}

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 3);
}

#[test]
fn tiny_sweep_writes_outputs_and_table_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"system": {"aps": 2, "ues": 2, "antennas": 2, "fairness_weights": [1.0, 1.0]}, "budget": {"test_draws": 4}}"#).unwrap();
    let out = bin()
        .args(["sweep", "--families", "edge-mdgnn,vertex-gnn", "--grid", "0.1", "--trials", "1", "--steps", "3"])
        .arg("--out")
        .arg(dir.path())
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["results.csv", "plot.txt", "spec.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let rows = read_csv(fs::File::open(dir.path().join("results.csv")).unwrap()).unwrap();
    let families: Vec<&str> = rows.iter().map(|r| r.family.as_str()).collect();
    assert!(families.contains(&"wmmse") && families.contains(&"edge-mdgnn") && families.contains(&"vertex-gnn"));

    let table = bin().arg("table").arg(dir.path().join("results.csv")).output().unwrap();
    assert!(table.status.success());
    assert_eq!(String::from_utf8_lossy(&table.stdout), String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bad_flags_are_rejected() {
    let out = bin().args(["sweep", "--task", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["sweep", "--families", "no-such-family"]).output().unwrap();
    assert!(!out.status.success());
}

fn row(family: String, value: f64, se: Vec<f64>) -> ResultRow {
    let mean = se.iter().sum::<f64>() / se.len() as f64;
    ResultRow {
        schema_version: 1,
        task: "precoding".into(),
        family,
        structure: "2D-GNN-L-K".into(),
        axis: "sigma_i_sq".into(),
        value,
        train_value: None,
        mean_se: mean,
        std_se: 0.0,
        a_term: 0.0,
        e_term: 0.0,
        param_count: 3,
        train_ms: 1.0,
        trials: se.len(),
        trial_se: se.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
    }
}

proptest! {
    #[test]
    fn percent_sign_follows_the_difference(se in 0.01f64..100.0, reference in 0.01f64..100.0) {
        let s = format_percent(se, reference);
        let d = percent_delta(se, reference);
        prop_assert!(s.ends_with('%'));
        if s != "0.00%" {
            prop_assert_eq!(s.starts_with('+'), d > 0.0);
            prop_assert_eq!(s.starts_with('-'), d < 0.0);
        } else {
            prop_assert!(d.abs() < 0.005 + 1e-12);
        }
    }

    #[test]
    fn csv_round_trips(family in "[a-z]{1,8}", value in 1e-3f64..10.0, se in prop::collection::vec(0.0f64..50.0, 1..4)) {
        let rows = vec![row(family, value, se)];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].family, &rows[0].family);
        prop_assert_eq!(back[0].value, rows[0].value);
        prop_assert_eq!(back[0].trial_values(), rows[0].trial_values());
    }
}
