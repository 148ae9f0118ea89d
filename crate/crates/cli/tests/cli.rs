use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn hinfctl(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hinfctl"))
        .args(args)
        .output()
        .expect("binary runs");
    let text =
        String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().expect("exit code"), text)
}

fn ok(args: &[&str]) -> String {
    let (code, text) = hinfctl(args);
    assert_eq!(code, 0, "{args:?}: {text}");
    text
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Data rows of a CSV written by the tool: skip provenance and header.
fn csv_rows(p: PathBuf) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn synthetic(dir: &Path, unstable: &str) {
    ok(&[
        "gen",
        "--kind",
        "synthetic",
        "--nv",
        "60",
        "--np",
        "10",
        "--unstable",
        unstable,
        "--seed",
        "7",
        "--out",
        s(dir),
    ]);
}

#[test]
fn gen_writes_the_system_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synthetic(&a, "2");
    synthetic(&b, "2");
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["A.mtx", "B.mtx", "C.mtx", "E.mtx", "J.mtx", "manifest.json"]
    );
    for n in names {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
    let m = json(a.join("manifest.json"));
    assert_eq!(
        (m["n_v"].as_u64(), m["n_p"].as_u64(), m["seed"].as_u64()),
        (Some(60), Some(10), Some(7))
    );
    assert_eq!(m["kind"], "synthetic");
}

#[test]
fn toy_bundle_has_the_nonlinear_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("toy");
    ok(&[
        "gen",
        "--kind",
        "toy",
        "--nv",
        "80",
        "--np",
        "12",
        "--re",
        "90",
        "--seed",
        "3",
        "--out",
        s(&d),
    ]);
    for f in ["v_inf.mtx", "f.mtx", "N.mtx", "K.mtx", "p_inf.mtx", "E.mtx"] {
        assert!(d.join(f).exists(), "{f}");
    }
}

#[test]
fn margin_synth_simulate_on_a_synthetic_plant() {
    let tmp = tempfile::tempdir().unwrap();
    let (unstable, stable) = (tmp.path().join("u"), tmp.path().join("s"));
    synthetic(&unstable, "2");
    synthetic(&stable, "0");
    ok(&["margin", s(&unstable)]);
    ok(&["margin", s(&stable)]);
    let mu = json(unstable.join("margin.json"));
    let ms = json(stable.join("margin.json"));
    assert_eq!(mu["feasible"], true);
    assert!(!mu["probes"].as_array().unwrap().is_empty());
    assert!(mu["provenance"]["config_hash"].is_string());
    assert!(ms["gamma"].as_f64().unwrap() < mu["gamma"].as_f64().unwrap());

    let mut orders = Vec::new();
    for tol in ["1e-2", "1e-3", "1e-4"] {
        ok(&["synth", s(&unstable), "--tol", tol]);
        let c = json(unstable.join("certificate.json"));
        for key in ["eps", "beta", "gamma", "gamma_GK", "apriori_ok"] {
            assert!(c.get(key).is_some(), "{key}");
        }
        orders.push(c["r"].as_u64().unwrap());
    }
    assert!(orders.windows(2).all(|w| w[0] <= w[1]), "{orders:?}");

    let full = csv_rows(unstable.join("rom/sigma.csv")).len().to_string();
    ok(&["synth", s(&unstable), "--order", &full]);
    let c = json(unstable.join("certificate.json"));
    assert_eq!(c["eps"].as_f64(), Some(0.0));
    assert_eq!(c["apriori_ok"], true);
    assert!(unstable.join("controller/transfer.csv").exists());

    assert_eq!(hinfctl(&["simulate", s(&unstable)]).0, 0);
    let v = json(unstable.join("sim/verdict.json"));
    assert_eq!(v["stabilized"], true);
    let rows = csv_rows(unstable.join("sim/trace.csv"));
    assert_eq!(rows[0].len(), 1 + 3 + 2);
    let open = tmp.path().join("open");
    assert_eq!(
        hinfctl(&["simulate", s(&unstable), "--open-loop", "--out", s(&open)]).0,
        5
    );
}

#[test]
fn infeasible_margin_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("u");
    synthetic(&d, "2");
    assert_eq!(hinfctl(&["margin", s(&d), "--gamma-max", "1.0001"]).0, 3);
}

#[test]
fn input_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(hinfctl(&["margin", s(&tmp.path().join("missing"))]).0, 2);
    let d = tmp.path().join("u");
    synthetic(&d, "2");
    assert_eq!(
        hinfctl(&["synth", s(&d), "--tol", "1e-3"]).0,
        2,
        "synth before margin"
    );
    let conf = tmp.path().join("run.conf");
    fs::write(&conf, "gamma_max = 10.0\nshift = 3\n").unwrap();
    let (code, text) = hinfctl(&["margin", s(&d), "--config", s(&conf)]);
    assert_eq!(code, 2);
    assert!(text.contains("shift"), "{text}");
    assert_eq!(hinfctl(&["bogus"]).0, 2);
}

#[test]
fn config_file_sets_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("u");
    let conf = tmp.path().join("gen.conf");
    fs::write(&conf, "kind = \"synthetic\"\nnv = 40\nnp = 6\nseed = 11\n").unwrap();
    ok(&["gen", "--config", s(&conf), "--seed", "12", "--out", s(&d)]);
    let m = json(d.join("manifest.json"));
    assert_eq!(
        (m["n_v"].as_u64(), m["seed"].as_u64()),
        (Some(40), Some(12))
    );
}

#[test]
fn toy_pipeline_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("toy");
    ok(&["gen", "--kind", "toy", "--out", s(&d)]);
    ok(&["margin", s(&d)]);
    ok(&["synth", s(&d), "--tol", "1e-3"]);
    assert_eq!(hinfctl(&["simulate", s(&d)]).0, 0);
    assert_eq!(
        hinfctl(&[
            "simulate",
            s(&d),
            "--open-loop",
            "--out",
            s(&tmp.path().join("o"))
        ])
        .0,
        4
    );

    ok(&[
        "sweep",
        s(&d),
        "--ells",
        "64,32,16,8,4",
        "--tols",
        "1e-1,1e-2,1e-3,1e-4,1e-5",
    ]);
    let text = fs::read_to_string(d.join("sweep.csv")).unwrap();
    let header: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(
        &header[..10],
        [
            "ell",
            "tol",
            "r",
            "stabilized",
            "eps",
            "eps_hat",
            "delta_norm",
            "apriori_ok",
            "aposteriori_ok",
            "robcov_ok"
        ]
    );
    let rows = csv_rows(d.join("sweep.csv"));
    assert_eq!(rows.len(), 25);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (st, ap, rc) = (col("stabilized"), col("apriori_ok"), col("robcov_ok"));
    let certified: Vec<_> = rows
        .iter()
        .filter(|r| r[ap] == "true" && r[rc] == "true")
        .collect();
    assert!(!certified.is_empty());
    assert!(certified.iter().all(|r| r[st] == "true"));
    let outside = rows
        .iter()
        .filter(|r| r[st] == "true" && !(r[ap] == "true" && r[rc] == "true"));
    assert!(outside.count() > 0);
}
