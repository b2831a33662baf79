use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use shrinkfuse::causal::{
    build_fusion_input, read_csv_path, Adjustment, StudyRole, VarianceNormalization,
};
use shrinkfuse::shrinkage::{estimate, EstimateOptions};
use shrinkfuse::EstimatorId;
use tempfile::TempDir;

fn shrinkfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shrinkfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const FUSION: &str = r#"{
  "tau_r": [1.0, 0.5, -0.2, 0.8],
  "tau_o": [1.4, 0.9, 0.1, 1.5],
  "sigma_r2": [0.3, 0.2, 0.4, 0.25],
  "d": [0.25, 0.25, 0.25, 0.25]
}"#;

/// Four strata; outcomes depend on the stratum and a single covariate.
fn toy_csv(n_per_arm: usize, with_p: bool, shift: f64) -> String {
    let mut s = String::from(if with_p {
        "y,w,stratum,x1,p_hat\n"
    } else {
        "y,w,stratum,x1\n"
    });
    for k in 0..4 {
        for i in 0..2 * n_per_arm {
            let w = i % 2;
            let x = ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0;
            let y = k as f64
                + x
                + w as f64 * (0.5 + 0.1 * k as f64 + shift)
                + ((i * 13) % 5) as f64 * 0.1;
            if with_p {
                let p = 0.3 + 0.4 * ((i % 3) as f64 / 2.0);
                s.push_str(&format!("{y},{w},{k},{x},{p}\n"));
            } else {
                s.push_str(&format!("{y},{w},{k},{x}\n"));
            }
        }
    }
    s
}

#[test]
fn estimate_writes_requested_estimators() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "in.json", FUSION);
    let out = shrinkfuse(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--estimators",
        "kappa1_plus,gs_delta1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let ids: Vec<&str> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["kappa1_plus", "gs_delta1"]);
    assert_eq!(v[0]["estimate"].as_array().unwrap().len(), 4);
}

#[test]
fn malformed_json_reports_position() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "bad.json", "{\n  \"tau_r\": [1.0,\n}");
    let out = shrinkfuse(&["estimate", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line") && err.contains("column"), "{err}");
}

#[test]
fn unknown_estimator_lists_valid_ids() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "in.json", FUSION);
    let out = shrinkfuse(&[
        "estimate",
        "--input",
        input.to_str().unwrap(),
        "--estimators",
        "kappa9",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("kappa9") && err.contains("kappa1_plus_star") && err.contains("gs_delta2"),
        "{err}"
    );
}

#[test]
fn list_estimators_prints_every_id() {
    let out = shrinkfuse(&["estimate", "--list-estimators"]);
    assert_eq!(out.status.code(), Some(0));
    let listed: Vec<String> = stdout(&out).lines().map(String::from).collect();
    let expected: Vec<String> = EstimatorId::ALL.iter().map(|id| id.to_string()).collect();
    assert_eq!(listed, expected);
}

#[test]
fn fuse_matches_direct_library_calls() {
    let dir = TempDir::new().unwrap();
    let obs = write(dir.path(), "obs.csv", &toy_csv(6, false, 0.4));
    let rct = write(dir.path(), "rct.csv", &toy_csv(3, false, 0.0));
    let out = shrinkfuse(&[
        "fuse",
        "--obs",
        obs.to_str().unwrap(),
        "--rct",
        rct.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();

    let obs_data = read_csv_path(&obs, StudyRole::Observational, None).unwrap();
    let rct_data = read_csv_path(&rct, StudyRole::Randomized, Some(obs_data.k)).unwrap();
    let input = build_fusion_input(
        &obs_data,
        &rct_data,
        Adjustment::None,
        VarianceNormalization::Population,
    )
    .unwrap();
    let direct = estimate(
        EstimatorId::Kappa1PlusStar,
        &input,
        None,
        &EstimateOptions::default(),
    )
    .unwrap();
    let cli = v["estimates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["id"] == "kappa1_plus_star")
        .unwrap();
    let cli_est: Vec<f64> = cli["estimate"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(cli_est, direct.estimate);
    assert!(v["dominance"]["lemma1_holds"].is_boolean());
}

#[test]
fn weighting_without_propensities_or_covariates_is_a_user_error() {
    let dir = TempDir::new().unwrap();
    let bare = "y,w,stratum\n1,1,0\n0,0,0\n2,1,0\n1,0,0\n";
    let obs = write(dir.path(), "obs.csv", bare);
    let rct = write(dir.path(), "rct.csv", bare);
    let out = shrinkfuse(&[
        "fuse",
        "--obs",
        obs.to_str().unwrap(),
        "--rct",
        rct.to_str().unwrap(),
        "--adjustment",
        "sipw",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("covariates"), "{}", stderr(&out));
}

#[test]
fn sensitivity_rejects_gamma_below_one() {
    let dir = TempDir::new().unwrap();
    let obs = write(dir.path(), "obs.csv", &toy_csv(6, true, 0.4));
    let rct = write(dir.path(), "rct.csv", &toy_csv(3, false, 0.0));
    let out = shrinkfuse(&[
        "sensitivity",
        "--obs",
        obs.to_str().unwrap(),
        "--rct",
        rct.to_str().unwrap(),
        "--gamma",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn sensitivity_at_gamma_one_has_no_bias() {
    let dir = TempDir::new().unwrap();
    let obs = write(dir.path(), "obs.csv", &toy_csv(6, true, 0.4));
    let rct = write(dir.path(), "rct.csv", &toy_csv(3, false, 0.0));
    let report = dir.path().join("report.json");
    let out = shrinkfuse(&[
        "--output",
        report.to_str().unwrap(),
        "sensitivity",
        "--obs",
        obs.to_str().unwrap(),
        "--rct",
        rct.to_str().unwrap(),
        "--gamma",
        "1",
        "--bootstrap-b",
        "30",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for s in v["strata"].as_array().unwrap() {
        assert!(s["bias_l"].as_f64().unwrap().abs() < 1e-12);
        assert!(s["bias_r"].as_f64().unwrap().abs() < 1e-12);
    }
    assert!(dir.path().join("report.json.manifest.json").exists());
}

#[test]
fn simulate_is_reproducible_and_writes_manifests() {
    let dir = TempDir::new().unwrap();
    let config = write(
        dir.path(),
        "small.toml",
        "n_o = 1200\nn_r = 240\nk = 4\nouter_reps = 2\ninner_reps = 3\noracle_draws = 10\nseed = 11\n",
    );
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = shrinkfuse(&[
            "--format",
            "csv",
            "-o",
            out_dir.to_str().unwrap(),
            "simulate",
            "--config",
            config.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        out_dir
    };
    let a = run("a");
    let b = run("b");
    let label = "k4-similar-noshift-none";
    let csv_a = fs::read(a.join(format!("{label}.csv"))).unwrap();
    let csv_b = fs::read(b.join(format!("{label}.csv"))).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(String::from_utf8(csv_a).unwrap().lines().count(), 12);
    let manifest: Value = serde_json::from_str(
        &fs::read_to_string(a.join(format!("{label}.manifest.json"))).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["command"], "simulate");
    assert!(a.join(format!("{label}.json")).exists());
}
