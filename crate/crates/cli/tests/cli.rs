use std::path::Path;
use std::process::{Command, Output};

use subnet_laplace::data::{make_synthetic_tabular, write_csv};
use subnet_laplace::experiment::MethodSpec;
use subnet_laplace::select::SelectionStrategy;
use sublap::{parse_grid, parse_method, write_atomic};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sublap")).args(args).output().unwrap()
}

fn write_data(dir: &Path) -> String {
    let data = make_synthetic_tabular(80, 2, 0.2, 1).unwrap();
    let mut buf = Vec::new();
    write_csv(&data, &["y".to_string()], &mut buf).unwrap();
    let path = dir.join("data.csv");
    std::fs::write(&path, buf).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_input_exits_with_code_two_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o").to_string_lossy().into_owned();
    let o = run(&["train", "--data", "/nonexistent/wine.csv", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/wine.csv"));
}

#[test]
fn empty_method_list_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = write_data(tmp.path());
    let out = tmp.path().join("o").to_string_lossy().into_owned();
    let o = run(&["evaluate", "--data", &csv, "--methods", "", "--out", &out]);
    assert!(!o.status.success());
}

#[test]
fn train_writes_checkpoint_curve_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = write_data(tmp.path());
    let out = tmp.path().join("run");
    let o = run(&["train", "--data", &csv, "--arch", "6", "--epochs", "20", "--out", &out.to_string_lossy()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["checkpoint.json", "manifest.json", "training_curve.csv"]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert!(manifest["created_unix"].as_u64().is_some());
}

#[test]
fn final_layer_selection_warns_about_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = write_data(tmp.path());
    let run_dir = tmp.path().join("run").to_string_lossy().into_owned();
    assert!(run(&["train", "--data", &csv, "--arch", "6", "--epochs", "10", "--out", &run_dir]).status.success());
    let ck = format!("{run_dir}/checkpoint.json");
    let sel = tmp.path().join("sel").to_string_lossy().into_owned();
    let o = run(&["select", "--checkpoint", &ck, "--data", &csv, "--strategy", "final-layer", "--fraction", "0.3", "--out", &sel]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let mask = subnet_laplace::select::SubnetworkMask::from_json(&std::fs::read_to_string(format!("{sel}/mask.json")).unwrap()).unwrap();
    // Weights of a 6 → 1 output layer.
    assert_eq!(mask.len(), 6);
}

#[test]
fn atomic_write_replaces_and_leaves_no_temp_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("nested").join("f.txt");
    write_atomic(&path, b"one").unwrap();
    write_atomic(&path, b"two").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"two");
    assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
}

#[test]
fn method_and_grid_parsing() {
    assert_eq!(parse_method("map").unwrap(), MethodSpec::Map);
    assert_eq!(
        parse_method("wass-diag:0.25").unwrap(),
        MethodSpec::Subnetwork {
            strategy: SelectionStrategy::WassersteinDiag,
            fraction: 0.25,
            seeds: Vec::new()
        }
    );
    assert!(parse_method("bogus").is_err());
    assert!(parse_method("wass-diag:abc").is_err());
    assert_eq!(parse_grid("default").unwrap().len(), 10);
    assert_eq!(parse_grid("0.1, 2").unwrap(), vec![0.1, 2.0]);
    assert!(parse_grid("0,1").is_err());
}
