use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smfit_core::io::VolumeFile;

fn smfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smfit")).args(args).output().expect("spawn smfit")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn run_ok(args: &[&str]) -> String {
    let out = smfit(args);
    assert!(out.status.success(), "smfit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest_outputs(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&text).unwrap()["outputs"].clone()
}

const SIM: &str = r#"{"phantom": {"dims": [6, 6, 5], "seed": 4}}"#;

const SMALL: &str = r#"{"phantom": {"dims": [6, 6, 5], "seed": 4},
  "inr": {"n_p": 16, "n_h": 16},
  "train": {"epochs": 2, "batch_size": 16, "learning_rate": 1e-3},
  "nlls": {"multi_start": 1, "max_iterations": 50},
  "inputs": {"signals": "sim/signals.smv", "mask": "sim/mask.smv", "protocol": "sim/protocol.txt",
             "truth": "sim/truth.smv", "sigma": "sim/sigma.smv"}}"#;

fn simulate_small(dir: &Path) {
    let cfg = write_config(dir, "sim.json", SIM);
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", dir.join("sim").to_str().unwrap()]);
}

#[test]
fn simulate_default_and_manifest_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"phantom": {"snr": "inf"}}"#);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["simulate", "--config", cfg, "--out-dir", a.to_str().unwrap()]);
    run_ok(&["simulate", "--config", cfg, "--out-dir", b.to_str().unwrap()]);
    assert_eq!(manifest_outputs(&a), manifest_outputs(&b));
    let sig = VolumeFile::load(&a.join("signals.smv")).unwrap();
    assert_eq!(sig.header.components, 154);
    assert_eq!(sig.header.dims, [16, 16, 16]);
    let sigma = VolumeFile::load(&a.join("sigma.smv")).unwrap();
    assert!(sigma.data.iter().all(|&s| s == 0.0));
    let c = tmp.path().join("c");
    run_ok(&["simulate", "--config", cfg, "--seed", "9", "--out-dir", c.to_str().unwrap()]);
    assert_ne!(manifest_outputs(&a)["truth.smv"], manifest_outputs(&c)["truth.smv"]);
}

#[test]
fn fit_upsample_score_and_render() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", SMALL);
    let cfg = cfg.to_str().unwrap();
    let dir = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    simulate_small(tmp.path());

    // rician without a sigma map is a configuration error
    let nosig = write_config(tmp.path(), "nosig.json", &SMALL.replace(r#", "sigma": "sim/sigma.smv""#, ""));
    let out = smfit(&["fit", "--config", nosig.to_str().unwrap(), "--loss", "rician", "--out-dir", &dir("x")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    run_ok(&["fit", "--config", cfg, "--out-dir", &dir("fit")]);
    let fit_dir = tmp.path().join("fit");
    for f in ["checkpoint.smck", "loss.csv", "params.smv", "manifest.json"] {
        assert!(fit_dir.join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(fit_dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,mean_loss,penalty_mean\n"));
    assert_eq!(loss.lines().count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fit_dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["fit_seconds"].as_f64().unwrap() > 0.0);

    let up = write_config(
        tmp.path(),
        "up.json",
        r#"{"upsample_factor": 1, "inputs": {"checkpoint": "fit/checkpoint.smck"}}"#,
    );
    run_ok(&["upsample", "--config", up.to_str().unwrap(), "--out-dir", &dir("up1")]);
    assert_eq!(fs::read(tmp.path().join("up1/upsampled.smv")).unwrap(), fs::read(fit_dir.join("params.smv")).unwrap());

    let score = write_config(
        tmp.path(),
        "score.json",
        r#"{"inputs": {"estimate": "sim/truth.smv", "truth": "sim/truth.smv", "mask": "sim/mask.smv"}}"#,
    );
    let table = run_ok(&["score", "--config", score.to_str().unwrap(), "--out-dir", &dir("score")]);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "parameter,rho,rmse");
    for r in &rows[1..] {
        let f: Vec<&str> = r.split(',').collect();
        assert!((f[1].parse::<f64>().unwrap() - 1.0).abs() < 1e-12, "{r}");
        assert_eq!(f[2].parse::<f64>().unwrap(), 0.0, "{r}");
    }

    let render = write_config(
        tmp.path(),
        "render.json",
        r#"{"inputs": {"volume": "sim/truth.smv"}, "render": {"component": "D_i", "plane": "coronal", "slice": 2}}"#,
    );
    run_ok(&["render", "--config", render.to_str().unwrap(), "--out-dir", &dir("img")]);
    let img = fs::read(tmp.path().join("img/D_i_coronal_2.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n6 5\n255\n"));
    assert_eq!(img.len(), "P5\n6 5\n255\n".len() + 30);
}

#[test]
fn lmax_8_fit_writes_50_components() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", SMALL);
    let cfg = cfg.to_str().unwrap();
    simulate_small(tmp.path());
    let out = tmp.path().join("fit8");
    run_ok(&["fit", "--config", cfg, "--lmax", "8", "--out-dir", out.to_str().unwrap()]);
    let p = VolumeFile::load(&out.join("params.smv")).unwrap();
    assert_eq!(p.header.components, 50);
    assert_eq!(p.to_params().unwrap().lmax, 8);
}

#[test]
fn nlls_writes_parameter_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", SMALL);
    let cfg = cfg.to_str().unwrap();
    simulate_small(tmp.path());
    let out = tmp.path().join("nlls");
    run_ok(&["nlls", "--config", cfg, "--out-dir", out.to_str().unwrap()]);
    let p = VolumeFile::load(&out.join("params.smv")).unwrap().to_params().unwrap();
    assert_eq!(p.grid.dims, [6, 6, 5]);
    assert!(VolumeFile::load(&out.join("cost.smv")).is_ok());
}

#[test]
fn render_of_constant_map_is_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = smfit_core::volume::VoxelGrid::new([4, 3, 2], [1.0; 3]).unwrap();
    VolumeFile::from_scalar(&grid, &[0.7; 24]).unwrap().save(&tmp.path().join("const.smv")).unwrap();
    let cfg = write_config(
        tmp.path(),
        "r.json",
        r#"{"inputs": {"volume": "const.smv"}, "render": {"component": "0", "plane": "axial"}}"#,
    );
    run_ok(&["render", "--config", cfg.to_str().unwrap(), "--out-dir", tmp.path().join("o").to_str().unwrap()]);
    let img = fs::read(tmp.path().join("o/c0_axial_1.pgm")).unwrap();
    let header = b"P5\n4 3\n255\n";
    assert!(img.starts_with(header));
    let pixels = &img[header.len()..];
    assert_eq!(pixels.len(), 12);
    assert!(pixels.iter().all(|&p| p == pixels[0]));
}

#[test]
fn errors_exit_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert!(!smfit(&["simulate", "--config", missing.to_str().unwrap()]).status.success());
    let unknown = write_config(tmp.path(), "u.json", r#"{"phantom": {"dims": [8, 8, 8], "colour": 1}}"#);
    let out = smfit(&["simulate", "--config", unknown.to_str().unwrap()]);
    assert!(!out.status.success());
    let no_input = write_config(tmp.path(), "n.json", "{}");
    let out = smfit(&["score", "--config", no_input.to_str().unwrap(), "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("inputs.estimate"));
    assert!(!smfit(&["fit", "--config", no_input.to_str().unwrap(), "--lmax", "3"]).status.success());
    assert!(!smfit(&["bogus"]).status.success());
}
