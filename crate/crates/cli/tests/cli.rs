use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repaint3d::eval::{write_features, FeatureSet};
use repaint3d::geometry::{primitives, save_mesh, MeshFormat};
use repaint3d::pipeline::{Manifest, RunStatus};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_repaint3d"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_setup(dir: &Path) -> (PathBuf, PathBuf) {
    let mesh = dir.join("sphere.obj");
    save_mesh(&primitives::icosphere(1.0, 2), &mesh, MeshFormat::Obj).unwrap();
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"resolution": 64, "density": 600.0, "target_edge": 0.0, "eval_views": false}"#,
    )
    .unwrap();
    (mesh, cfg)
}

fn run_small(mesh: &Path, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--input",
        mesh.to_str().unwrap(),
        "--prompt",
        "ball",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn plan_prints_default_order() {
    let out = run(&["plan"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let az: Vec<f64> = v["views"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["camera"]["azimuth"].as_f64().unwrap())
        .collect();
    assert_eq!(
        az,
        vec![0.0, 40.0, 320.0, 80.0, 280.0, 120.0, 240.0, 160.0, 200.0]
    );
    let four = run(&["plan", "--views", "4"]);
    let v: serde_json::Value = serde_json::from_slice(&four.stdout).unwrap();
    assert_eq!(v["views"].as_array().unwrap().len(), 4);
}

#[test]
fn config_error_exit_code() {
    let out = run(&["plan", "--views", "10", "--increment", "40"]);
    assert_eq!(out.status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let (mesh, cfg) = small_setup(tmp.path());
    let out = run_small(
        &mesh,
        &cfg,
        &tmp.path().join("o"),
        &["--painter", "external:no-dir-placeholder"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn external_painter_process_matches_builtin() {
    let tmp = tempfile::tempdir().unwrap();
    let (mesh, cfg) = small_setup(tmp.path());
    let a = tmp.path().join("builtin");
    let b = tmp.path().join("external");
    assert!(run_small(&mesh, &cfg, &a, &[]).status.success());
    let painter = format!(
        "external:{} paint --dir {{dir}}",
        env!("CARGO_BIN_EXE_repaint3d")
    );
    let out = run_small(&mesh, &cfg, &b, &["--painter", &painter]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ma = Manifest::read(&a.join("manifest.json")).unwrap();
    let mb = Manifest::read(&b.join("manifest.json")).unwrap();
    let images = |m: &Manifest| -> Vec<(String, String)> {
        m.artifacts
            .iter()
            .filter(|(k, _)| k.ends_with(".png") || k.ends_with(".ply"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    assert!(!images(&ma).is_empty());
    assert_eq!(images(&ma), images(&mb));
}

#[test]
fn painter_failure_exit_code_and_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (mesh, cfg) = small_setup(tmp.path());
    let out_dir = tmp.path().join("o");
    // fails on the fourth view only
    let painter = format!(
        "external:case {{dir}} in *view_03*) echo boom >&2; exit 1;; *) {} paint --dir {{dir}};; esac",
        env!("CARGO_BIN_EXE_repaint3d")
    );
    let out = run_small(&mesh, &cfg, &out_dir, &["--painter", &painter]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("view 3") && err.contains("boom"), "{err}");
    assert!(out_dir.join("views/view_02/color.png").exists());
    let m = Manifest::read(&out_dir.join("manifest.json")).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
}

#[test]
fn fusion_failure_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let (mesh, cfg) = small_setup(tmp.path());
    let out = run_small(
        &mesh,
        &cfg,
        &tmp.path().join("o"),
        &["--consistency", "external:test -d {dir} && exit 1"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn export_and_eval_views_from_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (mesh, cfg) = small_setup(tmp.path());
    let run_dir = tmp.path().join("o");
    assert!(run_small(&mesh, &cfg, &run_dir, &[]).status.success());
    let obj = tmp.path().join("colored.obj");
    let out = run(&[
        "export",
        "--run",
        run_dir.to_str().unwrap(),
        "--target-edge",
        "0.05",
        "--out",
        obj.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&obj).unwrap();
    assert!(text
        .lines()
        .any(|l| l.starts_with("v ") && l.split_whitespace().count() == 7));

    let views = tmp.path().join("eval");
    let out = run(&[
        "eval",
        "views",
        "--mesh",
        obj.to_str().unwrap(),
        "--out",
        views.to_str().unwrap(),
        "--resolution",
        "32",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(views.join("view_000.png").exists() && views.join("view_315.png").exists());
}

#[test]
fn eval_metrics_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.bin");
    let b = tmp.path().join("b.bin");
    write_features(
        &FeatureSet::new("x", 4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        &a,
    )
    .unwrap();
    write_features(
        &FeatureSet::new("x", 4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        &b,
    )
    .unwrap();
    let out = run(&[
        "eval",
        "fid",
        "--a",
        a.to_str().unwrap(),
        "--b",
        b.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["fid"].as_f64().unwrap() - 1.0).abs() < 1e-6);

    let out = run(&[
        "eval",
        "kid",
        "--a",
        a.to_str().unwrap(),
        "--b",
        a.to_str().unwrap(),
        "--subset-size",
        "10",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["subset_size"], 4);
    assert!(v["mean"].as_f64().unwrap().abs() < 1e-9);

    let votes = tmp.path().join("votes.csv");
    std::fs::write(&votes, "winner,loser\nx,y\ny,x\nx,y\n").unwrap();
    let out = run(&["eval", "bt", "--votes", votes.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["scores"][0]["score"].as_f64().unwrap() > 0.0);

    std::fs::write(&votes, "a,b\nc,d\n").unwrap();
    let out = run(&["eval", "bt", "--votes", votes.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("disconnected"));
}
