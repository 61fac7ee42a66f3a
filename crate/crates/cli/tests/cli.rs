use std::path::Path;
use std::process::{Command, Output};

use glasstereo::data::{read_pfm, write_pfm, PointCloud};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_glasstereo"));
    c.env_remove("GLASSTEREO_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn glasstereo")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, count: &str, val: &str) {
    ok(&["generate", "--seed", "4", "--out", p(dir), "--count", count, "--val-count", val]);
}

fn train_tiny(dir: &Path, manifest: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 1\n\n[dataset]\nmanifest = {:?}\n\n[model]\niterations_train = 2\niterations_eval = 2\n\n[schedule]\ntotal_steps = 2\nbatch_size = 1\n",
            p(manifest)
        ),
    )
    .unwrap();
    let out = dir.join("run");
    ok(&["train", "--config", p(&cfg), "--out", p(&out)]);
    out
}

#[test]
fn every_command_has_help() {
    for cmd in ["generate", "train", "eval", "infer", "export-pc"] {
        let out = ok(&[cmd, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    ok(&["--help"]);
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_eq!(run(&["generate"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(run(&["train", "--config", p(&cfg)]).status.code(), Some(2));
    let out = dir.path().join("g");
    let r = run(&["generate", "--out", p(&out), "--count", "1", "--val-count", "2"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope/manifest.json");
    let r = run(&[
        "eval",
        "--manifest",
        p(&missing),
        "--pred-dir",
        p(dir.path()),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn zero_count_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    ok(&["generate", "--out", p(&out), "--count", "0"]);
    let text = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v.as_array().map(|a| a.len()), Some(0));
    assert!(out.join("resolved_config.json").is_file());
}

#[test]
fn eval_of_ground_truth_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "3", "0");
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for i in 0..3 {
        let id = format!("sample_{i:05}");
        let gt = read_pfm(&data.join(&id).join("disparity.pfm")).unwrap();
        // invalid pixels are stored as +inf and are excluded anyway
        let pred = gt.mapv(|d| if d.is_finite() { d } else { 0.0 });
        write_pfm(&preds.join(format!("{id}.pfm")), &pred).unwrap();
    }
    let out = dir.path().join("eval");
    ok(&[
        "eval",
        "--manifest",
        p(&data.join("manifest.json")),
        "--pred-dir",
        p(&preds),
        "--out",
        p(&out),
        "--name",
        "oracle",
    ]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(v["samples"], 3);
    assert_eq!(v["skipped"], 0);
    for domain in ["all_valid", "mask_only"] {
        let r = &v[domain];
        assert_eq!(r["avg_err"], 0.0, "{domain}");
        assert_eq!(r["rms"], 0.0, "{domain}");
        for b in r["bad"].as_object().unwrap().values() {
            assert_eq!(b.as_f64(), Some(0.0));
        }
    }
}

#[test]
fn train_infer_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "2", "1");
    let run_dir = train_tiny(dir.path(), &data.join("manifest.json"));
    let ckpt = run_dir.join("checkpoint.safetensors");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "lr", "loss", "wall_ms"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }

    let sample = data.join("sample_00000");
    let inf = dir.path().join("infer");
    ok(&[
        "infer",
        "--checkpoint",
        p(&ckpt),
        "--left",
        p(&sample.join("left.png")),
        "--right",
        p(&sample.join("right.png")),
        "--out",
        p(&inf),
    ]);
    let disp = read_pfm(&inf.join("disparity.pfm")).unwrap();
    assert_eq!(disp.dim(), (64, 128));
    assert!(inf.join("disparity.png").is_file());
    let scale: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(inf.join("disparity.json")).unwrap()).unwrap();
    assert!(scale["min"].as_f64().unwrap() <= scale["max"].as_f64().unwrap());

    let pc = dir.path().join("pc");
    ok(&[
        "export-pc",
        "--rig",
        p(&sample.join("meta.json")),
        "--disparity",
        p(&sample.join("disparity.pfm")),
        "--color",
        p(&sample.join("left.png")),
        "--out",
        p(&pc),
    ]);
    let cloud = PointCloud::load(&pc.join("points.txt")).unwrap();
    let gt = read_pfm(&sample.join("disparity.pfm")).unwrap();
    let valid = gt.iter().filter(|d| d.is_finite() && **d > 0.0).count();
    assert_eq!(cloud.len(), valid);
    assert_eq!(cloud.colors.as_ref().map(|c| c.len()), Some(valid));
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from_env");
    let r = bin()
        .args(["generate", "--count", "1"])
        .env("GLASSTEREO_OUT", &out)
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(out.join("manifest.json").is_file());
}
