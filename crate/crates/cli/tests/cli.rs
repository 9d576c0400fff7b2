use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn openfake(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openfake"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&openfake(&["--help"])), 0);
    assert_eq!(code(&openfake(&["no-such-command"])), 1);
    assert_eq!(code(&openfake(&["ablate"])), 1);
    assert_eq!(code(&openfake(&["eval", "--protocol", "sideways"])), 1);
    assert_eq!(code(&openfake(&["report", "--lambda", "150"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[stage1]\nepochs = \"many\"\n").unwrap();
    assert_eq!(code(&openfake(&["report", "--config", path(&bad)])), 1);
    assert_eq!(code(&openfake(&["report", "--config", path(&dir.path().join("missing.toml"))])), 1);
    assert_eq!(code(&openfake(&["ablate", "--axis", "scheme-stage1", "--values", "1", "--out", path(dir.path())])), 1);
    assert_eq!(code(&openfake(&["ablate", "--axis", "repr-method", "--values", "mse", "--out", path(dir.path())])), 1);
}

#[test]
fn synth_gen_counts_rows_and_reports_unwritable_targets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let run = openfake(&["synth-gen", "--n-videos", "5", "--frames", "2", "--side", "16", "--out", path(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 5 * 5 * 2);
    for method in ["REAL", "M1", "M2", "M3", "M4"] {
        assert!(out.join(method).is_dir());
    }

    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(&openfake(&["synth-gen", "--n-videos", "5", "--out", path(&blocker)])), 2);
    assert_eq!(code(&openfake(&["synth-gen", "--n-videos", "2", "--out", path(&dir.path().join("few"))])), 2);
}

fn tiny_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let cfg = format!(
        "[data]\nroot = \"{}\"\nframes_per_video = 2\nimage_side = 32\nsynthetic_videos = 10\nsynthetic_frames = 1\n\n[stage1]\nepochs = 1\nbatch_size = 16\n\n[stage2]\nepochs = 1\nbatch_size = 16\n",
        data.display()
    );
    let p = dir.join("tiny.toml");
    fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn full_workflow_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&openfake(&["synth-gen", "--n-videos", "15", "--frames", "2", "--side", "32", "--out", path(&data)])), 0);
    let cfg = tiny_config(dir.path(), &data);
    let out = dir.path().join("run");
    let common = ["--config", path(&cfg), "--out", path(&out), "--seed", "3"];
    let with = |extra: &[&str]| {
        let mut v: Vec<&str> = extra.to_vec();
        v.extend_from_slice(&common);
        openfake(&v)
    };

    let train = with(&["train", "--unknown", "M4"]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    assert!(stdout(&train).contains("closed-set accuracy"));
    assert!(out.join("model/model.safetensors").is_file());
    assert!(out.join("train_log.csv").is_file());
    assert!(out.join("config.toml").is_file());
    assert_eq!(code(&with(&["train", "--unknown", "M9"])), 1);

    let calibrate = with(&["calibrate", "--lambda", "25"]);
    assert_eq!(code(&calibrate), 0, "{}", String::from_utf8_lossy(&calibrate.stderr));
    let table: serde_json::Value = serde_json::from_slice(&fs::read(out.join("thresholds.json")).unwrap()).unwrap();
    assert_eq!(table["lambda_percentile"], 25.0);
    assert_eq!(table["classes"].as_array().unwrap().len(), 4);

    let explain = with(&["explain", "--per-class", "2"]);
    assert_eq!(code(&explain), 0, "{}", String::from_utf8_lossy(&explain.stderr));
    for f in ["tsne.csv", "umap.csv", "tsne.png", "umap.png", "summary.json"] {
        assert!(out.join("explain").join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_dir(out.join("explain/cam")).unwrap().count(), 10);

    let eval = with(&["eval", "--protocol", "cross-manipulation"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    for m in ["M1", "M2", "M3", "M4"] {
        let dir = out.join("cross_manipulation").join(format!("unknown_{m}"));
        assert!(dir.join("report.json").is_file());
        assert!(dir.join("scores.csv").is_file());
    }
    assert!(stdout(&eval).contains("mean unknown AUROC"));

    let family = with(&["eval", "--protocol", "cross-family"]);
    assert_eq!(code(&family), 0, "{}", String::from_utf8_lossy(&family.stderr));
    assert!(out.join("cross_family/train_global/unknown_M2/report.json").is_file());
    assert!(out.join("cross_family/train_local/unknown_M3/report.json").is_file());

    let cross = with(&["eval", "--protocol", "cross-dataset"]);
    assert_eq!(code(&cross), 0, "{}", String::from_utf8_lossy(&cross.stderr));
    assert!(out.join("data_cross/manifest.csv").is_file());
    let r: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("cross_dataset/report.json")).unwrap()).unwrap();
    assert_eq!(r["unknown"].as_array().unwrap().len(), 4);

    let report = with(&["report"]);
    assert_eq!(code(&report), 0);
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(md.matches("| cross_manipulation |").count(), 4);
    assert_eq!(md.matches("| cross_family |").count(), 4);
    assert_eq!(md.matches("| cross_dataset |").count(), 1);
}

#[test]
fn ablation_writes_side_by_side_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&openfake(&["synth-gen", "--n-videos", "10", "--frames", "1", "--side", "32", "--out", path(&data)])), 0);
    let cfg = tiny_config(dir.path(), &data);
    let out = dir.path().join("ablate");
    let run = openfake(&[
        "ablate", "--axis", "alpha", "--values", "1,2", "--seeds", "0", "--config", path(&cfg), "--out", path(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let md = fs::read_to_string(out.join("ablation_alpha.md")).unwrap();
    assert!(md.contains("| alpha=1 |") && md.contains("| alpha=2 |"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ablation_alpha.json")).unwrap()).unwrap();
    assert_eq!(json["columns"].as_array().unwrap().len(), 2);
}

#[test]
fn report_without_results_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&openfake(&["report", "--out", path(dir.path())])), 1);
}
