use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn partseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partseg")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    let p: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_configs_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let manifest = data.join("manifest.json");
    let gen = partseg(&[
        "gen-data",
        "--config",
        &config("desk_gen.json"),
        "--out",
        s(&data),
        "--set",
        "volume_shape=[16,16,16]",
        "--set",
        "datasets.0.case_count=5",
        "--set",
        "datasets.1.case_count=5",
        "--set",
        "datasets.2.case_count=5",
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let train = partseg(&[
        "train",
        "--config",
        &config("desk_train.json"),
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--set",
        "epochs=2",
        "--set",
        "iterations_per_epoch=2",
        "--set",
        "net.patch_shape=[8,8,8]",
    ]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["latest.ckpt", "best.ckpt", "train_log.csv", "resolved_config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ckpt = run.join("latest.ckpt");
    let eval = partseg(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out",
        s(&run.join("eval")),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let groups = std::fs::read_to_string(run.join("eval/groups.csv")).unwrap();
    assert!(groups.starts_with("group,mean_dice,n_classes\n"));
    assert!(groups.contains("dataset_average,"));

    let volume = data.join("volumes");
    let first = std::fs::read_dir(&volume)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().contains("image"))
        .min()
        .expect("an image volume");
    let pred = partseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--volume",
        s(&first),
        "--probabilities",
        "--out",
        s(&run.join("pred")),
    ]);
    assert!(pred.status.success(), "{}", String::from_utf8_lossy(&pred.stderr));
    assert!(run.join("pred/d1_c0_mask.mtvol").exists());
    assert!(run.join("pred/d3_c2_prob.mtvol").exists());
}

#[test]
fn missing_manifest_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = partseg(&[
        "train",
        "--manifest",
        "/nonexistent/manifest.json",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest not found"));
}

#[test]
fn bad_override_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = partseg(&["gen-data", "--out", s(dir.path()), "--set", "no_such_field=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = partseg(&["gradcheck", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(report.contains("network+partial_label"));
    assert!(!report.contains("FAIL"));
}
