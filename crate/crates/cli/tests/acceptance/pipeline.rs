//! The command-line pipeline run end to end, twice.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, ensure, Result};

use crate::Outcome;

const SMALL: [&str; 4] = [
    "volume_shape=[16,16,16]",
    "datasets.0.case_count=5",
    "datasets.1.case_count=5",
    "datasets.2.case_count=6",
];

const SHORT: [&str; 5] = [
    "epochs=3",
    "iterations_per_epoch=3",
    "net.patch_shape=[8,8,8]",
    "schedule.head_warmup_epochs=1",
    "schedule.full_warmup_epochs=1",
];

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn partseg(args: &[&str], seed: u64, workers: usize, out: &Path, overrides: &[&str]) -> Result<()> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_partseg"));
    cmd.args(args)
        .arg("--seed")
        .arg(seed.to_string())
        .arg("--workers")
        .arg(workers.to_string())
        .arg("--out")
        .arg(out);
    for o in overrides {
        cmd.arg("--set").arg(o);
    }
    let result = cmd.output()?;
    if !result.status.success() {
        bail!("partseg {args:?} failed: {}", String::from_utf8_lossy(&result.stderr));
    }
    Ok(())
}

/// gen-data, train, eval, finetune, eval against the first evaluation.
fn pipeline(root: &Path, seed: u64, workers: usize) -> Result<()> {
    let cfg = configs();
    let gen = cfg.join("desk_gen.json");
    let train = cfg.join("desk_train.json");
    let data = root.join("data");
    let manifest = data.join("manifest.json");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    partseg(&["gen-data", "--config", &s(&gen)], seed, workers, &data, &SMALL)?;
    partseg(
        &["train", "--config", &s(&train), "--manifest", &s(&manifest)],
        seed,
        workers,
        &root.join("train"),
        &SHORT,
    )?;
    let trained = s(&root.join("train/latest.ckpt"));
    partseg(
        &["eval", "--checkpoint", &trained, "--manifest", &s(&manifest)],
        seed,
        workers,
        &root.join("eval"),
        &[],
    )?;
    partseg(
        &[
            "finetune",
            "--config",
            &s(&train),
            "--checkpoint",
            &trained,
            "--manifest",
            &s(&manifest),
        ],
        seed,
        workers,
        &root.join("finetune"),
        &SHORT,
    )?;
    partseg(
        &[
            "eval",
            "--checkpoint",
            &s(&root.join("finetune/latest.ckpt")),
            "--manifest",
            &s(&manifest),
            "--reference",
            &s(&root.join("eval/per_case.csv")),
        ],
        seed,
        workers,
        &root.join("eval_finetune"),
        &[],
    )
}

fn files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Training logs carry wall-clock seconds in the last column.
fn without_timing(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    pipeline(&a, 7, 1)?;
    pipeline(&b, 7, 3)?;
    pipeline(&c, 8, 1)?;

    let listing = files(&a)?;
    ensure!(listing == files(&b)?, "runs wrote different file sets");
    let (mut identical, mut mismatched) = (0, Vec::new());
    for rel in &listing {
        let name = rel.file_name().unwrap().to_string_lossy();
        if name == "resolved_config.json" {
            // records the worker count and output paths
            continue;
        }
        let (x, y) = (std::fs::read(a.join(rel))?, std::fs::read(b.join(rel))?);
        let same = if name == "train_log.csv" {
            without_timing(&x) == without_timing(&y)
        } else {
            x == y
        };
        if same {
            identical += 1;
        } else {
            mismatched.push(rel.display().to_string());
        }
    }
    let checkpoints = listing
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .count();
    let reports = listing
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .count();
    let seed_matters = std::fs::read(a.join("train/latest.ckpt"))? != std::fs::read(c.join("train/latest.ckpt"))?;
    Ok(Outcome::new(
        mismatched.is_empty() && checkpoints >= 4 && reports >= 8 && seed_matters,
        format!(
            "workers 1 vs 3: {identical} files identical ({checkpoints} checkpoints, {reports} CSVs), mismatched {mismatched:?}; another seed changes the checkpoint: {seed_matters}"
        ),
    ))
}
