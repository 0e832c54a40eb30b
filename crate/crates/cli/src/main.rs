//! `partseg`: data generation, training, fine-tuning, inference, evaluation
//! and gradient checks from the command line.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use partseg::collection::{load_manifest, read_volume, write_volume, CollectionManifest, Split, Volume};
use partseg::eval::{aggregate, evaluate, read_per_case, write_report, GroupRule};
use partseg::ndnet::gradcheck::{run_suite, GradcheckOptions};
use partseg::ndnet::load_checkpoint;
use partseg::phantom::{generate_collection, GenConfig};
use partseg::trainer::{finetune, train, Model, Objective, RunOutput, TrainConfig, TrainOutcome};

#[derive(Parser, Debug)]
#[command(name = "partseg", version, about = "Partially labelled multi-dataset segmentation")]
struct Cli {
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Batch-building worker threads (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override as a dotted path, e.g. `--set net.stages=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom collection and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on every dataset of a manifest, or a softmax baseline on one.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Train the softmax baseline on this dataset id only.
        #[arg(long)]
        single_dataset: Option<u32>,
    },
    /// Fine-tune a pretrained backbone with fresh heads.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Segment one volume; writes one mask per class.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Also write the probability volumes (sigmoid checkpoints).
        #[arg(long)]
        probabilities: bool,
    },
    /// Score a checkpoint and write CSV reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::HeldOut)]
        split: SplitArg,
        /// `per_case.csv` of reference results for the difficult-class group.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive, loss and the composed network.
    Gradcheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    HeldOut,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::HeldOut => Split::HeldOut,
            SplitArg::All => Split::All,
        }
    }
}

/// Exit code 2 for bad input, 1 for everything else.
enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<partseg::Error> for Failure {
    fn from(e: partseg::Error) -> Self {
        use partseg::Error as E;
        match e {
            E::Io { .. }
            | E::Json { .. }
            | E::Manifest(_)
            | E::UnknownDataset(_)
            | E::Format(_)
            | E::Config(_)
            | E::Checkpoint(_) => Failure::Input(e.into()),
            _ => Failure::Internal(e.into()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn input<T>(r: anyhow::Result<T>) -> Outcome<T> {
    r.map_err(Failure::Input)
}

fn internal<T>(r: anyhow::Result<T>) -> Outcome<T> {
    r.map_err(Failure::Internal)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    internal(std::fs::create_dir_all(&cli.out).with_context(|| format!("{}: cannot create", cli.out.display())))?;
    match &cli.command {
        Command::GenData { config } => gen_data(cli, config.as_deref()),
        Command::Train {
            config,
            manifest,
            single_dataset,
        } => cmd_train(cli, config.as_deref(), manifest, *single_dataset),
        Command::Finetune {
            config,
            checkpoint,
            manifest,
        } => cmd_finetune(cli, config.as_deref(), checkpoint, manifest),
        Command::Predict {
            checkpoint,
            volume,
            probabilities,
        } => predict(cli, checkpoint, volume, *probabilities),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            reference,
        } => cmd_eval(cli, checkpoint, manifest, (*split).into(), reference.as_deref()),
        Command::Gradcheck => gradcheck(cli),
    }
}

fn write_resolved(cli: &Cli, command: &str, inputs: Value, config: Value) -> Outcome {
    let doc = json!({ "command": command, "inputs": inputs, "config": config });
    let path = cli.out.join("resolved_config.json");
    let text = serde_json::to_string_pretty(&doc).expect("JSON values serialize");
    internal(std::fs::write(&path, text + "\n").with_context(|| format!("{}: cannot write", path.display())))
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn open_manifest(path: &Path) -> Outcome<CollectionManifest> {
    if !path.exists() {
        return Err(Failure::Input(anyhow::anyhow!(
            "manifest not found: {}",
            path.display()
        )));
    }
    Ok(load_manifest(path)?)
}

fn train_config(cli: &Cli, file: Option<&Path>) -> Outcome<TrainConfig> {
    let mut cfg = input(config::resolve(&TrainConfig::desk(), file, &cli.overrides))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(cli: &Cli, file: Option<&Path>) -> Outcome {
    let mut cfg = input(config::resolve(&GenConfig::desk(), file, &cli.overrides))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    write_resolved(
        cli,
        "gen-data",
        json!({}),
        serde_json::to_value(&cfg).expect("config serializes"),
    )?;
    let m = generate_collection(&cfg, &cli.out)?;
    for d in &m.datasets {
        println!(
            "dataset {} {:<10} {:>3} cases, {} classes",
            d.dataset_id,
            d.name,
            d.case_count,
            d.classes.len()
        );
    }
    println!("wrote {}", cli.out.join("manifest.json").display());
    Ok(())
}

fn report_training(out: &TrainOutcome, dir: &Path) {
    for (e, loss) in out.log.epoch_means().iter().enumerate() {
        println!("epoch {e:>4}  mean loss {loss:>9.5}");
    }
    println!("{} steps, checkpoints in {}", out.steps, dir.display());
}

fn cmd_train(cli: &Cli, file: Option<&Path>, manifest: &Path, single: Option<u32>) -> Outcome {
    let mut m = open_manifest(manifest)?;
    let mut cfg = train_config(cli, file)?;
    if let Some(k) = single {
        m = m.select_datasets(&[k])?;
        cfg.objective = Objective::Softmax;
    }
    write_resolved(
        cli,
        "train",
        json!({ "manifest": path_value(manifest), "single_dataset": single }),
        serde_json::to_value(&cfg).expect("config serializes"),
    )?;
    let out = train(&m, &cfg, &RunOutput::to(&cli.out))?;
    report_training(&out, &cli.out);
    Ok(())
}

fn cmd_finetune(cli: &Cli, file: Option<&Path>, checkpoint: &Path, manifest: &Path) -> Outcome {
    let m = open_manifest(manifest)?;
    let mut cfg = train_config(cli, file)?;
    cfg.schedule.mode = partseg::sampling::ScheduleMode::Finetune;
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint)?;
    write_resolved(
        cli,
        "finetune",
        json!({ "manifest": path_value(manifest), "checkpoint": path_value(checkpoint) }),
        serde_json::to_value(&cfg).expect("config serializes"),
    )?;
    let out = finetune(&ck, &m, &cfg, &RunOutput::to(&cli.out))?;
    report_training(&out, &cli.out);
    Ok(())
}

fn predict(cli: &Cli, checkpoint: &Path, volume: &Path, probabilities: bool) -> Outcome {
    let model = Model::load(checkpoint)?;
    let vol = read_volume(volume)?;
    let spacing = vol.spacing;
    let image = vol.into_f32();
    write_resolved(
        cli,
        "predict",
        json!({ "checkpoint": path_value(checkpoint), "volume": path_value(volume), "probabilities": probabilities }),
        json!({ "overlap": model.overlap, "threshold": 0.5 }),
    )?;
    use partseg::trainer::Segmenter;
    let masks = model.segment(&image)?;
    let probs = if probabilities {
        Some(model.probabilities(&image)?)
    } else {
        None
    };
    for (j, (class, mask)) in model.classes.iter().zip(masks).enumerate() {
        let stem = format!("d{}_c{}", class.dataset_id, class.local_index);
        let path = cli.out.join(format!("{stem}_mask.mtvol"));
        println!(
            "{:<28} {:>8} voxels -> {}",
            class.name,
            mask.count_ones(),
            path.display()
        );
        write_volume(&Volume::u8(mask, spacing), &path)?;
        if let Some(p) = &probs {
            write_volume(
                &Volume::f32(p[j].clone(), spacing),
                cli.out.join(format!("{stem}_prob.mtvol")),
            )?;
        }
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, manifest: &Path, split: Split, reference: Option<&Path>) -> Outcome {
    let m = open_manifest(manifest)?;
    let model = Model::load(checkpoint)?;
    let reference = reference.map(read_per_case).transpose()?;
    // A single-dataset baseline only answers for its own classes.
    let covered: BTreeSet<(u32, u32)> = model.classes.iter().map(|c| c.key()).collect();
    let ids: Vec<u32> = m
        .datasets
        .iter()
        .filter(|d| d.classes.iter().all(|c| covered.contains(&c.key())))
        .map(|d| d.dataset_id)
        .collect();
    if ids.is_empty() {
        return Err(Failure::Input(anyhow::anyhow!(
            "{}: the checkpoint covers no dataset of {}",
            checkpoint.display(),
            manifest.display()
        )));
    }
    let m = if ids.len() == m.datasets.len() {
        m
    } else {
        m.select_datasets(&ids)?
    };
    write_resolved(
        cli,
        "eval",
        json!({ "checkpoint": path_value(checkpoint), "manifest": path_value(manifest), "datasets": ids }),
        json!({ "split": format!("{split:?}"), "threshold": 0.5, "overlap": model.overlap }),
    )?;

    let table = evaluate(&model, &m, split)?;
    let mut rules = vec![GroupRule::All, GroupRule::DatasetAverage];
    rules.extend(m.datasets.iter().map(|d| GroupRule::Dataset(d.dataset_id)));
    let tags: BTreeSet<&String> = m.global_classes.iter().flat_map(|c| &c.group_tags).collect();
    rules.extend(tags.into_iter().map(|t| GroupRule::Tag(t.clone())));
    if let Some(r) = reference {
        rules.push(GroupRule::difficult(r));
    }
    let groups = rules
        .iter()
        .map(|r| aggregate(&table, r))
        .collect::<partseg::Result<Vec<_>>>()?;
    write_report(&table, &groups, &cli.out)?;
    for c in table.class_means() {
        println!(
            "{:>2} {:<24} {:>7.2}  ({} cases)",
            c.class.dataset_id, c.class.name, c.mean_dice, c.n_cases
        );
    }
    for g in &groups {
        match g.mean_dice {
            Some(d) => println!("{:<27} {d:>7.2}  ({} classes)", g.group, g.n_classes),
            None => println!("{:<27} {:>7}  (0 classes)", g.group, "-"),
        }
    }
    Ok(())
}

fn gradcheck(cli: &Cli) -> Outcome {
    let opts = GradcheckOptions {
        seed: cli.seed.unwrap_or(0),
        ..GradcheckOptions::default()
    };
    write_resolved(
        cli,
        "gradcheck",
        json!({}),
        json!({ "step": opts.step, "tolerance": opts.tolerance, "floor": opts.floor, "block_floor": opts.block_floor, "seed": opts.seed }),
    )?;
    let report = run_suite(&opts)?;
    print!("{report}");
    let path = cli.out.join("gradcheck.txt");
    internal(std::fs::write(&path, report.to_string()).with_context(|| format!("{}: cannot write", path.display())))?;
    if !report.passed() {
        return Err(Failure::Internal(anyhow::anyhow!(
            "gradient check failed, see {}",
            path.display()
        )));
    }
    Ok(())
}
