use std::fs;
use std::path::{Path, PathBuf};

use adseg::config::{parse_config, TaskConfig};
use adseg::data::{load_split_with, make_synthetic, write_split};
use adseg::eval::{evaluate, metrics_csv, metrics_jsonl, predict_volume, MetricReport};
use adseg::network::DiffVNet;
use adseg::trainer::{drs_csv, fit, log_csv, TrainState};
use adseg::{argmax_decode, DatasetSplit};
use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Generate a synthetic multi-domain dataset with train/test manifests.
    Synth,
    /// Train on the `manifest` split and write a log and checkpoint.
    Train,
    /// Evaluate a checkpoint on the `test_manifest` split.
    Eval,
}

#[derive(Debug, Parser)]
#[command(name = "adseg", version, about = "Semi-supervised volumetric segmentation")]
struct Cli {
    command: Command,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(cfg: &TaskConfig, out: &Path) -> Result<()> {
    let data = make_synthetic(&cfg.synthetic_spec()).context("synth")?;
    let train = write_split(out, "train.manifest", &data.split, None).context("synth")?;
    println!("wrote {}", train.display());
    if !data.test.is_empty() {
        let test = DatasetSplit::new(data.test, Vec::new(), Some(data.test_domains), Some(Vec::new()))?;
        let path = write_split(out, "test.manifest", &test, None).context("synth")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn train(cfg: &TaskConfig, out: &Path) -> Result<()> {
    let Some(manifest) = &cfg.manifest else {
        bail!("train: no manifest configured (set manifest=PATH)");
    };
    let split = load_split_with(manifest, cfg.preprocess, cfg.stack_depth).context("train: loading data")?;
    let mut state = TrainState::new(cfg).context("train")?;
    let outcome = fit(&mut state, &split).context("train")?;
    write(&out.join("train_log.csv"), &log_csv(&outcome.log))?;
    if cfg.log_drs_weights {
        write(&out.join("drs_weights.csv"), &drs_csv(&state.drs_history))?;
    }
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint"));
    state.net.save(&ckpt, &cfg.render()).context("train: saving checkpoint")?;
    println!(
        "best labeled Dice {:.4} at iteration {}; checkpoint {}",
        outcome.best_score,
        outcome.best_iteration,
        ckpt.display()
    );
    Ok(())
}

fn eval(cfg: &TaskConfig, out: &Path) -> Result<()> {
    let Some(ckpt) = &cfg.checkpoint else {
        bail!("eval: no checkpoint configured (set checkpoint=DIR)");
    };
    let Some(manifest) = cfg.test_manifest.as_ref().or(cfg.manifest.as_ref()) else {
        bail!("eval: no test_manifest configured");
    };
    let net = DiffVNet::load(ckpt).context("eval: loading checkpoint")?;
    if net.config().num_classes != cfg.num_classes {
        bail!(
            "eval: checkpoint has {} classes, config expects {}",
            net.config().num_classes,
            cfg.num_classes
        );
    }
    let split = load_split_with(manifest, cfg.preprocess, cfg.stack_depth).context("eval: loading data")?;
    let mut rows = Vec::new();
    for (i, (v, y)) in split.labeled.iter().enumerate() {
        let probs = predict_volume(&net, v, cfg.patch_size, cfg.overlap).context("eval")?;
        let report = evaluate(&argmax_decode(&probs)?, y, v.spacing()).context("eval")?;
        rows.push((format!("case{i:03}"), report));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.1.clone()).collect();
    let mean = MetricReport::average(&reports).context("eval")?;
    println!(
        "mean Dice {:.4}, Jaccard {:.4} over {} case(s); {} undefined surface entries",
        mean.mean.dice,
        mean.mean.jaccard,
        rows.len(),
        mean.undefined
    );
    rows.push(("mean".into(), mean));
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    write(&out.join("metrics.jsonl"), &metrics_jsonl(&rows))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = Vec::new();
    for kv in &cli.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects key=value, got {kv:?}");
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let cfg = parse_config(cli.config.as_deref(), &overrides).context("config")?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    write(&cli.out.join("config.resolved"), &cfg.render())?;
    match cli.command {
        Command::Synth => synth(&cfg, &cli.out),
        Command::Train => train(&cfg, &cli.out),
        Command::Eval => eval(&cfg, &cli.out),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("adseg: {e:#}");
        std::process::exit(1);
    }
}
