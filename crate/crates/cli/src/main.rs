//! `attnet`: dataset generation, training, loss-weight search and evaluation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnet_core::attention::{export_mask, mask_stem};
use attnet_core::data::{build_dataset, in_split, read_dataset, split_histogram, write_dataset, Sample, Split, NUM_GRADES};
use attnet_core::metrics::write_predictions;
use attnet_core::par::Execution;
use attnet_core::report::evaluate_model;
use attnet_core::train::{fit_with, grid_search_weights, predict, Flow};
use attnet_core::zoo::{build_model, BuiltModel, Fusion};
use attnet_core::{Error, ParamStore};
use clap::{Args, Parser, Subcommand};

use config::{output_dir, RunConfig};

#[derive(Parser)]
#[command(name = "attnet", version, about = "Attention-branch CNN experiments on synthetic joint images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gendata {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and export attention masks.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Search the first two branch loss weights.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage_list(problems: Vec<String>) -> Outcome {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("invalid configuration:\n  {}", problems.join("\n  "))))
    }
}

fn resolve(common: &Common, data: Option<&PathBuf>) -> Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(d) = data {
        cfg.data = d.clone();
    }
    let out = output_dir(&cfg.out);
    Ok((cfg, out))
}

/// Writes the resolved config into `out` before any work starts.
fn echo_config(cfg: &RunConfig, out: &Path) -> Outcome {
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())
        .map_err(|e| Failure::Runtime(format!("cannot write config into {}: {e}", out.display())))
}

fn load_data(cfg: &RunConfig) -> Result<Vec<Sample>, Failure> {
    if !cfg.data.is_dir() {
        return Err(Failure::Usage(format!("dataset directory {} not found", cfg.data.display())));
    }
    let (manifest, samples) = read_dataset(&cfg.data)?;
    if manifest.image_size != cfg.model.input {
        return Err(Failure::Usage(format!(
            "dataset images are {:?} but the model expects {:?}",
            manifest.image_size, cfg.model.input
        )));
    }
    Ok(samples)
}

fn print_histogram(samples: &[Sample]) {
    let h = split_histogram(samples);
    println!("{:<6}{}", "split", (0..NUM_GRADES).map(|g| format!("{:>6}", format!("g{g}"))).collect::<String>());
    for split in [Split::Train, Split::Val, Split::Test] {
        let row: String = h[split as usize].iter().map(|c| format!("{c:>6}")).collect();
        println!("{:<6}{row}", split.to_string());
    }
}

fn gendata(common: &Common) -> Outcome {
    let (mut cfg, out) = resolve(common, None)?;
    usage_list(cfg.dataset_problems())?;
    cfg.data = out.clone();
    echo_config(&cfg, &out)?;
    let samples = build_dataset(&cfg.dataset, Execution::Parallel)?;
    write_dataset(&out, &cfg.dataset, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    print_histogram(&samples);
    Ok(())
}

fn export_probes(model: &BuiltModel, probes: &[&Sample], epoch: usize, dir: &Path) -> Result<(), Error> {
    if probes.is_empty() {
        return Ok(());
    }
    let preds = predict(model, probes, probes.len(), true)?;
    for (b, branch) in model.branches().iter().enumerate() {
        for (i, s) in probes.iter().enumerate() {
            export_mask(&preds.masks[b], i, model.mask_scale(b), dir, &mask_stem(&branch.name, epoch, s.id))?;
        }
    }
    Ok(())
}

fn train(common: &Common, data: Option<&PathBuf>) -> Outcome {
    let (cfg, out) = resolve(common, data)?;
    usage_list(cfg.model_problems())?;
    let samples = load_data(&cfg)?;
    echo_config(&cfg, &out)?;
    let mut model = build_model(&cfg.model)?;
    print!("{}", model.summary());
    let probes: Vec<&Sample> = in_split(&samples, Split::Val).into_iter().take(cfg.export.probes).collect();
    let mask_dir = out.join("masks");
    let metrics = fit_with(&mut model, &samples, &cfg.train, |record, m| {
        println!(
            "epoch {:>3}  lr {:.1e}  train {:.4}  val {:.4}  val acc {}",
            record.epoch,
            record.lr,
            record.train_loss,
            record.val_loss,
            record.val_head_acc.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/")
        );
        export_probes(m, &probes, record.epoch, &mask_dir)?;
        Ok(Flow::Continue)
    })?;
    model.params.save(&out.join("checkpoint.bin"))?;
    metrics.write_csv(&out.join("metrics.csv"))?;
    metrics.write_summary(&out.join("summary.toml"))?;
    println!(
        "best epoch {} of {} (val loss {:.4}); checkpoint in {}",
        metrics.best_epoch,
        metrics.stop_epoch,
        metrics.best_val_loss,
        out.display()
    );
    Ok(())
}

fn gridsearch(common: &Common, data: Option<&PathBuf>) -> Outcome {
    let (cfg, out) = resolve(common, data)?;
    let mut problems = cfg.model_problems();
    if cfg.model.fusion != Fusion::MultiLoss || cfg.model.branches.len() < 2 {
        problems.push("model: grid search needs fusion = \"multi-loss\" with at least two branches".into());
    }
    if cfg.grid.w0.is_empty() || cfg.grid.w1.is_empty() {
        problems.push("grid: empty weight axis".into());
    }
    usage_list(problems)?;
    let samples = load_data(&cfg)?;
    echo_config(&cfg, &out)?;
    let result = grid_search_weights(&cfg.model, &samples, &cfg.train, &cfg.grid, Execution::Parallel)?;
    result.write_csv(&out.join("grid.csv"))?;
    let best = result.best_cell();
    std::fs::write(
        out.join("best.toml"),
        toml::to_string(best).map_err(|e| Failure::Runtime(e.to_string()))?,
    )
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{} cells; best w0 = {} w1 = {} (val loss {:.4})", result.cells.len(), best.w0, best.w1, best.val_loss);
    Ok(())
}

fn eval(common: &Common, data: Option<&PathBuf>, checkpoint: &Path) -> Outcome {
    let mut common = common.clone();
    if common.config.is_none() {
        let beside = checkpoint.with_file_name("config.toml");
        if beside.is_file() {
            common.config = Some(beside);
        }
    }
    let (cfg, out) = resolve(&common, data)?;
    usage_list(cfg.model_problems())?;
    if !checkpoint.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let samples = load_data(&cfg)?;
    let mut model = build_model(&cfg.model)?;
    let stored = ParamStore::load(checkpoint)?;
    model.params.assign_from(&stored).map_err(|e| match e {
        Error::CheckpointMismatch { .. } => Failure::Usage(format!("checkpoint does not fit the model: {e}")),
        other => Failure::Runtime(other.to_string()),
    })?;
    echo_config(&cfg, &out)?;
    let (report, rows) = evaluate_model(&model, &samples, cfg.train.batch_size)?;
    report.save(&out.join("report.toml"))?;
    write_predictions(&out.join("predictions.csv"), &rows)?;
    println!("{} parameters, {} test samples", report.parameters, report.test_samples);
    for h in &report.heads {
        println!("  {:<8} acc {:.3}  loss {:.4}  kappa {:.3} ({})", h.name, h.accuracy, h.loss, h.kappa, h.band);
    }
    if let Some(e) = &report.ensemble {
        println!("  {:<8} acc {:.3}  loss {:.4}  kappa {:.3} ({})", e.name, e.accuracy, e.loss, e.kappa, e.band);
    }
    println!("selected {}: accuracy {:.3}, kappa {:.3} ({})", report.selected, report.accuracy, report.kappa, report.band);
    for l in &report.localization {
        println!(
            "  {} localization {:.3} vs uniform {:.3} (x{:.2})",
            l.branch, l.mean_score, l.mean_baseline, l.ratio
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gendata { common } => gendata(common),
        Command::Train { common, data } => train(common, data.as_ref()),
        Command::Gridsearch { common, data } => gridsearch(common, data.as_ref()),
        Command::Eval { common, data, checkpoint } => eval(common, data.as_ref(), checkpoint),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
