use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sgsln_core::backbone::Model;
use sgsln_core::config::RunConfig;
use sgsln_core::data::{read_dataset, read_rgb, write_mask, Image, Scenario, SceneSpec};
use sgsln_core::gradsuite::{self, SUITE_TOLERANCE};
use sgsln_core::run::{self, CHECKPOINT_FILE, LOG_FILE};
use sgsln_core::train::{evaluate, Checkpoint};
use sgsln_core::Tensor;

/// Bitemporal change detection: synthetic data, training, evaluation and inference.
#[derive(Parser)]
#[command(name = "sgsln", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the A/B/label layout.
    Synth {
        /// iccd, svbcd or mvbcd.
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        n: usize,
        /// Square canvas side, divisible by 32.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parallax coefficient for mvbcd.
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes best.ckpt, log.csv and config.txt into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training set; generated from the config's data keys when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation set; the training set when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print precision, recall, F1 and IoU of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Write the change mask of an image pair as a {0,255} PNG.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the two half-resolution branch masks next to --out.
        #[arg(long)]
        branches: bool,
    },
    /// Print the parameter table, total and operation counts.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input side for the operation counts.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.to_model().with_context(|| format!("{}: cannot rebuild the model", path.display()))
}

fn to_tensor(img: &Image) -> Result<Tensor<f32>> {
    Ok(Tensor::new([1, img.channels, img.height, img.width], img.data.clone())?)
}

fn to_image(t: &Tensor<f32>) -> Image {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let mut img = Image::new(1, h, w);
    img.data.copy_from_slice(&t.data()[..h * w]);
    img
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    out.with_file_name(format!("{stem}_{suffix}.png"))
}

fn synth(scenario: Scenario, n: usize, size: usize, seed: u64, kappa: Option<f64>, out: &Path, force: bool) -> Result<()> {
    let mut spec = SceneSpec::with_size(size);
    if let Some(k) = kappa {
        spec.kappa = k;
    }
    let written = run::synth(out, scenario, n, seed, &spec, force)?;
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn train(config: Option<&Path>, data: Option<&Path>, val: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let train_set = match data {
        Some(d) => read_dataset(d)?,
        None => run::config_dataset(&cfg)?,
    };
    let val_set = match val {
        Some(v) => read_dataset(v)?,
        None => train_set.clone(),
    };
    eprintln!(
        "training {} on {} samples, validating on {}",
        cfg.variant,
        train_set.len(),
        val_set.len()
    );
    let outcome = run::train_run(&cfg, &train_set, &val_set, out, &mut |log| {
        let val = log.val.map_or("warm-up".to_string(), |m| format!("f1 {:.4}", m.f1));
        eprintln!("epoch {:>4}  loss {:.5}  {val}  lr {:e}", log.epoch, log.loss, log.lr);
    })?;
    match outcome.best_epoch {
        Some(e) => println!("best epoch {e}, {} steps", outcome.steps),
        None => println!("no validation ran, {} steps", outcome.steps),
    }
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    println!("wrote {}", out.join(LOG_FILE).display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, batch: usize) -> Result<()> {
    let model = load_model(ckpt)?;
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        bail!("{}: no samples", data.display());
    }
    println!("{}", evaluate(&model, &samples, batch)?.metrics());
    Ok(())
}

fn predict(ckpt: &Path, a: &Path, b: &Path, out: &Path, branches: bool) -> Result<()> {
    let model = load_model(ckpt)?;
    if branches && !model.config.variant.has_branches() {
        bail!("variant {} has no branch masks", model.config.variant);
    }
    let (t1, t2) = (to_tensor(&read_rgb(a)?)?, to_tensor(&read_rgb(b)?)?);
    let (fusion, m1, m2) = model.predict(&t1, &t2)?;
    write_mask(&to_image(&fusion), out)?;
    println!("wrote {}", out.display());
    if branches {
        for (mask, suffix) in [(m1, "t1"), (m2, "t2")] {
            let path = sibling(out, suffix);
            write_mask(&to_image(&mask.context("branch mask missing")?), &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn inspect(config: Option<&Path>, size: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let model = Model::new(cfg.model_config())?;
    println!("{:<32} {:>12}", "module", "parameters");
    for (name, count) in model.param_table() {
        println!("{name:<32} {count:>12}");
    }
    let total = model.count_params();
    println!("{:<32} {:>12}", "total", total);
    println!("{:<32} {:>12.3}", "total (M)", total as f64 / 1e6);
    let (flops, macs) = model.estimate_flops(size, size)?;
    println!("{:<32} {:>12.3}", format!("FLOPs at {size}x{size} (G)"), flops as f64 / 1e9);
    println!("{:<32} {:>12.3}", format!("MACs at {size}x{size} (G)"), macs as f64 / 1e9);
    Ok(())
}

fn gradcheck() -> Result<()> {
    let entries = gradsuite::run_with(&mut |e| {
        let verdict = if e.passed() { "pass" } else { "FAIL" };
        println!("{verdict}  {:.3e}  {:>5}  {}", e.report.max_rel_error, e.report.checked, e.name);
    })?;
    let failed = entries.iter().filter(|e| !e.passed()).count();
    println!("{} checks, {failed} above {SUITE_TOLERANCE:e}", entries.len());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth {
            scenario,
            n,
            size,
            seed,
            kappa,
            out,
            force,
        } => synth(*scenario, *n, *size, *seed, *kappa, out, *force),
        Command::Train { config, data, val, out } => train(config.as_deref(), data.as_deref(), val.as_deref(), out),
        Command::Eval { ckpt, data, batch } => eval(ckpt, data, *batch),
        Command::Predict { ckpt, a, b, out, branches } => predict(ckpt, a, b, out, *branches),
        Command::Inspect { config, size } => inspect(config.as_deref(), *size),
        Command::Gradcheck => gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
