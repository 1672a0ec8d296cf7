//! File-level workflows behind the command-line tool: dataset generation and
//! a training run that writes its checkpoint, log and configuration echo.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::backbone::Model;
use crate::config::RunConfig;
use crate::data::{generate_set, write_dataset, SamplePair, Scenario, SceneSpec, GENERATOR_VERSION};
use crate::error::{io_err, Error, Result};
use crate::train::{train, Checkpoint, EpochLog, Observer, TrainOutcome, CSV_HEADER};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

fn is_empty_dir(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(true);
    }
    Ok(fs::read_dir(dir).map_err(io_err(dir))?.next().is_none())
}

pub fn manifest(scenario: Scenario, n: usize, seed: u64, spec: &SceneSpec) -> String {
    format!(
        "scenario = {scenario}\nn = {n}\nsize = {}\nseed = {seed}\nkappa = {}\ngenerator_version = {GENERATOR_VERSION}\nspec = {spec:?}\n",
        spec.size, spec.kappa
    )
}

/// Generate `n` samples into `out` in the A/B/label layout plus a manifest.
/// A non-empty `out` is rejected unless `force`, which replaces the
/// dataset directories and manifest.
pub fn synth(out: &Path, scenario: Scenario, n: usize, seed: u64, spec: &SceneSpec, force: bool) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    if !is_empty_dir(out)? {
        if !force {
            return Err(Error::Data(format!("{} exists and is not empty (use --force to overwrite)", out.display())));
        }
        for d in ["A", "B", "label"] {
            let p = out.join(d);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    let samples = generate_set(spec, scenario, n, seed)?;
    let mut written = write_dataset(out, &samples)?;
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest(scenario, n, seed, spec)).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

/// The configuration's own dataset, used when no data directory is given.
pub fn config_dataset(cfg: &RunConfig) -> Result<Vec<SamplePair>> {
    generate_set(&cfg.scene_spec(), cfg.scenario, cfg.count, cfg.seed)
}

struct FileObserver<'a> {
    log: BufWriter<File>,
    log_path: PathBuf,
    ckpt: PathBuf,
    progress: &'a mut dyn FnMut(&EpochLog),
}

impl Observer for FileObserver<'_> {
    fn epoch(&mut self, log: &EpochLog) -> Result<()> {
        writeln!(self.log, "{}", log.csv_row())
            .and_then(|_| self.log.flush())
            .map_err(io_err(&self.log_path))?;
        (self.progress)(log);
        Ok(())
    }

    fn improved(&mut self, model: &Model, _log: &EpochLog) -> Result<()> {
        Checkpoint::from_model(model).save(&self.ckpt)
    }
}

/// Train a fresh model from `cfg`, writing into `out`: the full
/// configuration echo, the initial checkpoint (replaced on every validation
/// improvement and finally by the best model) and the per-epoch CSV log.
pub fn train_run(
    cfg: &RunConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    out: &Path,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.render()).map_err(io_err(&config_path))?;

    let model = Model::new(cfg.model_config())?;
    let ckpt = out.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&model).save(&ckpt)?;

    let log_path = out.join(LOG_FILE);
    let file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{CSV_HEADER}").and_then(|_| log.flush()).map_err(io_err(&log_path))?;

    let mut observer = FileObserver {
        log,
        log_path,
        ckpt: ckpt.clone(),
        progress,
    };
    let outcome = train(model, &cfg.train_config(), train_set, val_set, &mut observer)?;
    Checkpoint::from_model(&outcome.best).save(&ckpt)?;
    Ok(outcome)
}
