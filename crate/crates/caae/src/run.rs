//! Run directories: `config.json`, `log.csv` and `checkpoints/`, plus the training driver
//! that fills them.

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use caae_core::data::{synth_faces, AgeLabel, Sample};
use caae_core::objectives::LossReport;
use caae_core::trainer::{train_samples, StepInfo, TrainConfig, TrainState};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::imageio::{load_image, with_channels};
use crate::manifest::{load_manifest, Split};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn log_header() -> Vec<&'static str> {
    let mut h = vec!["step", "epoch"];
    h.extend(LossReport::COLUMNS);
    h.push("wall_time");
    h
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.ckpt"))
}

/// The checkpoint with the highest step in `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::invalid(format!("{} holds no checkpoints", dir.display())))
}

/// Training samples named by the configuration: the manifest's train split, or
/// synthetic faces.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    if let Some(manifest) = &cfg.manifest {
        let mut samples = Vec::new();
        let mut errors = Vec::new();
        for rec in load_manifest(manifest)?.into_iter().filter(|r| r.split == Split::Train) {
            match load_image(&rec.image_path, cfg.image_size, cfg.channels) {
                Ok(image) => samples.push(Sample { image, label: AgeLabel::from_age(rec.age_years)? }),
                Err(e @ Error::Validation(_)) => errors.push(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Validation(errors));
        }
        if samples.is_empty() {
            return Err(Error::invalid(format!("{} has no train records", manifest.display())));
        }
        return Ok(samples);
    }
    let count = cfg.synth_count.ok_or_else(|| Error::invalid("no dataset configured"))?;
    synth_faces(count, cfg.image_size, cfg.synth_seed)?
        .into_iter()
        .map(|(img, age)| Ok(Sample { image: with_channels(&img, cfg.channels), label: AgeLabel::from_age(age)? }))
        .collect()
}

/// Settings that must agree between a checkpoint and the run resuming it.
fn resume_conflicts(saved: &TrainConfig, current: &TrainConfig) -> Vec<String> {
    let strip = |c: &TrainConfig| {
        let mut v = serde_json::to_value(c).expect("config serializes");
        let obj = v.as_object_mut().expect("struct");
        obj.remove("epochs");
        obj.remove("checkpoint_every");
        v
    };
    let (a, b) = (strip(saved), strip(current));
    let (a, b) = (a.as_object().expect("struct"), b.as_object().expect("struct"));
    b.iter()
        .filter(|(k, v)| a.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint has {}, config has {v}", a[k]))
        .collect()
}

/// Keep the header and the rows up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).at(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || row_step.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).at(path)
}

/// What a training invocation produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub last_report: Option<LossReport>,
    pub final_checkpoint: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Replace an existing run directory.
    pub overwrite: bool,
    /// Continue from this checkpoint inside the (existing) run directory.
    pub resume: Option<PathBuf>,
}

/// Train according to `cfg`, writing the run directory as it goes.
pub fn train_run<P>(cfg: &RunConfig, opts: &TrainOptions, mut progress: P) -> Result<TrainOutcome>
where
    P: FnMut(&StepInfo, &LossReport),
{
    cfg.validate()?;
    let train_cfg = cfg.train_config();
    let dir = &cfg.out_dir;
    let log_path = dir.join(LOG_FILE);

    let state = match &opts.resume {
        Some(ckpt) => {
            let (state, saved) = load_checkpoint(ckpt, Some(&train_cfg.network))?;
            let conflicts = resume_conflicts(&saved, &train_cfg);
            if !conflicts.is_empty() {
                return Err(Error::Validation(conflicts));
            }
            if log_path.exists() {
                truncate_log(&log_path, state.step)?;
            }
            state
        }
        None => {
            if dir.exists() && fs::read_dir(dir).at(dir)?.next().is_some() {
                if !opts.overwrite {
                    return Err(Error::Exists { path: dir.clone() });
                }
                fs::remove_dir_all(dir).at(dir)?;
            }
            TrainState::new(&train_cfg)?
        }
    };
    let samples = load_samples(cfg)?;

    fs::create_dir_all(dir.join(CHECKPOINT_DIR)).at(dir)?;
    let config_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(dir.join(CONFIG_FILE), config_json + "\n").at(dir)?;
    let fresh_log = !log_path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(&log_path).at(&log_path)?;
    let mut log = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::Io { path: log_path.clone(), source: e.into() };
    if fresh_log {
        log.write_record(log_header()).map_err(csv_err)?;
    }

    let start = Instant::now();
    let mut last_report = None;
    let mut last_saved = None;
    let mut failure = None;
    let state = train_samples(state, &samples, &train_cfg, |info, state, report| {
        let mut row = vec![info.step.to_string(), info.epoch.to_string()];
        row.extend(report.values().iter().map(|v| v.to_string()));
        row.push(format!("{:.3}", start.elapsed().as_secs_f64()));
        let mut written = log.write_record(&row).and_then(|_| log.flush().map_err(csv::Error::from)).map_err(csv_err);
        if written.is_ok() && train_cfg.checkpoint_every > 0 && info.step % train_cfg.checkpoint_every == 0 {
            written = save_checkpoint(state, &train_cfg, &checkpoint_path(dir, info.step));
            last_saved = Some(info.step);
        }
        last_report = Some(*report);
        progress(info, report);
        match written {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_checkpoint = checkpoint_path(dir, state.step);
    if last_saved != Some(state.step) {
        save_checkpoint(&state, &train_cfg, &final_checkpoint)?;
    }
    Ok(TrainOutcome { state, last_report, final_checkpoint })
}

/// Parsed `log.csv` rows without the wall-clock column.
pub fn read_log(run_dir: &Path) -> Result<Vec<Vec<String>>> {
    let path = run_dir.join(LOG_FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::Io { path: path.clone(), source: e.into() })?;
    let wall = log_header().len() - 1;
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Io { path: path.clone(), source: e.into() })?;
            Ok(r.iter().take(wall).map(str::to_string).collect())
        })
        .collect()
}
