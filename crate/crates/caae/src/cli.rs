//! Command-line surface. Each subcommand is a thin wrapper that validates its inputs,
//! computes everything in memory, and only then writes artifacts.

use std::path::{Path, PathBuf};

use caae_core::data::{bin_to_label, synth_faces, AgeLabel, Image, Sample, NUM_AGE_BINS};
use caae_core::evaluation::{gradcheck_all_terms, Coverage, MIN_CONDITIONING_PROBES};
use caae_core::inference::{age_sweep, interpolate, manifold_grid, tile};
use caae_core::networks::{ModelParams, NetworkConfig};
use caae_core::objectives::LossReport;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{RunConfig, SEED_ENV};
use crate::error::{Error, Result};
use crate::eval::{ablation_compare, comparison_table, evaluate, report_table, write_json, write_text};
use crate::imageio::{load_image, save_image, save_raster, with_channels};
use crate::manifest::{load_manifest, write_manifest, Split};
use crate::run::{train_run, TrainOptions};

/// Gradchecks pass when every relative error is below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "caae", version, about = "Conditional adversarial autoencoder for face age progression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedurally generated faces and a JSON-lines manifest.
    Synth(SynthArgs),
    /// Train a model; the run directory receives config.json, log.csv and checkpoints/.
    Train(TrainArgs),
    /// Render one face at all ten age bins.
    Sweep(SweepArgs),
    /// Morph between two faces in latent space at a fixed age.
    Interp(InterpArgs),
    /// Age sweeps of several faces as one grid image.
    Grid(GridArgs),
    /// Evaluate a checkpoint, or compare two, on a probe manifest.
    Eval(EvalArgs),
    /// Compare analytic gradients of every loss term with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of faces.
    #[arg(long)]
    pub count: usize,
    /// Side length in pixels (multiple of 16).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives images/ and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Train without the latent discriminator.
    #[arg(long)]
    pub no_dz: bool,
    /// Train without the image discriminator.
    #[arg(long)]
    pub no_dimg: bool,
    /// Continue from this checkpoint of the same run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Run directory, overriding the config's out_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace a non-empty run directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Face to age; no age label is needed.
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory for frame_00.png … frame_09.png and strip.png.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub img1: PathBuf,
    #[arg(long)]
    pub img2: PathBuf,
    /// Age bin (0-9) held fixed along the morph.
    #[arg(long)]
    pub label: usize,
    /// Number of frames, endpoints included.
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Output directory for frame_NN.png and strip.png.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Faces, one grid row each.
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file or run directory (latest checkpoint).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Second checkpoint or run directory to compare against.
    #[arg(long, value_name = "CKPT2")]
    pub compare: Option<PathBuf>,
    /// Probe manifest; its eval split is used when present, otherwise every record.
    #[arg(long)]
    pub probes: PathBuf,
    /// Probes used for the conditioning and texture metrics.
    #[arg(long, default_value_t = MIN_CONDITIONING_PROBES)]
    pub conditioning_probes: usize,
    /// Output directory for the JSON and text reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Image side length of the miniature model.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    /// Latent dimension.
    #[arg(long, default_value_t = 4)]
    pub latent: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub base_filters: usize,
    /// Finite-difference step, between 1e-6 and 1e-4.
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Check every parameter instead of a sample.
    #[arg(long)]
    pub full: bool,
    /// Parameters sampled per group when not --full.
    #[arg(long, default_value_t = 100)]
    pub per_group: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Interp(a) => interp(&a),
        Command::Grid(a) => grid(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::invalid("--count must be positive"));
    }
    let faces = synth_faces(a.count, a.size, a.seed)?;
    let mut entries = Vec::with_capacity(faces.len());
    for (i, (img, age)) in faces.iter().enumerate() {
        let rel = format!("images/face_{i:05}.png");
        save_image(img, &a.out.join(&rel))?;
        entries.push((rel, *age, Split::Train));
    }
    write_manifest(&a.out.join("manifest.jsonl"), &entries)?;
    println!("wrote {} faces to {}", faces.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    cfg.ablate_dz |= a.no_dz;
    cfg.ablate_dimg |= a.no_dimg;
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    let opts = TrainOptions { overwrite: a.overwrite, resume: a.resume.clone() };
    let mut pending: Option<(u64, u64, LossReport)> = None;
    let outcome = train_run(&cfg, &opts, |info, report| {
        // Report the last step of each epoch.
        if let Some((epoch, step, r)) = pending.filter(|p| p.0 != info.epoch) {
            eprintln!("epoch {epoch} step {step}/{}: {}", info.total_steps, summary(&r));
        }
        pending = Some((info.epoch, info.step, *report));
    })?;
    match outcome.last_report {
        Some(r) => println!("final (step {}): {}", outcome.state.step, summary(&r)),
        None => println!("nothing left to train at step {}", outcome.state.step),
    }
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn summary(r: &LossReport) -> String {
    LossReport::COLUMNS.iter().zip(r.values()).map(|(k, v)| format!("{k}={v:.5}")).collect::<Vec<_>>().join(" ")
}

fn model(ckpt: &Path) -> Result<(ModelParams, NetworkConfig)> {
    let (state, cfg) = load_checkpoint(ckpt, None)?;
    Ok((state.params, cfg.network))
}

fn input(path: &Path, net: &NetworkConfig) -> Result<Image> {
    load_image(path, net.image_size, net.channels)
}

fn write_frames(frames: &[Image], out: &Path) -> Result<()> {
    let strip = tile(frames, frames.len())?;
    for (i, f) in frames.iter().enumerate() {
        save_image(f, &out.join(format!("frame_{i:02}.png")))?;
    }
    save_raster(&strip, &out.join("strip.png"))
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let (params, net) = model(&a.ckpt)?;
    let result = age_sweep(&params, &input(&a.image, &net)?)?;
    debug_assert_eq!(result.outputs.len(), NUM_AGE_BINS);
    write_frames(&result.outputs, &a.out)
}

fn interp(a: &InterpArgs) -> Result<()> {
    let label = bin_to_label(a.label)?;
    let (params, net) = model(&a.ckpt)?;
    let morph = interpolate(&params, &input(&a.img1, &net)?, &input(&a.img2, &net)?, label, a.steps)?;
    write_frames(&morph.frames, &a.out)?;
    println!("mean step rms: {:.6}", morph.step_rms());
    Ok(())
}

fn grid(a: &GridArgs) -> Result<()> {
    let (params, net) = model(&a.ckpt)?;
    let faces = a.images.iter().map(|p| input(p, &net)).collect::<Result<Vec<_>>>()?;
    save_raster(&manifold_grid(&params, &faces)?, &a.out)
}

/// Labelled probes from a manifest, preferring its eval split.
pub fn load_probes(manifest: &Path, net: &NetworkConfig) -> Result<Vec<Sample>> {
    let records = load_manifest(manifest)?;
    let has_eval = records.iter().any(|r| r.split == Split::Eval);
    records
        .iter()
        .filter(|r| !has_eval || r.split == Split::Eval)
        .map(|r| Ok(Sample { image: load_image(&r.image_path, net.image_size, net.channels)?, label: AgeLabel::from_age(r.age_years)? }))
        .collect()
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = crate::eval::resolve_checkpoint(&a.ckpt)?;
    let (state, cfg) = load_checkpoint(&ckpt, None)?;
    let probes = load_probes(&a.probes, &cfg.network)?;
    match &a.compare {
        Some(other) => {
            let cmp = ablation_compare(&ckpt, other, &probes, a.conditioning_probes, &a.out)?;
            print!("{}", comparison_table(&cmp));
        }
        None => {
            let report = evaluate(&state.params, &probes, &ckpt, state.step, a.conditioning_probes)?;
            let table = report_table(&report);
            write_json(&a.out.join("report.json"), &report)?;
            write_text(&a.out.join("report.txt"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let scales = (1..=16).rev().find(|&k| a.size % (1 << k) == 0 && a.size >> k >= 4).unwrap_or(1);
    let net = NetworkConfig {
        image_size: a.size,
        channels: a.channels,
        latent_dim: a.latent,
        base_filters: a.base_filters,
        num_scales: scales,
        use_batchnorm_dimg: true,
    };
    net.validate()?;
    let coverage = if a.full { Coverage::Full } else { Coverage::Sample { per_group: a.per_group, seed: a.seed } };
    let report = gradcheck_all_terms(&net, a.seed, a.epsilon, coverage)?;
    println!("{:<10}{:<6}{:>9}{:>14}  worst", "term", "block", "checked", "max rel err");
    for g in &report.groups {
        println!("{:<10}{:<6}{:>9}{:>14.3e}  {}", g.term.name(), g.block.name(), g.checked, g.max_rel_error, g.worst_param);
    }
    let worst = report.max_rel_error();
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Error::invalid(format!("gradcheck failed: max relative error {worst:.3e}")))
    }
}

/// Faces replicated to the configured channel count (used by tests and tooling).
pub fn synth_probes(count: usize, net: &NetworkConfig, seed: u64) -> Result<Vec<Sample>> {
    synth_faces(count, net.image_size, seed)?
        .into_iter()
        .map(|(img, age)| Ok(Sample { image: with_channels(&img, net.channels), label: AgeLabel::from_age(age)? }))
        .collect()
}
