//! Evaluation reports for one checkpoint, and side-by-side comparisons of two.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use caae_core::data::{bin_to_label, Image, Sample};
use caae_core::evaluation::{
    conditioning_score, ks_critical_value, reconstruction_error, texture_energy, z_uniformity, ConditioningReport,
    MIN_CONDITIONING_PROBES, MIN_UNIFORMITY_SAMPLES,
};
use caae_core::inference::{interpolate, manifold_grid};
use caae_core::networks::ModelParams;
use caae_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::error::{Error, Result};
use crate::imageio::save_raster;
use crate::run::latest_checkpoint;

/// Age bins treated as "old" for texture measurements.
pub const OLD_BINS: [usize; 3] = [7, 8, 9];
/// Probe pairs and frames used for the interpolation smoothness figure.
pub const MORPH_PAIRS: usize = 10;
pub const MORPH_STEPS: usize = 8;
/// Faces shown in comparison grids.
pub const GRID_FACES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformitySummary {
    pub mean_ks: f64,
    pub per_dim_ks: Vec<f64>,
    pub samples: usize,
    /// Single-dimension KS critical value at the 5% level.
    pub critical_5pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub step: u64,
    /// Parameters have never been updated, so any conditioning is accidental.
    pub untrained: bool,
    pub uniformity: UniformitySummary,
    pub conditioning: ConditioningReport,
    /// Mean total variation of outputs generated at the old-age bins.
    pub old_age_texture: f64,
    pub reconstruction_mse: f64,
    /// Mean per-frame RMS change along latent interpolations.
    pub interpolation_step_rms: f64,
}

/// Metrics that are compared between two reports.
fn headline(r: &EvalReport) -> [(&'static str, f64); 5] {
    [
        ("mean_ks", r.uniformity.mean_ks),
        ("conditioning_rho", r.conditioning.rho),
        ("old_age_texture", r.old_age_texture),
        ("reconstruction_mse", r.reconstruction_mse),
        ("interpolation_step_rms", r.interpolation_step_rms),
    ]
}

/// Evaluate `params` on labelled probes (their labels drive the reconstruction metric).
pub fn evaluate(params: &ModelParams, probes: &[Sample], checkpoint: &Path, step: u64, conditioning_probes: usize) -> Result<EvalReport> {
    if probes.len() < MIN_UNIFORMITY_SAMPLES {
        return Err(Error::invalid(format!("evaluation needs at least {MIN_UNIFORMITY_SAMPLES} probes, got {}", probes.len())));
    }
    if conditioning_probes < MIN_CONDITIONING_PROBES || conditioning_probes > probes.len() {
        return Err(Error::invalid(format!(
            "conditioning probes must be between {MIN_CONDITIONING_PROBES} and {}, got {conditioning_probes}",
            probes.len()
        )));
    }
    let images: Vec<Image> = probes.iter().map(|s| s.image.clone()).collect();
    let u = z_uniformity(params, &images)?;
    let cond_set = &images[..conditioning_probes];
    let conditioning = conditioning_score(params, cond_set)?;
    let old_age_texture = texture_energy(params, cond_set, &OLD_BINS)?;
    let reconstruction_mse = reconstruction_error(params, probes)?;
    let label = bin_to_label(4)?;
    let mut rms = 0.0;
    let pairs = MORPH_PAIRS.min(images.len() / 2);
    for k in 0..pairs {
        rms += interpolate(params, &images[2 * k], &images[2 * k + 1], label, MORPH_STEPS)?.step_rms();
    }
    Ok(EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        step,
        untrained: step == 0,
        uniformity: UniformitySummary {
            mean_ks: u.mean_ks,
            critical_5pct: ks_critical_value(u.samples, 0.05),
            per_dim_ks: u.per_dim_ks,
            samples: u.samples,
        },
        conditioning,
        old_age_texture,
        reconstruction_mse,
        interpolation_step_rms: rms / pairs as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: EvalReport,
    pub b: EvalReport,
    /// `b − a` for each headline metric.
    pub deltas: Vec<(String, f64)>,
}

impl Comparison {
    pub fn new(a: EvalReport, b: EvalReport) -> Self {
        let deltas = headline(&a).iter().zip(headline(&b)).map(|((k, x), (_, y))| (k.to_string(), y - x)).collect();
        Self { a, b, deltas }
    }
}

pub fn report_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint  {} (step {})", r.checkpoint.display(), r.step);
    if r.untrained {
        let _ = writeln!(s, "note        untrained parameters; conditioning is expected to be absent");
    }
    for (k, v) in headline(r) {
        let _ = writeln!(s, "{k:<24}{v:>14.6}");
    }
    let _ = writeln!(s, "{:<24}{:>14.6}", "ks_critical_5pct", r.uniformity.critical_5pct);
    let _ = writeln!(s, "{:<24}{:>14}", "conditioning_significant", r.conditioning.significant());
    if r.conditioning.degenerate {
        let _ = writeln!(s, "{:<24}{:>14}", "conditioning_degenerate", true);
    }
    let means: Vec<String> = r.conditioning.bin_means.iter().map(|m| format!("{m:.2}")).collect();
    let _ = writeln!(s, "{:<24}{}", "wrinkles_by_bin", means.join(" "));
    s
}

pub fn comparison_table(c: &Comparison) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "A: {} (step {})", c.a.checkpoint.display(), c.a.step);
    let _ = writeln!(s, "B: {} (step {})", c.b.checkpoint.display(), c.b.step);
    let _ = writeln!(s, "{:<24}{:>14}{:>14}{:>14}", "metric", "A", "B", "B - A");
    for (((k, a), (_, b)), (_, d)) in headline(&c.a).iter().zip(headline(&c.b)).zip(&c.deltas) {
        let _ = writeln!(s, "{k:<24}{a:>14.6}{b:>14.6}{d:>14.6}");
    }
    s
}

/// Checkpoint file for `path`, which may be a checkpoint or a run directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        latest_checkpoint(path)
    } else {
        Ok(path.to_path_buf())
    }
}

/// Settings two compared models must share: everything except the ablation switches
/// and checkpoint cadence.
pub fn comparison_conflicts(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let strip = |c: &TrainConfig| {
        let mut v = serde_json::to_value(c).expect("config serializes");
        let obj = v.as_object_mut().expect("struct");
        for k in ["ablate_dz", "ablate_dimg", "checkpoint_every"] {
            obj.remove(k);
        }
        v
    };
    let (x, y) = (strip(a), strip(b));
    let (x, y) = (x.as_object().expect("struct"), y.as_object().expect("struct"));
    x.iter().filter(|(k, v)| y.get(*k) != Some(v)).map(|(k, v)| format!("{k}: A has {v}, B has {}", y[k])).collect()
}

/// Evaluate two runs (or checkpoints) on the same probes and write
/// `comparison.json`, `comparison.txt` and `grids.png` into `out_dir`.
pub fn ablation_compare(run_a: &Path, run_b: &Path, probes: &[Sample], conditioning_probes: usize, out_dir: &Path) -> Result<Comparison> {
    let (pa, pb) = (resolve_checkpoint(run_a)?, resolve_checkpoint(run_b)?);
    let (sa, ca) = load_checkpoint(&pa, None)?;
    let (sb, cb) = load_checkpoint(&pb, None)?;
    let conflicts = comparison_conflicts(&ca, &cb);
    if !conflicts.is_empty() {
        return Err(Error::Validation(conflicts));
    }
    let a = evaluate(&sa.params, probes, &pa, sa.step, conditioning_probes)?;
    let b = evaluate(&sb.params, probes, &pb, sb.step, conditioning_probes)?;
    let cmp = Comparison::new(a, b);
    write_json(&out_dir.join("comparison.json"), &cmp)?;
    write_text(&out_dir.join("comparison.txt"), &comparison_table(&cmp))?;
    let faces: Vec<Image> = probes.iter().take(GRID_FACES).map(|s| s.image.clone()).collect();
    let ga = manifold_grid(&sa.params, &faces)?;
    let gb = manifold_grid(&sb.params, &faces)?;
    save_raster(&side_by_side(&ga, &gb), &out_dir.join("grids.png"))?;
    Ok(cmp)
}

/// Two equally tall rasters joined horizontally with a black gutter.
pub fn side_by_side(a: &caae_core::data::Raster, b: &caae_core::data::Raster) -> caae_core::data::Raster {
    let gutter = 8;
    let c = a.channels;
    let h = a.height.max(b.height);
    let mut out = caae_core::data::Raster::new(h, a.width + gutter + b.width, c);
    for (img, left) in [(a, 0), (b, a.width + gutter)] {
        for y in 0..img.height {
            let dst = (y * out.width + left) * c;
            out.data[dst..dst + img.width * c].copy_from_slice(&img.data[y * img.width * c..(y + 1) * img.width * c]);
        }
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    use crate::error::IoContext;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, text).at(path)
}
