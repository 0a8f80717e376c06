//! Quantitative checks: finite-difference gradient verification, latent uniformity,
//! the wrinkle-stripe age oracle, and age-conditioning strength.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, AgeLabel, Batch, Image, ImageBatch, NUM_AGE_BINS};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::networks::{self, Block, GroupGrads, LatentBatch, ModelParams};
use crate::objectives::{self, GeneratorLoss, LossWeights};
use crate::trainer::{self, EgTerms};

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const ABS_FALLBACK: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|)`, or `|a - n|` when both are below [`ABS_FALLBACK`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference check of `analytic` against `f` at `x`, over `indices`.
/// Returns the worst relative error and its index.
pub fn check_gradient<F>(f: F, x: &[f64], analytic: &[f64], indices: &[usize], epsilon: f64) -> (f64, usize)
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut worst = (0.0, indices.first().copied().unwrap_or(0));
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = f(&probe);
        probe[i] = orig - epsilon;
        let down = f(&probe);
        probe[i] = orig;
        let err = relative_error(analytic[i], (up - down) / (2.0 * epsilon));
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    worst
}

/// The loss terms whose parameter gradients can be checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Recon,
    Tv,
    /// Dz's discriminator loss.
    DzDisc,
    /// Dimg's discriminator loss.
    DimgDisc,
    /// Encoder's adversarial term against Dz.
    EncAdv,
    /// Generator's adversarial term against Dimg.
    GenAdv,
    /// Full weighted E/G objective.
    EgTotal,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] =
        [LossTerm::Recon, LossTerm::Tv, LossTerm::DzDisc, LossTerm::DimgDisc, LossTerm::EncAdv, LossTerm::GenAdv, LossTerm::EgTotal];

    /// Blocks whose parameters this term trains.
    pub fn blocks(self) -> &'static [Block] {
        match self {
            LossTerm::DzDisc => &[Block::LatentDisc],
            LossTerm::DimgDisc => &[Block::ImageDisc],
            LossTerm::EncAdv => &[Block::Encoder],
            _ => &[Block::Encoder, Block::Generator],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Recon => "recon",
            LossTerm::Tv => "tv",
            LossTerm::DzDisc => "dz_disc",
            LossTerm::DimgDisc => "dimg_disc",
            LossTerm::EncAdv => "e_adv",
            LossTerm::GenAdv => "g_adv",
            LossTerm::EgTotal => "eg_total",
        }
    }
}

/// A loss term evaluated on a fixed batch and fixed prior samples.
#[derive(Debug, Clone)]
pub struct TermObjective {
    pub term: LossTerm,
    pub batch: Batch,
    pub prior: LatentBatch,
    pub weights: LossWeights,
    pub form: GeneratorLoss,
}

impl TermObjective {
    fn eg_terms(&self) -> EgTerms {
        let (weights, use_dz, use_dimg) = match self.term {
            LossTerm::Recon => (LossWeights { lambda: 1.0, gamma: 0.0 }, false, false),
            LossTerm::Tv => (LossWeights { lambda: 0.0, gamma: 1.0 }, false, false),
            LossTerm::EncAdv => (LossWeights { lambda: 0.0, gamma: 0.0 }, true, false),
            LossTerm::GenAdv => (LossWeights { lambda: 0.0, gamma: 0.0 }, false, true),
            _ => (self.weights, true, true),
        };
        EgTerms { weights, form: self.form, use_dz, use_dimg }
    }

    /// Loss value and gradients for each block in [`LossTerm::blocks`].
    pub fn evaluate(&self, params: &ModelParams) -> Result<(f64, Vec<(Block, GroupGrads)>)> {
        let x = &self.batch.images;
        let labels = &self.batch.labels;
        let enc = networks::encoder_forward(params, x)?;
        let gen = networks::generator_forward(params, &enc.z, labels)?;
        Ok(match self.term {
            LossTerm::DzDisc => {
                let (loss, grads) = trainer::dz_disc_grads(params, &self.prior, &enc.z)?;
                (loss, vec![(Block::LatentDisc, grads)])
            }
            LossTerm::DimgDisc => {
                let d = trainer::dimg_disc_grads(params, x, &gen.output, labels)?;
                (d.loss, vec![(Block::ImageDisc, d.grads)])
            }
            _ => {
                let eg = trainer::eg_grads(params, x, labels, &enc, &gen, &self.eg_terms())?;
                let value = match self.term {
                    LossTerm::EncAdv => eg.report.e_adv,
                    LossTerm::GenAdv => eg.report.g_adv,
                    _ => eg.report.eg_total,
                };
                let mut out = vec![(Block::Encoder, eg.enc)];
                if self.term != LossTerm::EncAdv {
                    out.push((Block::Generator, eg.gen));
                }
                (value, out)
            }
        })
    }

    pub fn value(&self, params: &ModelParams) -> Result<f64> {
        Ok(self.evaluate(params)?.0)
    }
}

/// Worst finite-difference disagreement within one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub term: LossTerm,
    pub block: Block,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub epsilon: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < tolerance)
    }
}

/// How many parameters to probe per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// A seeded random subset of this size (or every entry if the group is smaller).
    Sample { per_group: usize, seed: u64 },
    Full,
}

/// Compare analytic gradients of `objective` with central differences.
pub fn gradcheck(objective: &TermObjective, params: &ModelParams, epsilon: f64, coverage: Coverage) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(invalid!("epsilon {epsilon} outside [1e-6, 1e-4]"));
    }
    let (_, grads) = objective.evaluate(params)?;
    let mut groups = Vec::new();
    for (block, grad) in grads {
        if !grad.is_finite() {
            return Err(Error::NonFinite { term: objective.term.name(), step: 0 });
        }
        let group = params.group(block);
        let flat_grad: Vec<f64> = grad.0.concat();
        let flat: Vec<f64> = group.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect();
        let indices: Vec<usize> = match coverage {
            Coverage::Full => (0..flat.len()).collect(),
            Coverage::Sample { per_group, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (block as u64) << 32 ^ objective.term as u64);
                let mut v = index::sample(&mut rng, flat.len(), per_group.min(flat.len())).into_vec();
                v.sort_unstable();
                v
            }
        };
        let f = |values: &[f64]| -> f64 {
            let mut p = params.clone();
            let mut off = 0;
            for t in &mut p.group_mut(block).params {
                let n = t.tensor.len();
                t.tensor.data_mut().copy_from_slice(&values[off..off + n]);
                off += n;
            }
            objective.value(&p).unwrap_or(f64::NAN)
        };
        let (err, worst) = check_gradient(f, &flat, &flat_grad, &indices, epsilon);
        groups.push(GroupCheck {
            term: objective.term,
            block,
            max_rel_error: if err.is_nan() { f64::INFINITY } else { err },
            worst_param: param_name_at(params, block, worst),
            checked: indices.len(),
        });
    }
    Ok(GradCheckReport { groups, epsilon })
}

/// Randomly initialized model plus a four-image batch and prior draw, for checking
/// every loss term at once.
pub fn gradcheck_fixture(config: &networks::NetworkConfig, seed: u64) -> Result<(ModelParams, Batch, LatentBatch)> {
    use rand::Rng;
    const N: usize = 4;
    let params = networks::init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (s, c) = (config.image_size, config.channels);
    let images = (0..N)
        .map(|_| Image::new(s, s, c, (0..s * s * c).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..N).map(|i| data::bin_to_label(i * 3)).collect::<Result<Vec<_>>>()?;
    let batch = Batch::new(ImageBatch::from_images(&images)?, labels)?;
    let mut prior_rng = crate::rng::TrainRng::from_seed(seed.wrapping_add(2));
    let prior = trainer::sample_prior(&trainer::PriorSpec::uniform(config.latent_dim), N, &mut prior_rng)?;
    Ok((params, batch, prior))
}

/// [`gradcheck`] over every [`LossTerm`] on [`gradcheck_fixture`], merged into one report.
pub fn gradcheck_all_terms(config: &networks::NetworkConfig, seed: u64, epsilon: f64, coverage: Coverage) -> Result<GradCheckReport> {
    let (params, batch, prior) = gradcheck_fixture(config, seed)?;
    let mut groups = Vec::new();
    for term in LossTerm::ALL {
        let objective = TermObjective {
            term,
            batch: batch.clone(),
            prior: prior.clone(),
            weights: LossWeights::default(),
            form: GeneratorLoss::NonSaturating,
        };
        groups.extend(gradcheck(&objective, &params, epsilon, coverage)?.groups);
    }
    Ok(GradCheckReport { groups, epsilon })
}

fn param_name_at(params: &ModelParams, block: Block, flat_index: usize) -> String {
    let mut off = 0;
    for p in &params.group(block).params {
        let n = p.tensor.len();
        if flat_index < off + n {
            return format!("{}.{}[{}]", block.name(), p.name, flat_index - off);
        }
        off += n;
    }
    format!("{}[{flat_index}]", block.name())
}

/// One-sample Kolmogorov–Smirnov distance between `samples` and `U[low, high]`.
pub fn ks_uniform(samples: &[f64], low: f64, high: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = ((x - low) / (high - low)).clamp(0.0, 1.0);
            (cdf - i as f64 / n).max((i + 1) as f64 / n - cdf)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value `sqrt(-ln(α/2) / 2) / sqrt(n)`.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    math::sqrt(-math::ln(alpha / 2.0) / 2.0) / math::sqrt(n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    /// KS distance to `U[-1, 1]` for each latent dimension.
    pub per_dim_ks: Vec<f64>,
    pub mean_ks: f64,
    pub samples: usize,
}

impl UniformityReport {
    /// Whether every dimension passes KS at level `alpha` after Bonferroni correction.
    pub fn all_dims_pass(&self, alpha: f64) -> bool {
        let crit = ks_critical_value(self.samples, alpha / self.per_dim_ks.len() as f64);
        self.per_dim_ks.iter().all(|&d| d < crit)
    }
}

pub fn code_uniformity(codes: &LatentBatch) -> UniformityReport {
    let per_dim_ks: Vec<f64> = (0..codes.dim())
        .map(|d| {
            let column: Vec<f64> = codes.rows().map(|r| r[d]).collect();
            ks_uniform(&column, -1.0, 1.0)
        })
        .collect();
    let mean_ks = per_dim_ks.iter().sum::<f64>() / per_dim_ks.len() as f64;
    UniformityReport { per_dim_ks, mean_ks, samples: codes.len() }
}

pub const MIN_UNIFORMITY_SAMPLES: usize = 500;

/// Encode every image and measure how evenly the codes fill `[-1, 1]^n`.
pub fn z_uniformity(params: &ModelParams, images: &[Image]) -> Result<UniformityReport> {
    if images.len() < MIN_UNIFORMITY_SAMPLES {
        return Err(invalid!("uniformity needs at least {MIN_UNIFORMITY_SAMPLES} images, got {}", images.len()));
    }
    let mut data = Vec::with_capacity(images.len() * params.config.latent_dim);
    for chunk in images.chunks(100) {
        data.extend_from_slice(networks::encode(params, &ImageBatch::from_images(chunk)?)?.data());
    }
    Ok(code_uniformity(&LatentBatch::new(images.len(), params.config.latent_dim, data)?))
}

// Wrinkle oracle thresholds, in normalized units.
fn level(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

/// Pixels brighter than this belong to the head (skin or wrinkle).
fn head_threshold() -> f64 {
    (level(data::BACKGROUND).max(level(data::FEATURE)) + level(data::WRINKLE)) / 2.0
}

/// Hysteresis band around the skin/wrinkle midpoint.
fn wrinkle_thresholds() -> (f64, f64) {
    let mid = (level(data::SKIN) + level(data::WRINKLE)) / 2.0;
    let half = (level(data::SKIN) - level(data::WRINKLE)) / 6.0;
    (mid - half, mid + half)
}

/// Estimated number of horizontal wrinkle stripes on a face.
///
/// Locates the head as the bright blob, then walks vertical scanlines at ±0.55 of the
/// head's half-width (clear of eyes and mouth) and counts dark runs strictly inside
/// the head on each, using hysteresis. Returns the mean count over scanlines.
pub fn wrinkle_score(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    let head = head_threshold();
    let is_head = |y: usize, x: usize| img.luma(y, x) > head;
    let cols: Vec<usize> = (0..w).filter(|&x| (0..h).filter(|&y| is_head(y, x)).count() >= 2).collect();
    let (Some(&x0), Some(&x1)) = (cols.first(), cols.last()) else {
        return 0.0;
    };
    let cx = (x0 + x1 + 1) as f64 / 2.0;
    let half_width = (x1 + 1 - x0) as f64 / 2.0;
    let (dark, light) = wrinkle_thresholds();
    let mut scan = Vec::new();
    for side in [-1.0, 1.0] {
        let centre = math::floor(cx + side * data::SCAN_OFFSET * half_width) as isize;
        for dx in -1..=1 {
            let x = centre + dx;
            if x >= 0 && (x as usize) < w && !scan.contains(&(x as usize)) {
                scan.push(x as usize);
            }
        }
    }
    let counts: Vec<f64> = scan
        .iter()
        .filter_map(|&x| {
            let top = (0..h).find(|&y| is_head(y, x))?;
            let bottom = (0..h).rev().find(|&y| is_head(y, x))?;
            let mut in_dark = false;
            let mut runs = 0usize;
            for y in top..=bottom {
                let v = img.luma(y, x);
                if !in_dark && v < dark {
                    in_dark = true;
                    runs += 1;
                } else if in_dark && v > light {
                    in_dark = false;
                }
            }
            Some(runs as f64)
        })
        .collect();
    if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<f64>() / counts.len() as f64
    }
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side has zero variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / math::sqrt(sxx * syy))
}

/// Two-sided 5% critical value of Spearman's ρ for ten pairs (exact table value).
pub const SPEARMAN_CRITICAL_N10: f64 = 0.648;

pub const MIN_CONDITIONING_PROBES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    /// Spearman ρ between requested bin and mean wrinkle score (0 when degenerate).
    pub rho: f64,
    /// All bin means were equal, so ρ is undefined.
    pub degenerate: bool,
    pub bin_means: Vec<f64>,
    pub probes: usize,
}

impl ConditioningReport {
    /// Whether |ρ| exceeds the two-sided 5% critical value.
    pub fn significant(&self) -> bool {
        !self.degenerate && self.rho.abs() > SPEARMAN_CRITICAL_N10
    }
}

/// Wrinkle score of a batch of sweeps, averaged per requested bin.
pub fn sweep_bin_means(params: &ModelParams, probes: &[Image]) -> Result<Vec<f64>> {
    let mut sums = [0.0; NUM_AGE_BINS];
    for chunk in probes.chunks(10) {
        let z = networks::encode(params, &ImageBatch::from_images(chunk)?)?;
        let rows: Vec<&[f64]> = z.rows().flat_map(|r| core::iter::repeat_n(r, NUM_AGE_BINS)).collect();
        let codes = LatentBatch::from_rows(z.dim(), &rows)?;
        let labels: Vec<AgeLabel> = (0..chunk.len()).flat_map(|_| AgeLabel::all()).collect();
        let out = networks::generate(params, &codes, &labels)?;
        for (i, label) in labels.iter().enumerate() {
            sums[label.bin()] += wrinkle_score(&out.image(i));
        }
    }
    Ok(sums.iter().map(|s| s / probes.len() as f64).collect())
}

/// How strongly the requested age label drives the generated wrinkle count.
pub fn conditioning_score(params: &ModelParams, probes: &[Image]) -> Result<ConditioningReport> {
    if probes.len() < MIN_CONDITIONING_PROBES {
        return Err(invalid!("conditioning needs at least {MIN_CONDITIONING_PROBES} probes, got {}", probes.len()));
    }
    let bin_means = sweep_bin_means(params, probes)?;
    let bins: Vec<f64> = (0..NUM_AGE_BINS).map(|b| b as f64).collect();
    let rho = spearman(&bins, &bin_means);
    Ok(ConditioningReport { rho: rho.unwrap_or(0.0), degenerate: rho.is_none(), bin_means, probes: probes.len() })
}

/// Mean total variation of generated faces at the given bins (a high-frequency energy proxy).
pub fn texture_energy(params: &ModelParams, probes: &[Image], bins: &[usize]) -> Result<f64> {
    if probes.is_empty() || bins.is_empty() {
        return Err(invalid!("texture energy needs probes and bins"));
    }
    let mut total = 0.0;
    for &bin in bins {
        let label = data::bin_to_label(bin)?;
        for chunk in probes.chunks(50) {
            let z = networks::encode(params, &ImageBatch::from_images(chunk)?)?;
            let out = networks::generate(params, &z, &vec![label; chunk.len()])?;
            total += objectives::tv_loss(&out)? * chunk.len() as f64;
        }
    }
    Ok(total / (probes.len() * bins.len()) as f64)
}

/// Mean squared reconstruction error under each probe's own label.
pub fn reconstruction_error(params: &ModelParams, probes: &[data::Sample]) -> Result<f64> {
    if probes.is_empty() {
        return Err(invalid!("reconstruction error needs probes"));
    }
    let mut total = 0.0;
    for chunk in probes.chunks(50) {
        let batch = Batch::from_samples(chunk)?;
        let z = networks::encode(params, &batch.images)?;
        let out = networks::generate(params, &z, &batch.labels)?;
        total += objectives::recon_loss(&batch.images, &out)? * chunk.len() as f64;
    }
    Ok(total / probes.len() as f64)
}
