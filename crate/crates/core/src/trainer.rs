//! Alternating adversarial training: per batch, one Dimg update, one Dz update, then
//! one joint E/G update, each a single ADAM step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{batch_order, AgeLabel, Batch, ImageBatch, Sample};
use crate::error::{invalid, Error, Result};
use crate::networks::{self, BnMode, DimgPass, EncoderPass, GeneratorPass, GroupGrads, LatentBatch, ModelParams, NetworkConfig};
use crate::objectives::{self, GeneratorLoss, LossReport, LossWeights};
use crate::optim::{AdamConfig, AdamState, ADAM_EPS};
use crate::rng::TrainRng;

/// Training hyper-parameters. Defaults follow the published recipe
/// (λ = 100, γ = 10, batch 100, α = 0.0002, β1 = 0.5, 50 epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablate_dz: bool,
    pub ablate_dimg: bool,
    /// Write a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    pub generator_loss: GeneratorLoss,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            batch_size: 100,
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 50,
            seed: 0,
            ablate_dz: false,
            ablate_dimg: false,
            checkpoint_every: 1000,
            generator_loss: GeneratorLoss::NonSaturating,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.weights.violations();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".into());
        }
        errs.extend(self.network.violations());
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: ADAM_EPS }
    }

    pub fn prior(&self) -> PriorSpec {
        PriorSpec::uniform(self.network.latent_dim)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len / self.batch_size.max(1)) as u64
    }
}

/// Distribution that encoder codes are pushed toward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub low: f64,
    pub high: f64,
    pub dim: usize,
}

impl PriorSpec {
    /// Uniform on `[-1, 1]^dim`.
    pub fn uniform(dim: usize) -> Self {
        Self { low: -1.0, high: 1.0, dim }
    }
}

/// I.i.d. uniform codes, `batch × spec.dim`.
pub fn sample_prior(spec: &PriorSpec, batch: usize, rng: &mut TrainRng) -> Result<LatentBatch> {
    if batch == 0 || !(spec.low < spec.high) {
        return Err(invalid!("prior needs batch >= 1 and low < high"));
    }
    let dist = Uniform::new_inclusive(spec.low, spec.high);
    let data = (0..batch * spec.dim).map(|_| dist.sample(rng)).collect();
    LatentBatch::new(batch, spec.dim, data)
}

/// Optimizer moments for each block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub enc: AdamState,
    pub gen: AdamState,
    pub dz: AdamState,
    pub dimg: AdamState,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub moments: Moments,
    pub step: u64,
    pub rng: TrainRng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = networks::init_params(&config.network, config.seed)?;
        Ok(Self::from_params(params, config.seed))
    }

    pub fn from_params(params: ModelParams, seed: u64) -> Self {
        let moments = Moments {
            enc: AdamState::new(&params.enc),
            gen: AdamState::new(&params.gen),
            dz: AdamState::new(&params.dz),
            dimg: AdamState::new(&params.dimg),
        };
        // Prior sampling draws from its own stream so it never aliases the weight init.
        Self { params, moments, step: 0, rng: TrainRng::with_stream(seed, 1) }
    }

    pub fn moments_match(&self) -> bool {
        self.moments.enc.matches(&self.params.enc)
            && self.moments.gen.matches(&self.params.gen)
            && self.moments.dz.matches(&self.params.dz)
            && self.moments.dimg.matches(&self.params.dimg)
    }
}

fn finite(v: f64, term: &'static str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, step })
    }
}

/// One alternating update on `batch`: Dimg, then Dz, then E and G jointly.
///
/// Training always conditions on the batch's true labels. Ablated discriminators are
/// neither updated nor consulted, and contribute 0 to the E/G objective.
pub fn train_step(mut state: TrainState, batch: &Batch, config: &TrainConfig) -> Result<(TrainState, LossReport)> {
    let step = state.step;
    let adam = config.adam();
    let labels = &batch.labels;
    let x = &batch.images;

    // E and G are untouched until the final sub-step, so one forward pass serves all three.
    let enc = networks::encoder_forward(&state.params, x)?;
    let gen = networks::generator_forward(&state.params, &enc.z, labels)?;
    let x_hat = &gen.output;

    let mut report = LossReport::default();

    if !config.ablate_dimg {
        let d = dimg_disc_grads(&state.params, x, x_hat, labels)?;
        report.dimg_loss = finite(d.loss, "dimg_loss", step)?;
        networks::update_running_stats(&mut state.params, &d.real);
        networks::update_running_stats(&mut state.params, &d.fake);
        state.moments.dimg.step(&mut state.params.dimg, &d.grads, &adam);
    }

    if !config.ablate_dz {
        let prior = sample_prior(&config.prior(), x.len(), &mut state.rng)?;
        let (loss, grads) = dz_disc_grads(&state.params, &prior, &enc.z)?;
        report.dz_loss = finite(loss, "dz_loss", step)?;
        state.moments.dz.step(&mut state.params.dz, &grads, &adam);
    }

    let terms = EgTerms { weights: config.weights, form: config.generator_loss, use_dz: !config.ablate_dz, use_dimg: !config.ablate_dimg };
    let eg = eg_grads(&state.params, x, labels, &enc, &gen, &terms)?;
    report.recon = eg.report.recon;
    report.tv = eg.report.tv;
    report.e_adv = eg.report.e_adv;
    report.g_adv = eg.report.g_adv;
    report.eg_total = eg.report.eg_total;
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFinite { term, step });
    }
    let (enc_grads, gen_grads) = (eg.enc, eg.gen);
    if !enc_grads.is_finite() || !gen_grads.is_finite() {
        return Err(Error::NonFinite { term: "eg_gradient", step });
    }
    state.moments.enc.step(&mut state.params.enc, &enc_grads, &adam);
    state.moments.gen.step(&mut state.params.gen, &gen_grads, &adam);
    state.step += 1;
    Ok((state, report))
}

/// Dimg's logistic loss on real `(x, l)` and fake `(x̂, l)` pairs, with its parameter gradient.
pub(crate) struct DimgDisc {
    pub loss: f64,
    pub grads: GroupGrads,
    pub real: DimgPass,
    pub fake: DimgPass,
}

pub(crate) fn dimg_disc_grads(params: &ModelParams, x: &ImageBatch, x_hat: &ImageBatch, labels: &[AgeLabel]) -> Result<DimgDisc> {
    let real = networks::dimg_forward(params, x, labels, BnMode::Train)?;
    let fake = networks::dimg_forward(params, x_hat, labels, BnMode::Train)?;
    let (loss, d_real, d_fake) = objectives::adversarial_d_loss_grad(&real.out.logits, &fake.out.logits)?;
    let (mut grads, _) = networks::dimg_backward(params, &real, &d_real, true, false);
    let (g_fake, _) = networks::dimg_backward(params, &fake, &d_fake, true, false);
    grads.add_assign(&g_fake);
    Ok(DimgDisc { loss, grads, real, fake })
}

/// Dz's logistic loss on prior samples (real) and encoder codes (fake).
pub(crate) fn dz_disc_grads(params: &ModelParams, prior: &LatentBatch, z: &LatentBatch) -> Result<(f64, GroupGrads)> {
    let real = networks::dz_forward(params, prior)?;
    let fake = networks::dz_forward(params, z)?;
    let (loss, d_real, d_fake) = objectives::adversarial_d_loss_grad(&real.out.logits, &fake.out.logits)?;
    let (mut grads, _) = networks::dz_backward(params, &real, &d_real, false);
    let (g_fake, _) = networks::dz_backward(params, &fake, &d_fake, false);
    grads.add_assign(&g_fake);
    Ok((loss, grads))
}

/// Which terms of the E/G objective are active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EgTerms {
    pub weights: LossWeights,
    pub form: GeneratorLoss,
    pub use_dz: bool,
    pub use_dimg: bool,
}

pub(crate) struct EgGradients {
    pub report: LossReport,
    pub enc: GroupGrads,
    pub gen: GroupGrads,
}

/// E/G objective and its gradients, given the forward passes of E and G.
pub(crate) fn eg_grads(
    params: &ModelParams,
    x: &ImageBatch,
    labels: &[AgeLabel],
    enc: &EncoderPass,
    gen: &GeneratorPass,
    terms: &EgTerms,
) -> Result<EgGradients> {
    let x_hat = &gen.output;
    let dz_pass = terms.use_dz.then(|| networks::dz_forward(params, &enc.z)).transpose()?;
    let dimg_pass = terms.use_dimg.then(|| networks::dimg_forward(params, x_hat, labels, BnMode::Train)).transpose()?;
    let (_, report, grads) = objectives::eg_total_loss_grad(
        x,
        x_hat,
        dz_pass.as_ref().map(|p| &p.out.logits[..]),
        dimg_pass.as_ref().map(|p| &p.out.logits[..]),
        &terms.weights,
        terms.form,
    )?;
    let mut d_x_hat = grads.x_hat;
    if let (Some(pass), Some(d_logits)) = (&dimg_pass, &grads.dimg_logits) {
        let (_, dx) = networks::dimg_backward(params, pass, d_logits, false, true);
        d_x_hat.iter_mut().zip(dx.expect("requested")).for_each(|(a, b)| *a += b);
    }
    let (gen_grads, mut d_z) = networks::generator_backward(params, gen, &d_x_hat);
    if let (Some(pass), Some(d_logits)) = (&dz_pass, &grads.dz_logits) {
        let (_, dz) = networks::dz_backward(params, pass, d_logits, true);
        d_z.iter_mut().zip(dz.expect("requested")).for_each(|(a, b)| *a += b);
    }
    let enc_grads = networks::encoder_backward(params, enc, &d_z);
    Ok(EgGradients { report, enc: enc_grads, gen: gen_grads })
}

/// Position of a completed step within the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInfo {
    /// Number of steps completed, including this one.
    pub step: u64,
    pub epoch: u64,
    pub total_steps: u64,
}

/// Train from `state.step` to the end of `config.epochs`, calling `on_step` after each
/// step. Batch order is a pure function of `(seed, epoch)`, so a state restored from a
/// checkpoint continues exactly where the original run would have.
pub fn train_samples<F>(mut state: TrainState, samples: &[Sample], config: &TrainConfig, mut on_step: F) -> Result<TrainState>
where
    F: FnMut(&StepInfo, &TrainState, &LossReport) -> ControlFlow<()>,
{
    config.validate()?;
    let per_epoch = config.steps_per_epoch(samples.len());
    if per_epoch == 0 {
        return Err(invalid!("{} samples cannot fill one batch of {}", samples.len(), config.batch_size));
    }
    let total_steps = per_epoch * config.epochs as u64;
    let mut order: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step < total_steps {
        let epoch = state.step / per_epoch;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, batch_order(samples.len(), config.batch_size, config.seed, epoch)?));
        }
        let idx = &order.as_ref().expect("set above").1[(state.step % per_epoch) as usize];
        let batch = Batch::from_samples(idx.iter().map(|&i| &samples[i]))?;
        let (next, report) = train_step(state, &batch, config)?;
        state = next;
        let info = StepInfo { step: state.step, epoch, total_steps };
        if on_step(&info, &state, &report).is_break() {
            break;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_faces, AgeLabel, ImageBatch};
    use crate::networks::Block;

    fn mini_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 1,
            seed: 9,
            network: NetworkConfig {
                image_size: 16,
                channels: 1,
                latent_dim: 4,
                base_filters: 8,
                num_scales: 2,
                use_batchnorm_dimg: true,
            },
            ..TrainConfig::default()
        }
    }

    fn mini_batch(n: usize) -> Batch {
        let faces = synth_faces(n, 16, 3).unwrap();
        let (imgs, labels): (Vec<_>, Vec<_>) =
            faces.into_iter().map(|(img, age)| (img, AgeLabel::from_age(age).unwrap())).unzip();
        Batch::new(ImageBatch::from_images(&imgs).unwrap(), labels).unwrap()
    }

    #[test]
    fn defaults_follow_the_published_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.weights.lambda, c.weights.gamma), (100.0, 10.0));
        assert_eq!((c.batch_size, c.epochs), (100, 50));
        assert_eq!((c.learning_rate, c.beta1, c.beta2), (0.0002, 0.5, 0.999));
    }

    #[test]
    fn prior_samples_are_bounded_and_reproducible() {
        let spec = PriorSpec::uniform(8);
        let mut a = TrainRng::from_seed(1);
        let mut b = TrainRng::from_seed(1);
        let za = sample_prior(&spec, 50, &mut a).unwrap();
        assert_eq!(za, sample_prior(&spec, 50, &mut b).unwrap());
        assert!(za.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sample_prior(&spec, 0, &mut a).is_err());
    }

    #[test]
    fn every_active_block_moves_and_groups_stay_isolated() {
        let cfg = mini_config();
        let state = TrainState::new(&cfg).unwrap();
        let before = state.params.clone();
        let (after, report) = train_step(state, &mini_batch(4), &cfg).unwrap();
        for block in Block::ALL {
            assert_ne!(before.group(block).params, after.params.group(block).params, "{block:?}");
        }
        assert!(report.dz_loss > 0.0 && report.dimg_loss > 0.0);
        assert_eq!(after.step, 1);

        let ablated = TrainConfig { ablate_dz: true, ablate_dimg: true, ..cfg };
        let state = TrainState::new(&ablated).unwrap();
        let before = state.params.clone();
        let (after, report) = train_step(state, &mini_batch(4), &ablated).unwrap();
        assert_eq!(before.dz, after.params.dz);
        assert_eq!(before.dimg, after.params.dimg);
        assert_ne!(before.enc, after.params.enc);
        assert_eq!((report.e_adv, report.g_adv, report.dz_loss, report.dimg_loss), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn discriminator_updates_leave_eg_untouched() {
        // With the E/G learning signal zeroed out, only discriminators can change.
        let cfg = TrainConfig { weights: LossWeights { lambda: 0.0, gamma: 0.0 }, ..mini_config() };
        let state = TrainState::new(&cfg).unwrap();
        let before = state.params.clone();
        let (after, _) = train_step(state, &mini_batch(4), &cfg).unwrap();
        assert_ne!(before.dz, after.params.dz);
        assert_ne!(before.dimg, after.params.dimg);
    }

    #[test]
    fn step_is_deterministic() {
        let cfg = mini_config();
        let batch = mini_batch(4);
        let s = TrainState::new(&cfg).unwrap();
        let (a, ra) = train_step(s.clone(), &batch, &cfg).unwrap();
        let (b, rb) = train_step(s, &batch, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn loop_runs_whole_batches_per_epoch() {
        let faces = synth_faces(10, 16, 1).unwrap();
        let samples: Vec<Sample> = faces
            .into_iter()
            .map(|(image, age)| Sample { image, label: AgeLabel::from_age(age).unwrap() })
            .collect();
        let cfg = TrainConfig { epochs: 2, ..mini_config() };
        let mut seen = Vec::new();
        let state = train_samples(TrainState::new(&cfg).unwrap(), &samples, &cfg, |info, _, _| {
            seen.push((info.step, info.epoch));
            ControlFlow::Continue(())
        })
        .unwrap();
        assert_eq!(seen, [(1, 0), (2, 0), (3, 1), (4, 1)]);
        assert_eq!(state.step, 4);
    }
}
