//! The four CAAE blocks as pure forward functions over [`ModelParams`], each paired
//! with an explicit backward pass.
//!
//! * Encoder E: `num_scales` stride-2 5×5 convolutions (filters `base_filters·2^k`,
//!   ReLU), then a fully connected layer to the latent size and `tanh`.
//! * Generator G: fully connected from `[z, l]` to a `s × s` feature map with
//!   `base_filters·2^(num_scales-1)` channels, then `num_scales` stride-2 transposed
//!   convolutions halving the filters, `tanh` on the output image.
//! * Latent discriminator Dz: fully connected 64 → 32 → 1 with ReLU, sigmoid head.
//! * Image discriminator Dimg: mirrors E; after the first convolution the ten label
//!   entries are tiled into constant feature maps and concatenated along channels.
//!   Later convolutions optionally use batch normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{label_matrix, AgeLabel, ImageBatch, NUM_AGE_BINS};
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, BatchNormCache, ConvCache, ConvGeom, DeconvCache, DeconvGeom};
use crate::math;
use crate::tensor::Tensor;

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
/// Hidden widths of the latent discriminator.
pub const DZ_HIDDEN: [usize; 2] = [64, 32];
/// Momentum of the batch-norm running statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyper-parameters shared by all four blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_filters: usize,
    pub num_scales: usize,
    pub use_batchnorm_dimg: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            latent_dim: 64,
            base_filters: 16,
            num_scales: 4,
            use_batchnorm_dimg: true,
        }
    }
}

impl NetworkConfig {
    /// Every violated invariant, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.channels == 1 || self.channels == 3) {
            errs.push(format!("network.channels must be 1 or 3, got {}", self.channels));
        }
        if self.latent_dim < 2 {
            errs.push(format!("network.latent_dim must be at least 2, got {}", self.latent_dim));
        }
        if self.base_filters < 8 {
            errs.push(format!("network.base_filters must be at least 8, got {}", self.base_filters));
        }
        if self.num_scales == 0 || self.num_scales > 16 {
            errs.push(format!("network.num_scales must be in 1..=16, got {}", self.num_scales));
        } else {
            let unit = 1usize << self.num_scales;
            if self.image_size % unit != 0 || self.image_size / unit < 4 {
                errs.push(format!(
                    "network.image_size {} must be 2^num_scales ({unit}) times an integer of at least 4",
                    self.image_size
                ));
            }
        }
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

    /// Spatial side of the smallest feature map.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.num_scales
    }

    /// Channel count of the deepest convolutional stage.
    pub fn top_filters(&self) -> usize {
        self.base_filters << (self.num_scales - 1)
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    fn encoder_geoms(&self) -> Vec<ConvGeom> {
        (0..self.num_scales)
            .map(|k| {
                let in_c = if k == 0 { self.channels } else { self.base_filters << (k - 1) };
                let side = self.image_size >> k;
                ConvGeom::same(in_c, side, side, self.base_filters << k, KERNEL, STRIDE)
            })
            .collect()
    }

    fn generator_geoms(&self) -> Vec<DeconvGeom> {
        let s = self.bottleneck_size();
        (0..self.num_scales)
            .map(|k| {
                let in_c = self.top_filters() >> k;
                let out_c = if k + 1 == self.num_scales { self.channels } else { self.top_filters() >> (k + 1) };
                DeconvGeom::upsample(in_c, s << k, s << k, out_c, KERNEL, STRIDE)
            })
            .collect()
    }

    fn dimg_geoms(&self) -> Vec<ConvGeom> {
        (0..self.num_scales)
            .map(|k| {
                let in_c = match k {
                    0 => self.channels,
                    1 => self.base_filters + NUM_AGE_BINS,
                    _ => self.base_filters << (k - 1),
                };
                let side = self.image_size >> k;
                ConvGeom::same(in_c, side, side, self.base_filters << k, KERNEL, STRIDE)
            })
            .collect()
    }

    fn dimg_fc_in(&self) -> usize {
        let s = self.bottleneck_size();
        let c = if self.num_scales == 1 { self.base_filters + NUM_AGE_BINS } else { self.top_filters() };
        c * s * s
    }
}

/// A named array within a [`ParamGroup`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Trainable parameters of one block plus non-trainable buffers (batch-norm statistics).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGroup {
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

impl ParamGroup {
    fn push(&mut self, name: String, tensor: Tensor) {
        debug_assert!(self.index_of(&name).is_none());
        self.params.push(NamedTensor { name, tensor });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Panics on an unknown name; names are fixed by [`init_params`].
    pub fn get(&self, name: &str) -> &[f64] {
        match self.index_of(name) {
            Some(i) => self.params[i].tensor.data(),
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        match self.index_of(name) {
            Some(i) => self.params[i].tensor.data_mut(),
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn buffer(&self, name: &str) -> &[f64] {
        match self.buffers.iter().find(|b| b.name == name) {
            Some(b) => b.tensor.data(),
            None => panic!("no buffer named {name}"),
        }
    }

    fn buffer_mut(&mut self, name: &str) -> &mut [f64] {
        match self.buffers.iter_mut().find(|b| b.name == name) {
            Some(b) => b.tensor.data_mut(),
            None => panic!("no buffer named {name}"),
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(|p| p.tensor.is_finite())
    }

    pub fn zero_grads(&self) -> GroupGrads {
        GroupGrads(self.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect())
    }
}

/// Gradients aligned index-for-index with [`ParamGroup::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGrads(pub Vec<Vec<f64>>);

impl GroupGrads {
    fn set(&mut self, group: &ParamGroup, name: &str, grad: Vec<f64>) {
        let i = group.index_of(name).expect("gradient for unknown parameter");
        debug_assert_eq!(self.0[i].len(), grad.len());
        self.0[i] = grad;
    }

    pub fn add_assign(&mut self, other: &GroupGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Which block a parameter group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Encoder,
    Generator,
    LatentDisc,
    ImageDisc,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Encoder, Block::Generator, Block::LatentDisc, Block::ImageDisc];

    pub fn name(self) -> &'static str {
        match self {
            Block::Encoder => "enc",
            Block::Generator => "gen",
            Block::LatentDisc => "dz",
            Block::ImageDisc => "dimg",
        }
    }
}

/// Parameters of E, G, Dz and Dimg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub enc: ParamGroup,
    pub gen: ParamGroup,
    pub dz: ParamGroup,
    pub dimg: ParamGroup,
}

impl ModelParams {
    pub fn group(&self, block: Block) -> &ParamGroup {
        match block {
            Block::Encoder => &self.enc,
            Block::Generator => &self.gen,
            Block::LatentDisc => &self.dz,
            Block::ImageDisc => &self.dimg,
        }
    }

    pub fn group_mut(&mut self, block: Block) -> &mut ParamGroup {
        match block {
            Block::Encoder => &mut self.enc,
            Block::Generator => &mut self.gen,
            Block::LatentDisc => &mut self.dz,
            Block::ImageDisc => &mut self.dimg,
        }
    }

    pub fn is_finite(&self) -> bool {
        Block::ALL.iter().all(|&b| self.group(b).is_finite())
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let limit = math::sqrt(6.0 / fan_in as f64);
    (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Deterministic initialization: He-uniform weights, zero biases, unit batch-norm scale.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |group: &mut ParamGroup, prefix: &str, g: &ConvGeom, rng: &mut ChaCha8Rng| {
        group.push(
            format!("{prefix}.w"),
            Tensor::from_vec(&[g.out_c, g.in_c, KERNEL, KERNEL], he_uniform(rng, g.weight_len(), g.patch_len())),
        );
        group.push(format!("{prefix}.b"), Tensor::zeros(&[g.out_c]));
    };
    let dense = |group: &mut ParamGroup, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        group.push(format!("{prefix}.w"), Tensor::from_vec(&[fan_out, fan_in], he_uniform(rng, fan_in * fan_out, fan_in)));
        group.push(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    };

    let mut enc = ParamGroup::default();
    for (k, g) in config.encoder_geoms().iter().enumerate() {
        conv(&mut enc, &format!("conv{k}"), g, &mut rng);
    }
    let s = config.bottleneck_size();
    dense(&mut enc, "fc", config.top_filters() * s * s, config.latent_dim, &mut rng);

    let mut gen = ParamGroup::default();
    dense(&mut gen, "fc", config.latent_dim + NUM_AGE_BINS, config.top_filters() * s * s, &mut rng);
    for (k, g) in config.generator_geoms().iter().enumerate() {
        // Fan-in of a stride-2 transposed convolution is roughly in_c·k²/4 per output pixel.
        let m = g.mirror;
        let fan_in = (m.out_c * KERNEL * KERNEL / (STRIDE * STRIDE)).max(1);
        gen.push(format!("deconv{k}.w"), Tensor::from_vec(&[m.out_c, m.in_c, KERNEL, KERNEL], he_uniform(&mut rng, m.weight_len(), fan_in)));
        gen.push(format!("deconv{k}.b"), Tensor::zeros(&[m.in_c]));
    }

    let mut dz = ParamGroup::default();
    let widths = [config.latent_dim, DZ_HIDDEN[0], DZ_HIDDEN[1], 1];
    for k in 0..3 {
        dense(&mut dz, &format!("fc{k}"), widths[k], widths[k + 1], &mut rng);
    }

    let mut dimg = ParamGroup::default();
    for (k, g) in config.dimg_geoms().iter().enumerate() {
        conv(&mut dimg, &format!("conv{k}"), g, &mut rng);
        if k > 0 && config.use_batchnorm_dimg {
            dimg.push(format!("bn{k}.gamma"), Tensor::from_vec(&[g.out_c], vec![1.0; g.out_c]));
            dimg.push(format!("bn{k}.beta"), Tensor::zeros(&[g.out_c]));
            dimg.buffers.push(NamedTensor { name: format!("bn{k}.running_mean"), tensor: Tensor::zeros(&[g.out_c]) });
            dimg.buffers.push(NamedTensor {
                name: format!("bn{k}.running_var"),
                tensor: Tensor::from_vec(&[g.out_c], vec![1.0; g.out_c]),
            });
        }
    }
    dense(&mut dimg, "fc", config.dimg_fc_in(), 1, &mut rng);

    Ok(ModelParams { config: *config, enc, gen, dz, dimg })
}

/// A batch of latent codes, `batch × dim` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBatch {
    batch: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentBatch {
    pub fn new(batch: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * dim {
            return Err(shape_err!("{} values for {batch} codes of size {dim}", data.len()));
        }
        Ok(Self { batch, dim, data })
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Stack single codes into one batch.
    pub fn from_rows(dim: usize, rows: &[&[f64]]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(shape_err!("latent row of length {} (expected {dim})", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }
}

fn check_images(config: &NetworkConfig, x: &ImageBatch) -> Result<()> {
    let expect = (config.channels, config.image_size, config.image_size);
    if (x.channels(), x.height(), x.width()) != expect || x.is_empty() {
        return Err(shape_err!(
            "image batch {:?} does not match the network's {}x{}x{}",
            x.shape_nhwc(),
            config.image_size,
            config.image_size,
            config.channels
        ));
    }
    Ok(())
}

fn check_latent(config: &NetworkConfig, z: &LatentBatch) -> Result<()> {
    if z.dim != config.latent_dim || z.is_empty() {
        return Err(shape_err!("latent batch {}x{} does not match latent_dim {}", z.batch, z.dim, config.latent_dim));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConvStage {
    conv: ConvCache,
    bn: Option<BatchNormCache>,
    /// Post-activation output.
    act: Vec<f64>,
}

/// Everything the encoder backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    batch: usize,
    stages: Vec<ConvStage>,
    pub z: LatentBatch,
}

pub fn encoder_forward(params: &ModelParams, x: &ImageBatch) -> Result<EncoderPass> {
    let cfg = &params.config;
    check_images(cfg, x)?;
    let batch = x.len();
    let p = &params.enc;
    let mut stages = Vec::with_capacity(cfg.num_scales);
    for (k, g) in cfg.encoder_geoms().iter().enumerate() {
        let input = stages.last().map_or(x.data(), |s: &ConvStage| &s.act[..]);
        let (mut act, conv) = layers::conv2d_forward(g, batch, input, p.get(&format!("conv{k}.w")), p.get(&format!("conv{k}.b")));
        layers::relu_inplace(&mut act);
        stages.push(ConvStage { conv, bn: None, act });
    }
    let s = cfg.bottleneck_size();
    let fan_in = cfg.top_filters() * s * s;
    let last = &stages.last().expect("at least one scale").act;
    let mut z = layers::dense_forward(batch, fan_in, cfg.latent_dim, last, p.get("fc.w"), p.get("fc.b"));
    layers::tanh_inplace(&mut z);
    Ok(EncoderPass { batch, stages, z: LatentBatch::new(batch, cfg.latent_dim, z)? })
}

/// Parameter gradients of E given `dL/dz`.
pub fn encoder_backward(params: &ModelParams, pass: &EncoderPass, dz: &[f64]) -> GroupGrads {
    let cfg = &params.config;
    let p = &params.enc;
    let mut grads = p.zero_grads();
    let mut d = dz.to_vec();
    layers::tanh_backward_inplace(pass.z.data(), &mut d);
    let s = cfg.bottleneck_size();
    let fan_in = cfg.top_filters() * s * s;
    let last = &pass.stages.last().expect("at least one scale").act;
    let fc = layers::dense_backward(pass.batch, fan_in, cfg.latent_dim, last, p.get("fc.w"), &d, true);
    grads.set(p, "fc.w", fc.weight);
    grads.set(p, "fc.b", fc.bias);
    let mut d = fc.input.expect("requested");
    let geoms = cfg.encoder_geoms();
    for k in (0..cfg.num_scales).rev() {
        let stage = &pass.stages[k];
        layers::relu_backward_inplace(&stage.act, &mut d);
        let name_w = format!("conv{k}.w");
        let lg = layers::conv2d_backward(&geoms[k], pass.batch, &stage.conv, p.get(&name_w), &d, true, k > 0);
        grads.set(p, &name_w, lg.weight);
        grads.set(p, &format!("conv{k}.b"), lg.bias);
        if let Some(dx) = lg.input {
            d = dx;
        }
    }
    grads
}

/// `E(x)`: one tanh-bounded code per image.
pub fn encode(params: &ModelParams, x: &ImageBatch) -> Result<LatentBatch> {
    Ok(encoder_forward(params, x)?.z)
}

#[derive(Debug, Clone)]
pub struct GeneratorPass {
    batch: usize,
    input: Vec<f64>,
    fc_act: Vec<f64>,
    stages: Vec<(DeconvCache, Vec<f64>)>,
    pub output: ImageBatch,
}

/// Concatenate codes and label rows into the `batch × (n + 10)` generator input.
fn generator_input(z: &LatentBatch, labels: &[AgeLabel]) -> Vec<f64> {
    let lm = label_matrix(labels);
    let mut out = Vec::with_capacity(z.batch * (z.dim + NUM_AGE_BINS));
    for (row, lab) in z.rows().zip(lm.chunks_exact(NUM_AGE_BINS)) {
        out.extend_from_slice(row);
        out.extend_from_slice(lab);
    }
    out
}

pub fn generator_forward(params: &ModelParams, z: &LatentBatch, labels: &[AgeLabel]) -> Result<GeneratorPass> {
    let cfg = &params.config;
    check_latent(cfg, z)?;
    if labels.len() != z.batch {
        return Err(shape_err!("{} codes but {} labels", z.batch, labels.len()));
    }
    let batch = z.batch;
    let p = &params.gen;
    let input = generator_input(z, labels);
    let s = cfg.bottleneck_size();
    let width = cfg.top_filters() * s * s;
    let mut fc_act = layers::dense_forward(batch, cfg.latent_dim + NUM_AGE_BINS, width, &input, p.get("fc.w"), p.get("fc.b"));
    layers::relu_inplace(&mut fc_act);
    let mut stages: Vec<(DeconvCache, Vec<f64>)> = Vec::with_capacity(cfg.num_scales);
    for (k, g) in cfg.generator_geoms().iter().enumerate() {
        let x = stages.last().map_or(&fc_act[..], |s| &s.1[..]);
        let (mut y, cache) = layers::deconv2d_forward(g, batch, x, p.get(&format!("deconv{k}.w")), p.get(&format!("deconv{k}.b")));
        if k + 1 == cfg.num_scales {
            layers::tanh_inplace(&mut y);
        } else {
            layers::relu_inplace(&mut y);
        }
        stages.push((cache, y));
    }
    let out = stages.last().expect("at least one scale").1.clone();
    let output = ImageBatch::from_nchw(batch, cfg.channels, cfg.image_size, cfg.image_size, out)?;
    Ok(GeneratorPass { batch, input, fc_act, stages, output })
}

/// Parameter gradients of G and `dL/dz` given `dL/dx̂` (NCHW).
pub fn generator_backward(params: &ModelParams, pass: &GeneratorPass, d_out: &[f64]) -> (GroupGrads, Vec<f64>) {
    let cfg = &params.config;
    let p = &params.gen;
    let mut grads = p.zero_grads();
    let geoms = cfg.generator_geoms();
    let mut d = d_out.to_vec();
    for k in (0..cfg.num_scales).rev() {
        let (cache, y) = &pass.stages[k];
        if k + 1 == cfg.num_scales {
            layers::tanh_backward_inplace(y, &mut d);
        } else {
            layers::relu_backward_inplace(y, &mut d);
        }
        let name_w = format!("deconv{k}.w");
        let lg = layers::deconv2d_backward(&geoms[k], pass.batch, cache, p.get(&name_w), &d, true);
        grads.set(p, &name_w, lg.weight);
        grads.set(p, &format!("deconv{k}.b"), lg.bias);
        d = lg.input.expect("requested");
    }
    layers::relu_backward_inplace(&pass.fc_act, &mut d);
    let s = cfg.bottleneck_size();
    let width = cfg.top_filters() * s * s;
    let fan_in = cfg.latent_dim + NUM_AGE_BINS;
    let fc = layers::dense_backward(pass.batch, fan_in, width, &pass.input, p.get("fc.w"), &d, true);
    grads.set(p, "fc.w", fc.weight);
    grads.set(p, "fc.b", fc.bias);
    let d_in = fc.input.expect("requested");
    let dz = d_in.chunks_exact(fan_in).flat_map(|r| r[..cfg.latent_dim].iter().copied()).collect();
    (grads, dz)
}

/// `G(z, l)`.
pub fn generate(params: &ModelParams, z: &LatentBatch, labels: &[AgeLabel]) -> Result<ImageBatch> {
    Ok(generator_forward(params, z, labels)?.output)
}

/// Discriminator outputs: raw logits plus their sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    pub logits: Vec<f64>,
}

impl DiscOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| math::sigmoid(l)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DzPass {
    batch: usize,
    input: Vec<f64>,
    hidden: [Vec<f64>; 2],
    pub out: DiscOutput,
}

pub fn dz_forward(params: &ModelParams, z: &LatentBatch) -> Result<DzPass> {
    let cfg = &params.config;
    check_latent(cfg, z)?;
    let p = &params.dz;
    let b = z.batch;
    let mut h0 = layers::dense_forward(b, cfg.latent_dim, DZ_HIDDEN[0], z.data(), p.get("fc0.w"), p.get("fc0.b"));
    layers::relu_inplace(&mut h0);
    let mut h1 = layers::dense_forward(b, DZ_HIDDEN[0], DZ_HIDDEN[1], &h0, p.get("fc1.w"), p.get("fc1.b"));
    layers::relu_inplace(&mut h1);
    let logits = layers::dense_forward(b, DZ_HIDDEN[1], 1, &h1, p.get("fc2.w"), p.get("fc2.b"));
    Ok(DzPass { batch: b, input: z.data().to_vec(), hidden: [h0, h1], out: DiscOutput { logits } })
}

/// Parameter gradients of Dz and optionally `dL/dz`, given `dL/dlogits`.
pub fn dz_backward(params: &ModelParams, pass: &DzPass, d_logits: &[f64], need_input: bool) -> (GroupGrads, Option<Vec<f64>>) {
    let cfg = &params.config;
    let p = &params.dz;
    let mut grads = p.zero_grads();
    let b = pass.batch;
    let mut l2 = layers::dense_backward(b, DZ_HIDDEN[1], 1, &pass.hidden[1], p.get("fc2.w"), d_logits, true);
    let mut d1 = l2.input.take().expect("requested");
    layers::relu_backward_inplace(&pass.hidden[1], &mut d1);
    let mut l1 = layers::dense_backward(b, DZ_HIDDEN[0], DZ_HIDDEN[1], &pass.hidden[0], p.get("fc1.w"), &d1, true);
    let mut d0 = l1.input.take().expect("requested");
    layers::relu_backward_inplace(&pass.hidden[0], &mut d0);
    let mut l0 = layers::dense_backward(b, cfg.latent_dim, DZ_HIDDEN[0], &pass.input, p.get("fc0.w"), &d0, need_input);
    let d_input = l0.input.take();
    for (k, lg) in [(0, l0), (1, l1), (2, l2)] {
        grads.set(p, &format!("fc{k}.w"), lg.weight);
        grads.set(p, &format!("fc{k}.b"), lg.bias);
    }
    (grads, d_input)
}

pub fn discriminate_z(params: &ModelParams, z: &LatentBatch) -> Result<DiscOutput> {
    Ok(dz_forward(params, z)?.out)
}

/// Batch statistics source for Dimg's normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the current batch's statistics.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct DimgPass {
    batch: usize,
    first: ConvStage,
    /// First-stage activations with the tiled label maps appended.
    joined: Vec<f64>,
    stages: Vec<ConvStage>,
    pub out: DiscOutput,
    /// `(channels, height, width)` of the label-augmented feature map.
    pub joined_shape: (usize, usize, usize),
}

pub fn dimg_forward(params: &ModelParams, x: &ImageBatch, labels: &[AgeLabel], mode: BnMode) -> Result<DimgPass> {
    let cfg = &params.config;
    check_images(cfg, x)?;
    if labels.len() != x.len() {
        return Err(shape_err!("{} images but {} labels", x.len(), labels.len()));
    }
    let p = &params.dimg;
    let batch = x.len();
    let geoms = cfg.dimg_geoms();
    let g0 = &geoms[0];
    let (mut a0, conv0) = layers::conv2d_forward(g0, batch, x.data(), p.get("conv0.w"), p.get("conv0.b"));
    layers::relu_inplace(&mut a0);

    let plane = g0.out_plane();
    let joined_c = g0.out_c + NUM_AGE_BINS;
    let mut joined = Vec::with_capacity(batch * joined_c * plane);
    for (b, label) in labels.iter().enumerate() {
        joined.extend_from_slice(&a0[b * g0.out_c * plane..][..g0.out_c * plane]);
        for v in label.values() {
            joined.extend(core::iter::repeat_n(v, plane));
        }
    }
    let first = ConvStage { conv: conv0, bn: None, act: a0 };

    let mut stages: Vec<ConvStage> = Vec::with_capacity(cfg.num_scales.saturating_sub(1));
    for (k, g) in geoms.iter().enumerate().skip(1) {
        let input = stages.last().map_or(&joined[..], |s| &s.act[..]);
        let (mut y, conv) = layers::conv2d_forward(g, batch, input, p.get(&format!("conv{k}.w")), p.get(&format!("conv{k}.b")));
        let mut bn = None;
        if cfg.use_batchnorm_dimg {
            let gamma = p.get(&format!("bn{k}.gamma"));
            let beta = p.get(&format!("bn{k}.beta"));
            y = match mode {
                BnMode::Train => {
                    let (out, cache) = layers::batchnorm_forward_train(g.out_c, batch, g.out_plane(), &y, gamma, beta);
                    bn = Some(cache);
                    out
                }
                BnMode::Eval => layers::batchnorm_forward_eval(
                    g.out_c,
                    batch,
                    g.out_plane(),
                    &y,
                    gamma,
                    beta,
                    p.buffer(&format!("bn{k}.running_mean")),
                    p.buffer(&format!("bn{k}.running_var")),
                ),
            };
        }
        layers::relu_inplace(&mut y);
        stages.push(ConvStage { conv, bn, act: y });
    }
    let last = stages.last().map_or(&joined[..], |s| &s.act[..]);
    let logits = layers::dense_forward(batch, cfg.dimg_fc_in(), 1, last, p.get("fc.w"), p.get("fc.b"));
    Ok(DimgPass {
        batch,
        first,
        joined,
        stages,
        out: DiscOutput { logits },
        joined_shape: (joined_c, g0.out_h, g0.out_w),
    })
}

/// Dimg parameter gradients (left zero unless `need_params`) and optionally `dL/dx`
/// (NCHW), given `dL/dlogits`.
///
/// Only valid for passes run in [`BnMode::Train`] when batch normalization is on.
pub fn dimg_backward(
    params: &ModelParams,
    pass: &DimgPass,
    d_logits: &[f64],
    need_params: bool,
    need_input: bool,
) -> (GroupGrads, Option<Vec<f64>>) {
    let cfg = &params.config;
    let p = &params.dimg;
    let mut grads = p.zero_grads();
    let geoms = cfg.dimg_geoms();
    let batch = pass.batch;
    let last = pass.stages.last().map_or(&pass.joined[..], |s| &s.act[..]);
    let fc = layers::dense_backward(batch, cfg.dimg_fc_in(), 1, last, p.get("fc.w"), d_logits, true);
    let mut set = |name: &str, g: Vec<f64>| {
        if need_params {
            grads.set(p, name, g);
        }
    };
    set("fc.w", fc.weight);
    set("fc.b", fc.bias);
    let mut d = fc.input.expect("requested");
    for k in (1..cfg.num_scales).rev() {
        let stage = &pass.stages[k - 1];
        let g = &geoms[k];
        layers::relu_backward_inplace(&stage.act, &mut d);
        if cfg.use_batchnorm_dimg {
            let cache = stage.bn.as_ref().expect("batch-norm backward requires a training-mode pass");
            let (dgamma, dbeta, dx) =
                layers::batchnorm_backward(g.out_c, batch, g.out_plane(), cache, p.get(&format!("bn{k}.gamma")), &d);
            set(&format!("bn{k}.gamma"), dgamma);
            set(&format!("bn{k}.beta"), dbeta);
            d = dx;
        }
        let name_w = format!("conv{k}.w");
        let lg = layers::conv2d_backward(g, batch, &stage.conv, p.get(&name_w), &d, need_params, true);
        set(&name_w, lg.weight);
        set(&format!("conv{k}.b"), lg.bias);
        d = lg.input.expect("requested");
    }
    // Drop the gradient flowing into the constant label maps.
    let g0 = &geoms[0];
    let plane = g0.out_plane();
    let joined_c = g0.out_c + NUM_AGE_BINS;
    let mut d0: Vec<f64> = (0..batch)
        .flat_map(|b| d[b * joined_c * plane..][..g0.out_c * plane].iter().copied())
        .collect();
    layers::relu_backward_inplace(&pass.first.act, &mut d0);
    let lg = layers::conv2d_backward(g0, batch, &pass.first.conv, p.get("conv0.w"), &d0, need_params, need_input);
    set("conv0.w", lg.weight);
    set("conv0.b", lg.bias);
    (grads, lg.input)
}

/// Fold a training-mode pass's batch statistics into Dimg's running averages.
pub fn update_running_stats(params: &mut ModelParams, pass: &DimgPass) {
    if !params.config.use_batchnorm_dimg {
        return;
    }
    let geoms = params.config.dimg_geoms();
    for (i, stage) in pass.stages.iter().enumerate() {
        let k = i + 1;
        let Some(cache) = &stage.bn else { continue };
        let count = (pass.batch * geoms[k].out_plane()) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let mean = params.dimg.buffer_mut(&format!("bn{k}.running_mean"));
        mean.iter_mut().zip(&cache.mean).for_each(|(r, m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        let var = params.dimg.buffer_mut(&format!("bn{k}.running_var"));
        var.iter_mut().zip(&cache.var).for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias);
    }
}

/// `Dimg(x, l)` in inference mode (running batch-norm statistics).
pub fn discriminate_img(params: &ModelParams, x: &ImageBatch, labels: &[AgeLabel]) -> Result<DiscOutput> {
    Ok(dimg_forward(params, x, labels, BnMode::Eval)?.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bin_to_label, Image};

    fn mini() -> NetworkConfig {
        NetworkConfig { image_size: 16, channels: 3, latent_dim: 6, base_filters: 8, num_scales: 2, use_batchnorm_dimg: true }
    }

    fn images(cfg: &NetworkConfig, n: usize) -> ImageBatch {
        let imgs: Vec<Image> = (0..n)
            .map(|i| {
                let len = cfg.image_len();
                let data = (0..len).map(|j| (((i * 31 + j * 17) % 97) as f64 / 48.5 - 1.0).clamp(-1.0, 1.0)).collect();
                Image::new(cfg.image_size, cfg.image_size, cfg.channels, data).unwrap()
            })
            .collect();
        ImageBatch::from_images(&imgs).unwrap()
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let bad = NetworkConfig { image_size: 12, channels: 2, latent_dim: 1, base_filters: 4, num_scales: 2, use_batchnorm_dimg: false };
        match bad.validate() {
            Err(Error::InvalidConfig(errs)) => assert_eq!(errs.len(), 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(NetworkConfig::default().validate().is_ok());
        let paper = NetworkConfig { image_size: 128, num_scales: 4, ..NetworkConfig::default() };
        assert!(paper.validate().is_ok());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = NetworkConfig::default();
        let a = init_params(&cfg, 3).unwrap();
        assert_eq!(a, init_params(&cfg, 3).unwrap());
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        for block in Block::ALL {
            for p in &a.group(block).params {
                assert!(p.tensor.is_finite());
                if p.name.ends_with(".w") {
                    assert!(p.tensor.data().iter().all(|v| v.abs() < 1.0), "{}", p.name);
                } else if p.name.ends_with(".b") {
                    assert!(p.tensor.data().iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn encoder_shapes_and_range() {
        let cfg = mini();
        let params = init_params(&cfg, 1).unwrap();
        let z = encode(&params, &images(&cfg, 4)).unwrap();
        assert_eq!((z.len(), z.dim()), (4, 6));
        assert!(z.data().iter().all(|v| v.abs() < 1.0));
        let zero = ImageBatch::from_images(&[Image::filled(16, 16, 3, 0.0)]).unwrap();
        let z0 = encode(&params, &zero).unwrap();
        assert!(z0.data().iter().all(|v| v.is_finite() && v.abs() != 1.0));
        let wrong = ImageBatch::from_images(&[Image::filled(8, 8, 3, 0.0)]).unwrap();
        assert!(matches!(encode(&params, &wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn generator_depends_on_label() {
        let cfg = mini();
        let params = init_params(&cfg, 2).unwrap();
        let z = LatentBatch::new(2, 6, vec![0.3; 12]).unwrap();
        let labels = [bin_to_label(0).unwrap(), bin_to_label(9).unwrap()];
        let out = generate(&params, &z, &labels).unwrap();
        assert_eq!(out.shape_nhwc(), [2, 16, 16, 3]);
        assert!(out.data().iter().all(|v| v.abs() < 1.0));
        assert_ne!(out.image(0), out.image(1));
        assert!(generate(&params, &z, &labels[..1]).is_err());
    }

    #[test]
    fn dz_has_no_cross_sample_coupling() {
        let cfg = mini();
        let params = init_params(&cfg, 5).unwrap();
        let mut rows = vec![0.1, -0.2, 0.3, 0.9, -0.7, 0.0];
        rows.extend_from_slice(&[0.5; 6]);
        rows.extend_from_slice(&[0.1, -0.2, 0.3, 0.9, -0.7, 0.0]);
        let out = discriminate_z(&params, &LatentBatch::new(3, 6, rows).unwrap()).unwrap();
        assert_eq!(out.logits[0], out.logits[2]);
        assert!(out.probabilities().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn dimg_tiles_labels_after_first_conv() {
        let cfg = mini();
        let params = init_params(&cfg, 6).unwrap();
        let x = images(&cfg, 2);
        let same = [bin_to_label(1).unwrap(); 2];
        let pass = dimg_forward(&params, &x, &same, BnMode::Train).unwrap();
        assert_eq!(pass.joined_shape, (cfg.base_filters + 10, 8, 8));
        let x1 = ImageBatch::from_images(&[x.image(0)]).unwrap();
        let a = discriminate_img(&params, &x1, &[bin_to_label(1).unwrap()]).unwrap();
        let b = discriminate_img(&params, &x1, &[bin_to_label(8).unwrap()]).unwrap();
        assert_ne!(a.logits, b.logits);
    }
}
