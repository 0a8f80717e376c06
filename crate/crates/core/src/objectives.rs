//! Loss terms of the CAAE objective and their gradients.
//!
//! The full E/G objective is
//! `λ·recon(x, x̂) + γ·TV(x̂) + adv_g(Dz(E(x))) + adv_g(Dimg(x̂, l))`
//! with `x̂ = G(E(x), l)`. Both discriminators minimize the logistic loss
//! [`adversarial_d_loss`]. Everything adversarial is computed from logits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{shape_err, Error, Result};
use crate::math::{sigmoid, softplus};

/// Weights of the reconstruction (`lambda`) and total-variation (`gamma`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 100.0, gamma: 10.0 }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("weights.{name} must be finite and non-negative, got {v}"));
            }
        }
        errs
    }
}

/// Which E/G adversarial term to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `-log D(fake)`.
    #[default]
    NonSaturating,
    /// `log(1 - D(fake))`, the literal min-max form.
    Saturating,
}

/// Per-step values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub tv: f64,
    pub e_adv: f64,
    pub g_adv: f64,
    pub dz_loss: f64,
    pub dimg_loss: f64,
    pub eg_total: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 7] = ["recon", "tv", "e_adv", "g_adv", "dz_loss", "dimg_loss", "eg_total"];

    pub fn values(&self) -> [f64; 7] {
        [self.recon, self.tv, self.e_adv, self.g_adv, self.dz_loss, self.dimg_loss, self.eg_total]
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::COLUMNS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

fn check_same(x: &ImageBatch, y: &ImageBatch) -> Result<()> {
    if x.shape_nhwc() != y.shape_nhwc() {
        return Err(shape_err!("{:?} vs {:?}", x.shape_nhwc(), y.shape_nhwc()));
    }
    Ok(())
}

/// Mean squared error over every element of the batch.
pub fn recon_loss(x: &ImageBatch, x_hat: &ImageBatch) -> Result<f64> {
    check_same(x, x_hat)?;
    Ok(mse(x.data(), x_hat.data()))
}

/// [`recon_loss`] and its gradient with respect to `x_hat`.
pub fn recon_loss_grad(x: &ImageBatch, x_hat: &ImageBatch) -> Result<(f64, Vec<f64>)> {
    check_same(x, x_hat)?;
    let n = x.data().len() as f64;
    let grad = x_hat.data().iter().zip(x.data()).map(|(h, t)| 2.0 * (h - t) / n).collect();
    Ok((mse(x.data(), x_hat.data()), grad))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

/// Anisotropic total variation: the mean absolute vertical forward difference plus
/// the mean absolute horizontal forward difference, each averaged over its valid
/// positions in every image and channel.
pub fn tv_loss(x_hat: &ImageBatch) -> Result<f64> {
    Ok(tv_impl(x_hat, false)?.0)
}

/// [`tv_loss`] and its (sub)gradient; `sign(0)` is taken as 0.
pub fn tv_loss_grad(x_hat: &ImageBatch) -> Result<(f64, Vec<f64>)> {
    let (v, g) = tv_impl(x_hat, true)?;
    Ok((v, g.expect("requested")))
}

fn tv_impl(x: &ImageBatch, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let (h, w) = (x.height(), x.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("total variation needs at least 2x2 images, got {h}x{w}")));
    }
    let planes = x.len() * x.channels();
    let n_vert = (planes * (h - 1) * w) as f64;
    let n_horiz = (planes * h * (w - 1)) as f64;
    let data = x.data();
    let mut grad = want_grad.then(|| vec![0.0; data.len()]);
    let (mut vert, mut horiz) = (0.0, 0.0);
    for p in 0..planes {
        let off = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let idx = off + i * w + j;
                if i + 1 < h {
                    let d = data[idx + w] - data[idx];
                    vert += d.abs();
                    if let Some(g) = grad.as_mut() {
                        let s = sign(d) / n_vert;
                        g[idx + w] += s;
                        g[idx] -= s;
                    }
                }
                if j + 1 < w {
                    let d = data[idx + 1] - data[idx];
                    horiz += d.abs();
                    if let Some(g) = grad.as_mut() {
                        let s = sign(d) / n_horiz;
                        g[idx + 1] += s;
                        g[idx] -= s;
                    }
                }
            }
        }
    }
    Ok((vert / n_vert + horiz / n_horiz, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Discriminator loss `-mean log σ(real) - mean log(1 - σ(fake))`.
pub fn adversarial_d_loss(real_logits: &[f64], fake_logits: &[f64]) -> Result<f64> {
    if real_logits.len() != fake_logits.len() || real_logits.is_empty() {
        return Err(shape_err!("{} real logits vs {} fake logits", real_logits.len(), fake_logits.len()));
    }
    Ok(mean(real_logits.iter().map(|&r| softplus(-r)), real_logits.len())
        + mean(fake_logits.iter().map(|&f| softplus(f)), fake_logits.len()))
}

/// [`adversarial_d_loss`] with gradients for the real and fake logits.
pub fn adversarial_d_loss_grad(real_logits: &[f64], fake_logits: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let loss = adversarial_d_loss(real_logits, fake_logits)?;
    let n = real_logits.len() as f64;
    let dr = real_logits.iter().map(|&r| -sigmoid(-r) / n).collect();
    let df = fake_logits.iter().map(|&f| sigmoid(f) / n).collect();
    Ok((loss, dr, df))
}

/// Non-saturating E/G loss `-mean log σ(fake)`.
pub fn adversarial_g_loss(fake_logits: &[f64]) -> f64 {
    generator_adv_loss(fake_logits, GeneratorLoss::NonSaturating)
}

pub fn generator_adv_loss(fake_logits: &[f64], form: GeneratorLoss) -> f64 {
    let n = fake_logits.len();
    match form {
        GeneratorLoss::NonSaturating => mean(fake_logits.iter().map(|&f| softplus(-f)), n),
        GeneratorLoss::Saturating => -mean(fake_logits.iter().map(|&f| softplus(f)), n),
    }
}

pub fn generator_adv_loss_grad(fake_logits: &[f64], form: GeneratorLoss) -> (f64, Vec<f64>) {
    let n = fake_logits.len() as f64;
    let grad = match form {
        GeneratorLoss::NonSaturating => fake_logits.iter().map(|&f| -sigmoid(-f) / n).collect(),
        GeneratorLoss::Saturating => fake_logits.iter().map(|&f| -sigmoid(f) / n).collect(),
    };
    (generator_adv_loss(fake_logits, form), grad)
}

/// Gradients of [`eg_total_loss`] with respect to its network outputs.
#[derive(Debug, Clone)]
pub struct EgGrads {
    pub x_hat: Vec<f64>,
    pub dz_logits: Option<Vec<f64>>,
    pub dimg_logits: Option<Vec<f64>>,
}

/// `λ·recon + γ·TV + adv(Dz fake) + adv(Dimg fake)`; an absent logit set contributes 0.
pub fn eg_total_loss(
    x: &ImageBatch,
    x_hat: &ImageBatch,
    dz_fake_logits: Option<&[f64]>,
    dimg_fake_logits: Option<&[f64]>,
    weights: &LossWeights,
    form: GeneratorLoss,
) -> Result<(f64, LossReport)> {
    let (total, report, _) = eg_total_loss_grad(x, x_hat, dz_fake_logits, dimg_fake_logits, weights, form)?;
    Ok((total, report))
}

pub fn eg_total_loss_grad(
    x: &ImageBatch,
    x_hat: &ImageBatch,
    dz_fake_logits: Option<&[f64]>,
    dimg_fake_logits: Option<&[f64]>,
    weights: &LossWeights,
    form: GeneratorLoss,
) -> Result<(f64, LossReport, EgGrads)> {
    let (recon, g_recon) = recon_loss_grad(x, x_hat)?;
    let (tv, g_tv) = tv_loss_grad(x_hat)?;
    let grad: Vec<f64> = g_recon.iter().zip(&g_tv).map(|(r, t)| weights.lambda * r + weights.gamma * t).collect();
    let dz = dz_fake_logits.map(|l| generator_adv_loss_grad(l, form));
    let dimg = dimg_fake_logits.map(|l| generator_adv_loss_grad(l, form));
    let e_adv = dz.as_ref().map_or(0.0, |d| d.0);
    let g_adv = dimg.as_ref().map_or(0.0, |d| d.0);
    let total = weights.lambda * recon + weights.gamma * tv + e_adv + g_adv;
    let report = LossReport { recon, tv, e_adv, g_adv, dz_loss: 0.0, dimg_loss: 0.0, eg_total: total };
    Ok((total, report, EgGrads { x_hat: grad, dz_logits: dz.map(|d| d.1), dimg_logits: dimg.map(|d| d.1) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    fn batch(h: usize, w: usize, data: Vec<f64>) -> ImageBatch {
        ImageBatch::from_nchw(1, 1, h, w, data).unwrap()
    }

    #[test]
    fn recon_examples() {
        let x = batch(2, 2, vec![-1.0; 4]);
        let y = batch(2, 2, vec![1.0; 4]);
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_loss(&x, &y).unwrap(), 4.0);
        let a = ImageBatch::from_nchw(1, 1, 1, 2, vec![0.0, 0.5]).unwrap();
        let b = ImageBatch::from_nchw(1, 1, 1, 2, vec![0.5, 0.5]).unwrap();
        assert!((recon_loss(&a, &b).unwrap() - 0.125).abs() < 1e-15);
        assert!(recon_loss(&a, &x).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&batch(3, 3, vec![0.4; 9])).unwrap(), 0.0);
        assert_eq!(tv_loss(&batch(2, 2, vec![0.0, 1.0, 0.0, 1.0])).unwrap(), 1.0);
        assert!(tv_loss(&batch(1, 4, vec![0.0; 4])).is_err());
    }

    #[test]
    fn adversarial_examples() {
        assert!((adversarial_d_loss(&[0.0; 3], &[0.0; 3]).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert!(adversarial_d_loss(&[1e3], &[-1e3]).unwrap() < 1e-12);
        assert!((adversarial_d_loss(&[2.0], &[-1.0]).unwrap() - 0.4402).abs() < 5e-5);
        assert!((adversarial_g_loss(&[0.0, 0.0]) - LN_2).abs() < 1e-12);
        assert!(adversarial_g_loss(&[1e3]) < 1e-12);
        assert!((adversarial_g_loss(&[-1.0]) - 1.3133).abs() < 5e-5);
        assert!(adversarial_d_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn saturating_form_is_log_one_minus_d() {
        // log(1 - σ(0)) = -ln 2
        assert!((generator_adv_loss(&[0.0], GeneratorLoss::Saturating) + LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_composes_the_terms() {
        let x = batch(2, 2, vec![0.25; 4]);
        let (total, report) = eg_total_loss(&x, &x, Some(&[0.0]), Some(&[0.0]), &LossWeights::default(), GeneratorLoss::NonSaturating).unwrap();
        assert!((total - 2.0 * LN_2).abs() < 1e-12);
        assert_eq!((report.recon, report.tv), (0.0, 0.0));
        let (ablated, r) = eg_total_loss(&x, &x, None, None, &LossWeights::default(), GeneratorLoss::NonSaturating).unwrap();
        assert_eq!((ablated, r.e_adv, r.g_adv), (0.0, 0.0, 0.0));
    }
}
