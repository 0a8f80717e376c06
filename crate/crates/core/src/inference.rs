//! Traversal of the learned face manifold with a trained E and G.
//!
//! Only the encoder and generator take part; no operation here needs the input's age.

use alloc::vec::Vec;

use crate::data::{denormalize_image, AgeLabel, Image, ImageBatch, Raster, NUM_AGE_BINS};
use crate::error::{invalid, Result};
use crate::math;
use crate::networks::{self, LatentBatch, ModelParams};

/// Width in pixels of the black border between grid tiles.
pub const GRID_BORDER: usize = 2;

fn encode_one(params: &ModelParams, x: &Image) -> Result<Vec<f64>> {
    let z = networks::encode(params, &ImageBatch::from_images(core::slice::from_ref(x))?)?;
    Ok(z.row(0).to_vec())
}

fn generate_one(params: &ModelParams, code: &[f64], label: AgeLabel) -> Result<Image> {
    let z = LatentBatch::new(1, code.len(), code.to_vec())?;
    Ok(networks::generate(params, &z, &[label])?.image(0))
}

/// `G(E(x), l)`.
pub fn reconstruct(params: &ModelParams, x: &Image, label: AgeLabel) -> Result<Image> {
    generate_one(params, &encode_one(params, x)?, label)
}

/// One face rendered at every age bin from a single latent code.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub source: Image,
    pub code: Vec<f64>,
    /// Ordered by bin, youngest first.
    pub outputs: Vec<Image>,
}

/// Encode `x` once and generate it under each of the ten age labels.
pub fn age_sweep(params: &ModelParams, x: &Image) -> Result<SweepResult> {
    let code = encode_one(params, x)?;
    let rows: Vec<&[f64]> = (0..NUM_AGE_BINS).map(|_| &code[..]).collect();
    let z = LatentBatch::from_rows(code.len(), &rows)?;
    let labels: Vec<AgeLabel> = AgeLabel::all().collect();
    let outputs = networks::generate(params, &z, &labels)?.images();
    Ok(SweepResult { source: x.clone(), code, outputs })
}

/// Frames generated along the straight line between two faces' codes.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphSequence {
    pub frames: Vec<Image>,
    pub endpoints: (Vec<f64>, Vec<f64>),
    pub label: AgeLabel,
}

impl MorphSequence {
    /// Mean root-mean-square pixel change between consecutive frames.
    pub fn step_rms(&self) -> f64 {
        if self.frames.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .frames
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].pixels(), w[1].pixels());
                let ss: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                math::sqrt(ss / a.len() as f64)
            })
            .sum();
        total / (self.frames.len() - 1) as f64
    }
}

/// Frame `k` is `G((1 - t)·z1 + t·z2, l)` with `t = k / (steps - 1)`.
pub fn interpolate(params: &ModelParams, x1: &Image, x2: &Image, label: AgeLabel, steps: usize) -> Result<MorphSequence> {
    if steps < 2 {
        return Err(invalid!("interpolation needs at least 2 steps, got {steps}"));
    }
    let z1 = encode_one(params, x1)?;
    let z2 = encode_one(params, x2)?;
    let last = (steps - 1) as f64;
    let frames = (0..steps)
        .map(|k| {
            // Weights written symmetrically so swapping the endpoints reverses frames exactly;
            // shared coordinates are copied so identical inputs give identical frames.
            let (w1, w2) = ((steps - 1 - k) as f64 / last, k as f64 / last);
            let z: Vec<f64> = z1.iter().zip(&z2).map(|(&a, &b)| if a == b { a } else { w1 * a + w2 * b }).collect();
            generate_one(params, &z, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MorphSequence { frames, endpoints: (z1, z2), label })
}

/// Tile `rows × cols` equally sized images with a black border.
pub fn tile(images: &[Image], cols: usize) -> Result<Raster> {
    let first = images.first().ok_or_else(|| invalid!("nothing to tile"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let rows = images.len().div_ceil(cols);
    let mut grid = Raster::new(rows * h + (rows + 1) * GRID_BORDER, cols * w + (cols + 1) * GRID_BORDER, c);
    for (i, img) in images.iter().enumerate() {
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(invalid!("tile {i} has a different shape"));
        }
        let (r, col) = (i / cols, i % cols);
        let top = GRID_BORDER + r * (h + GRID_BORDER);
        let left = GRID_BORDER + col * (w + GRID_BORDER);
        let px = denormalize_image(img);
        for y in 0..h {
            let dst = ((top + y) * grid.width + left) * c;
            grid.data[dst..dst + w * c].copy_from_slice(&px.data[y * w * c..(y + 1) * w * c]);
        }
    }
    Ok(grid)
}

/// Age sweeps of several faces stacked into a `faces × 10` 8-bit grid.
pub fn manifold_grid(params: &ModelParams, faces: &[Image]) -> Result<Raster> {
    if faces.is_empty() {
        return Err(invalid!("manifold grid needs at least one face"));
    }
    let mut tiles = Vec::with_capacity(faces.len() * NUM_AGE_BINS);
    for face in faces {
        tiles.extend(age_sweep(params, face)?.outputs);
    }
    tile(&tiles, NUM_AGE_BINS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bin_to_label, synth_faces};
    use crate::networks::{init_params, NetworkConfig};

    fn setup() -> (ModelParams, Vec<Image>) {
        let cfg = NetworkConfig { image_size: 16, channels: 1, latent_dim: 4, base_filters: 8, num_scales: 2, use_batchnorm_dimg: true };
        let faces = synth_faces(3, 16, 5).unwrap().into_iter().map(|(i, _)| i).collect();
        (init_params(&cfg, 11).unwrap(), faces)
    }

    #[test]
    fn sweep_shares_one_code() {
        let (p, faces) = setup();
        let sweep = age_sweep(&p, &faces[0]).unwrap();
        assert_eq!(sweep.outputs.len(), 10);
        for (bin, out) in sweep.outputs.iter().enumerate() {
            let single = generate_one(&p, &sweep.code, bin_to_label(bin).unwrap()).unwrap();
            assert_eq!(&single, out);
        }
    }

    #[test]
    fn interpolation_endpoints_and_symmetry() {
        let (p, faces) = setup();
        let l = bin_to_label(4).unwrap();
        let m = interpolate(&p, &faces[0], &faces[1], l, 5).unwrap();
        assert_eq!(m.frames.len(), 5);
        assert_eq!(m.frames[0], generate_one(&p, &m.endpoints.0, l).unwrap());
        assert_eq!(m.frames[4], generate_one(&p, &m.endpoints.1, l).unwrap());
        let rev = interpolate(&p, &faces[1], &faces[0], l, 5).unwrap();
        let mut back = rev.frames.clone();
        back.reverse();
        assert_eq!(back, m.frames);
        let same = interpolate(&p, &faces[2], &faces[2], l, 4).unwrap();
        assert!(same.frames.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(same.step_rms(), 0.0);
        assert!(interpolate(&p, &faces[0], &faces[1], l, 1).is_err());
    }

    #[test]
    fn grid_dimensions() {
        let (p, faces) = setup();
        let g = manifold_grid(&p, &faces[..2]).unwrap();
        assert_eq!((g.height, g.width), (2 * 16 + 3 * 2, 10 * 16 + 11 * 2));
        assert!(manifold_grid(&p, &[]).is_err());
    }
}
