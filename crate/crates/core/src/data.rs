//! Age and pixel encodings, batching, and the procedural face dataset.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::math;

pub const NUM_AGE_BINS: usize = 10;

/// Inclusive `(low, high)` years of each age bin. Ages above the last bin clamp into it.
pub const AGE_BINS: [(u32, u32); NUM_AGE_BINS] = [
    (0, 5),
    (6, 10),
    (11, 15),
    (16, 20),
    (21, 30),
    (31, 40),
    (41, 50),
    (51, 60),
    (61, 70),
    (71, 80),
];

/// Bin index for an age in years. Fractional ages bin by their floor.
pub fn age_to_bin(age_years: f64) -> Result<usize> {
    if !(age_years >= 0.0) {
        return Err(invalid!("age must be a non-negative number, got {age_years}"));
    }
    let years = math::floor(age_years);
    Ok(AGE_BINS
        .iter()
        .position(|&(_, high)| years <= f64::from(high))
        .unwrap_or(NUM_AGE_BINS - 1))
}

/// Ten-element age code with `+1` at the active bin and `-1` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeLabel {
    bin: u8,
}

impl AgeLabel {
    pub fn bin(&self) -> usize {
        usize::from(self.bin)
    }

    pub fn values(&self) -> [f64; NUM_AGE_BINS] {
        let mut v = [-1.0; NUM_AGE_BINS];
        v[self.bin()] = 1.0;
        v
    }

    pub fn from_age(age_years: f64) -> Result<Self> {
        bin_to_label(age_to_bin(age_years)?)
    }

    /// Every bin in ascending order.
    pub fn all() -> impl Iterator<Item = AgeLabel> {
        (0..NUM_AGE_BINS as u8).map(|bin| AgeLabel { bin })
    }
}

pub fn bin_to_label(bin_index: usize) -> Result<AgeLabel> {
    if bin_index >= NUM_AGE_BINS {
        return Err(invalid!("age bin {bin_index} out of range 0..{NUM_AGE_BINS}"));
    }
    Ok(AgeLabel { bin: bin_index as u8 })
}

/// 8-bit raster, row-major `height × width × channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0; height * width * channels] }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// A face image with values in `[-1, 1]`, stored row-major `height × width × channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!("{} values for a {height}x{width}x{channels} image", data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(invalid!("pixel value {v} outside [-1, 1]"));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value.clamp(-1.0, 1.0); height * width * channels] }
    }

    pub fn from_raster(raster: &Raster) -> Self {
        Self {
            height: raster.height,
            width: raster.width,
            channels: raster.channels,
            data: raster.data.iter().map(|&v| f64::from(v) / 127.5 - 1.0).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel mean at `(y, x)`.
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        let px = &self.data[(y * self.width + x) * self.channels..][..self.channels];
        px.iter().sum::<f64>() / self.channels as f64
    }

    /// Horizontal mirror.
    pub fn flipped(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.data[(y * self.width + x) * self.channels..][..self.channels]);
            }
        }
        Image { data, ..*self }
    }
}

/// Map raw intensities in `[0, 255]` to `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize_image(height: usize, width: usize, channels: usize, raw: &[f64]) -> Result<Image> {
    if raw.len() != height * width * channels {
        return Err(shape_err!("{} values for a {height}x{width}x{channels} image", raw.len()));
    }
    if let Some(v) = raw.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(invalid!("raw intensity {v} outside [0, 255]"));
    }
    Ok(Image { height, width, channels, data: raw.iter().map(|v| v / 127.5 - 1.0).collect() })
}

/// Inverse of [`normalize_image`] with round-half-up and clamping to `[0, 255]`.
pub fn denormalize_image(img: &Image) -> Raster {
    Raster {
        height: img.height,
        width: img.width,
        channels: img.channels,
        data: img.data.iter().map(|&v| denormalize_value(v)).collect(),
    }
}

#[inline]
pub fn denormalize_value(v: f64) -> u8 {
    let scaled = math::floor((v + 1.0) * 127.5 + 0.5);
    if scaled.is_nan() {
        return 0;
    }
    scaled.clamp(0.0, 255.0) as u8
}

/// Images laid out `batch × channels × height × width` for the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| invalid!("empty image batch"))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let plane = h * w;
        let mut data = vec![0.0; images.len() * c * plane];
        for (b, img) in images.iter().enumerate() {
            if (img.height, img.width, img.channels) != (h, w, c) {
                return Err(shape_err!(
                    "image {b} is {}x{}x{}, expected {h}x{w}x{c}",
                    img.height,
                    img.width,
                    img.channels
                ));
            }
            for (i, px) in img.data.chunks_exact(c).enumerate() {
                for (ch, v) in px.iter().enumerate() {
                    data[(b * c + ch) * plane + i] = *v;
                }
            }
        }
        Ok(Self { batch: images.len(), channels: c, height: h, width: w, data })
    }

    /// Wraps NCHW data without range checks (network outputs, gradients).
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * channels * height * width {
            return Err(shape_err!("{} values for a {batch}x{channels}x{height}x{width} batch", data.len()));
        }
        Ok(Self { batch, channels, height, width, data })
    }

    pub fn image(&self, index: usize) -> Image {
        let plane = self.height * self.width;
        let mut data = vec![0.0; plane * self.channels];
        for c in 0..self.channels {
            let src = &self.data[(index * self.channels + c) * plane..][..plane];
            for (i, v) in src.iter().enumerate() {
                data[i * self.channels + c] = *v;
            }
        }
        Image { height: self.height, width: self.width, channels: self.channels, data }
    }

    pub fn images(&self) -> Vec<Image> {
        (0..self.batch).map(|i| self.image(i)).collect()
    }

    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(batch, height, width, channels)`.
    pub fn shape_nhwc(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Flatten labels into a `batch × 10` matrix of `±1`.
pub fn label_matrix(labels: &[AgeLabel]) -> Vec<f64> {
    labels.iter().flat_map(|l| l.values()).collect()
}

/// One training sample: an image and the label of its true age.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: AgeLabel,
}

/// Images paired row-wise with their age labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: ImageBatch,
    pub labels: Vec<AgeLabel>,
}

impl Batch {
    pub fn new(images: ImageBatch, labels: Vec<AgeLabel>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(shape_err!("{} images but {} labels", images.len(), labels.len()));
        }
        Ok(Self { images, labels })
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Self> {
        let (images, labels): (Vec<Image>, Vec<AgeLabel>) =
            samples.into_iter().map(|s| (s.image.clone(), s.label)).unzip();
        Self::new(ImageBatch::from_images(&images)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-epoch shuffled index batches; the trailing partial batch is dropped.
pub fn batch_order(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    if len == 0 {
        return Err(invalid!("cannot batch an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    batch_order(samples.len(), batch_size, seed, epoch)?
        .into_iter()
        .map(|idx| Batch::from_samples(idx.iter().map(|&i| &samples[i])))
        .collect()
}

// Gray levels of the procedural faces.
pub(crate) const BACKGROUND: u8 = 20;
pub(crate) const SKIN: u8 = 210;
pub(crate) const WRINKLE: u8 = 90;
pub(crate) const FEATURE: u8 = 20;
/// Fraction of the head's half-width at which wrinkle scanlines run; clear of eyes and mouth.
pub(crate) const SCAN_OFFSET: f64 = 0.55;
/// Wrinkles occupy `cy ± WRINKLE_BAND · b`.
const WRINKLE_BAND: f64 = 0.72;

/// Procedural grayscale faces whose age bin `b` is drawn as exactly `b` horizontal
/// wrinkle stripes across the head. Bins are balanced (`count / 10` each, remainder
/// spread over the lowest bins) and shuffled; head position and size jitter per sample.
pub fn synth_faces(count: usize, image_size: usize, seed: u64) -> Result<Vec<(Image, f64)>> {
    if count == 0 {
        return Err(invalid!("count must be positive"));
    }
    if image_size == 0 || image_size % 16 != 0 {
        return Err(invalid!("image size {image_size} must be a positive multiple of 16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bins: Vec<usize> = (0..count).map(|i| i % NUM_AGE_BINS).collect();
    bins.shuffle(&mut rng);
    Ok(bins
        .into_iter()
        .map(|bin| {
            let (low, high) = AGE_BINS[bin];
            let age = f64::from(rng.gen_range(low..=high));
            let face = FaceGeometry::sample(&mut rng, image_size as f64 / 64.0);
            (Image::from_raster(&face.render(image_size, bin)), age)
        })
        .collect())
}

struct FaceGeometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    scale: f64,
}

impl FaceGeometry {
    fn sample(rng: &mut ChaCha8Rng, scale: f64) -> Self {
        Self {
            cx: (32.0 + rng.gen_range(-2.0..=2.0)) * scale,
            cy: (32.0 + rng.gen_range(-2.0..=2.0)) * scale,
            a: (21.0 + rng.gen_range(-1.5..=1.5)) * scale,
            b: (26.0 + rng.gen_range(-1.5..=1.5)) * scale,
            scale,
        }
    }

    fn render(&self, size: usize, stripes: usize) -> Raster {
        let mut r = Raster::new(size, size, 1);
        let band_top = self.cy - WRINKLE_BAND * self.b;
        let spacing = 2.0 * WRINKLE_BAND * self.b / stripes.max(1) as f64;
        let half_thick = self.scale;
        let eye_r2 = (2.5 * self.scale) * (2.5 * self.scale);
        let eye_y = self.cy - 0.25 * self.b;
        let mouth_y = self.cy + 0.5 * self.b;
        for y in 0..size {
            let py = y as f64 + 0.5;
            for x in 0..size {
                let px = x as f64 + 0.5;
                let (dx, dy) = ((px - self.cx) / self.a, (py - self.cy) / self.b);
                let mut v = BACKGROUND;
                if dx * dx + dy * dy <= 1.0 {
                    v = SKIN;
                    let stripe = (0..stripes).any(|k| {
                        let centre = band_top + (k as f64 + 0.5) * spacing;
                        (py - centre).abs() < half_thick
                    });
                    if stripe {
                        v = WRINKLE;
                    }
                    let eye = [-1.0, 1.0].iter().any(|side| {
                        let ex = px - (self.cx + side * 0.3 * self.a);
                        let ey = py - eye_y;
                        ex * ex + ey * ey <= eye_r2
                    });
                    let mouth = (px - self.cx).abs() <= 0.25 * self.a && (py - mouth_y).abs() <= 1.5 * self.scale;
                    if eye || mouth {
                        v = FEATURE;
                    }
                }
                r.set(y, x, 0, v);
            }
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_bins_follow_the_listed_ranges() {
        assert_eq!(age_to_bin(3.0).unwrap(), 0);
        assert_eq!(age_to_bin(20.0).unwrap(), 3);
        assert_eq!(age_to_bin(95.0).unwrap(), 9);
        assert_eq!(age_to_bin(5.9).unwrap(), 0);
        assert_eq!(age_to_bin(6.0).unwrap(), 1);
        assert_eq!(age_to_bin(80.5).unwrap(), 9);
        assert!(age_to_bin(-0.5).is_err());
        assert!(age_to_bin(f64::NAN).is_err());
    }

    #[test]
    fn labels_are_signed_one_hot() {
        assert_eq!(bin_to_label(0).unwrap().values(), [1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0]);
        let last = bin_to_label(9).unwrap().values();
        assert_eq!(last[9], 1.0);
        assert!(last[..9].iter().all(|&v| v == -1.0));
        assert!(bin_to_label(10).is_err());
        for l in AgeLabel::all() {
            assert_eq!(l.values().iter().sum::<f64>(), -8.0);
        }
    }

    #[test]
    fn normalization_endpoints() {
        let img = normalize_image(1, 3, 1, &[0.0, 255.0, 127.5]).unwrap();
        assert_eq!(img.pixels(), &[-1.0, 1.0, 0.0]);
        assert!(normalize_image(1, 1, 1, &[256.0]).is_err());
        assert!(normalize_image(1, 1, 1, &[-1.0]).is_err());
        let raw = denormalize_image(&Image::new(1, 3, 1, vec![-1.0, 1.0, 0.0]).unwrap());
        assert_eq!(raw.data, vec![0, 255, 128]);
    }

    #[test]
    fn batch_layout_round_trips_images() {
        let a = Image::new(2, 2, 3, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let b = Image::filled(2, 2, 3, -0.5);
        let batch = ImageBatch::from_images(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.shape_nhwc(), [2, 2, 2, 3]);
        assert_eq!(batch.image(0), a);
        assert_eq!(batch.image(1), b);
        assert!(ImageBatch::from_images(&[a, Image::filled(2, 2, 1, 0.0)]).is_err());
    }

    #[test]
    fn batches_drop_the_short_tail() {
        let order = batch_order(250, 100, 7, 0).unwrap();
        assert_eq!(order.len(), 2);
        assert_eq!(order, batch_order(250, 100, 7, 0).unwrap());
        assert_ne!(order, batch_order(250, 100, 7, 1).unwrap());
        assert!(batch_order(0, 10, 0, 0).is_err());
        assert!(batch_order(10, 0, 0, 0).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_faces(10, 64, 1).unwrap();
        let b = synth_faces(10, 64, 1).unwrap();
        assert_eq!(a, b);
        let mut bins: Vec<usize> = a.iter().map(|(_, age)| age_to_bin(*age).unwrap()).collect();
        bins.sort_unstable();
        assert_eq!(bins, (0..10).collect::<Vec<_>>());
        assert!(synth_faces(0, 64, 1).is_err());
        assert!(synth_faces(4, 60, 1).is_err());
    }
}
