//! PNG/JPEG decoding into normalized images and PNG encoding of 8-bit rasters.

use std::path::Path;

use caae_core::data::{denormalize_image, normalize_image, Image, Raster};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, IoContext, Result};

/// Decode `path` as a `size × size` image with `channels` (1 or 3) channels.
///
/// Colour is converted as needed. Inputs are expected to be pre-cropped squares;
/// square images of another size are resized with a triangle filter.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::Io { path: path.to_path_buf(), source: e },
        source => Error::Image { path: path.to_path_buf(), source },
    })?;
    from_dynamic(img, size, channels).map_err(|msg| Error::invalid(format!("{}: {msg}", path.display())))
}

fn from_dynamic(img: DynamicImage, size: usize, channels: usize) -> std::result::Result<Image, String> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(format!("expected a square image, got {w}x{h}"));
    }
    let img = if w == size { img } else { img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle) };
    let raw: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(f64::from).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(f64::from).collect(),
        c => return Err(format!("unsupported channel count {c}")),
    };
    normalize_image(size, size, channels, &raw).map_err(|e| e.to_string())
}

pub fn save_raster(raster: &Raster, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let (w, h) = (raster.width as u32, raster.height as u32);
    let result = match raster.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raster.data.clone()).expect("raster size").save(path),
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raster.data.clone()).expect("raster size").save(path),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    result.map_err(|source| match source {
        image::ImageError::IoError(e) => Error::Io { path: path.to_path_buf(), source: e },
        source => Error::Image { path: path.to_path_buf(), source },
    })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    save_raster(&denormalize_image(img), path)
}

/// Replicate or average channels so `img` has `channels` channels.
pub fn with_channels(img: &Image, channels: usize) -> Image {
    if img.channels() == channels {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let data: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .flat_map(|(y, x)| {
            let v = img.luma(y, x);
            std::iter::repeat_n(v, channels)
        })
        .collect();
    Image::new(h, w, channels, data).expect("values stay in range")
}
