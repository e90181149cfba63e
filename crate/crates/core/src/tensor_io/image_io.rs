use std::path::Path;

use image::{DynamicImage, ImageReader, Rgb};

use super::LabelMap;
use crate::error::{Error, Result};

pub type RgbImage = image::RgbImage;

pub const DEFAULT_PALETTE_SEED: u64 = 0x5ee_d0fc_1a55;

/// Loads an 8-bit PNG or a binary PPM (P6) as RGB. Gray and alpha variants
/// are expanded or dropped; anything deeper than 8 bits is refused.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match decoded {
        DynamicImage::ImageRgb8(img) => Ok(img),
        img @ (DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_)) => {
            Ok(img.to_rgb8())
        }
        other => Err(Error::Format(format!(
            "{}: unsupported pixel format {:?}, expected 8 bits per channel",
            path.display(),
            other.color()
        ))),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Fixed color for a class index.
pub fn palette_color(class: u32, seed: u64) -> [u8; 3] {
    let h = splitmix64(u64::from(class) ^ seed);
    [(h >> 16) as u8, (h >> 24) as u8, (h >> 32) as u8]
}

/// Blends each labeled pixel 50/50 with its class color; ignore pixels pass
/// through untouched.
pub fn blend_overlay(image: &RgbImage, labels: &LabelMap, seed: u64) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if (h as usize, w as usize) != (labels.height, labels.width) {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but label map is {}x{}",
            labels.height, labels.width
        )));
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let label = labels.get(y as usize, x as usize);
        if label == labels.ignore_value {
            continue;
        }
        let color = palette_color(label, seed);
        let Rgb(c) = *px;
        *px = Rgb([0, 1, 2].map(|k| (u16::from(c[k]) + u16::from(color[k])).div_ceil(2) as u8));
    }
    Ok(out)
}

pub fn save_overlay(image: &RgbImage, labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let out = blend_overlay(image, labels, DEFAULT_PALETTE_SEED)?;
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
