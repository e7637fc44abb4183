//! Pixel <-> latent mapping for the toy backend.
//!
//! Each latent cell covers an `8 x 8` pixel block. Channels 0-2 hold the
//! block's mean R, G, B scaled to `[-1, 1]`; any further channel holds the
//! block's mean luma. Decoding repeats channels 0-2 over the block.

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::mask::{resize_mask, BinaryMask};

pub const DOWNSCALE: usize = 8;

fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

fn encode_with(img: &RgbImage, channels: usize, keep: impl Fn(usize, usize) -> bool) -> Result<Latent> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w % DOWNSCALE != 0 || h % DOWNSCALE != 0 || w == 0 || h == 0 {
        return Err(Error::invalid(format!(
            "image dimensions must be positive multiples of {DOWNSCALE}, got {w}x{h}"
        )));
    }
    let (lh, lw) = (h / DOWNSCALE, w / DOWNSCALE);
    let mut out = Latent::zeros(channels, lh, lw);
    let area = (DOWNSCALE * DOWNSCALE) as f64;
    for i in 0..lh {
        for j in 0..lw {
            let mut acc = [0.0f64; 4];
            for y in i * DOWNSCALE..(i + 1) * DOWNSCALE {
                for x in j * DOWNSCALE..(j + 1) * DOWNSCALE {
                    if !keep(y, x) {
                        continue;
                    }
                    let p = img.get_pixel(x as u32, y as u32).0;
                    let rgb = [to_unit(p[0]), to_unit(p[1]), to_unit(p[2])];
                    acc[0] += rgb[0];
                    acc[1] += rgb[1];
                    acc[2] += rgb[2];
                    acc[3] += 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                }
            }
            for c in 0..channels {
                out.data[[c, i, j]] = acc[c.min(3)] / area;
            }
        }
    }
    Ok(out)
}

pub fn encode_image(img: &RgbImage, channels: usize) -> Result<Latent> {
    encode_with(img, channels, |_, _| true)
}

/// Encodes the image with masked pixels set to mid-grey (0 in latent units).
pub fn masked_image_latent(img: &RgbImage, mask: &BinaryMask, channels: usize) -> Result<Latent> {
    if (img.height() as usize, img.width() as usize) != mask.resolution() {
        return Err(Error::invalid("image and mask sizes differ"));
    }
    encode_with(img, channels, |y, x| !mask.get(y, x))
}

/// The mask resized to the latent grid, as a one-channel 0/1 latent.
pub fn mask_latent(mask: &BinaryMask, height: usize, width: usize) -> Result<(BinaryMask, Latent)> {
    let small = resize_mask(mask, (height, width))?;
    let mut lat = Latent::zeros(1, height, width);
    for i in 0..height {
        for j in 0..width {
            lat.data[[0, i, j]] = if small.get(i, j) { 1.0 } else { 0.0 };
        }
    }
    Ok((small, lat))
}

pub fn decode_latent(latent: &Latent) -> RgbImage {
    let (c, h, w) = latent.shape();
    RgbImage::from_fn((w * DOWNSCALE) as u32, (h * DOWNSCALE) as u32, |x, y| {
        let (i, j) = (y as usize / DOWNSCALE, x as usize / DOWNSCALE);
        let px = |ch: usize| {
            let v = latent.data[[ch.min(c - 1), i, j]];
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}
