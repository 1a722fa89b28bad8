//! Conversions between 8-bit RGB rasters and `(3, H, W)` tensors in [-1, 1],
//! PNG and mask IO, and a few image statistics.

use std::path::Path;

use candle_core::Tensor;
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::params::{DTYPE, device};

pub fn image_to_tensor(image: &RgbImage) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f64; 3 * w * h];
    for (x, y, px) in image.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = px.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &device())?)
}

/// Stacks images into `(batch, 3, H, W)`; all must share dimensions.
pub fn images_to_batch(images: &[&RgbImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid_input("no images to batch"))?
        .dimensions();
    let ts = images
        .iter()
        .map(|img| {
            if img.dimensions() != first {
                return Err(Error::invalid_input("images in a batch must share dimensions"));
            }
            image_to_tensor(img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Inverse of [`image_to_tensor`], clamping and rounding to 8 bits.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid_input(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = data[ch * w * h + y as usize * w + x as usize];
            px.0[ch] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    image.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// A binary editing mask; `true` marks editable pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    /// The leftmost `columns` columns editable.
    pub fn left_part(width: usize, height: usize, columns: usize) -> Self {
        let mut values = vec![false; width * height];
        for y in 0..height {
            for x in 0..columns.min(width) {
                values[y * width + x] = true;
            }
        }
        Self { width, height, values }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    /// Accepts only 0 and 255 pixel values.
    pub fn from_gray(image: &GrayImage) -> Result<Self> {
        let (w, h) = image.dimensions();
        let mut values = Vec::with_capacity((w * h) as usize);
        for px in image.pixels() {
            match px.0[0] {
                0 => values.push(false),
                255 => values.push(true),
                v => {
                    return Err(Error::invalid_input(format!(
                        "mask must be binary (0/255), found value {v}"
                    )));
                }
            }
        }
        Ok(Self {
            width: w as usize,
            height: h as usize,
            values,
        })
    }

    /// Accepts only exact 0.0 and 1.0 entries.
    pub fn from_values(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid_input("mask size does not match its dimensions"));
        }
        let values = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::invalid_input(format!("mask must be binary, found value {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { width, height, values })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Nearest-neighbour resample to `(height, width)`, then re-binarized
    /// into a `(1, height, width)` 0/1 tensor.
    pub fn to_latent(&self, height: usize, width: usize) -> Result<Tensor> {
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
                let v = self.get(sx.min(self.width - 1), sy.min(self.height - 1));
                out.push(if v { 1.0 } else { 0.0 });
            }
        }
        Ok(Tensor::from_vec(out, (1, height, width), &device())?)
    }
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    Mask::from_gray(&image::open(path)?.to_luma8())
}

/// PSNR in dB between two tensors in [-1, 1], measured on the [0, 1] scale.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = ((a - b)? * 0.5)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean of red minus mean of blue, on the [0, 1] scale.
pub fn warmth(image: &RgbImage) -> f64 {
    let n = (image.width() * image.height()).max(1) as f64;
    image
        .pixels()
        .map(|p| (p.0[0] as f64 - p.0[2] as f64) / 255.0)
        .sum::<f64>()
        / n
}

/// Mean absolute difference on the [0, 1] scale over the pixels selected by
/// `select`.
pub fn masked_mae(a: &RgbImage, b: &RgbImage, select: impl Fn(u32, u32) -> bool) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y, pa) in a.enumerate_pixels() {
        if !select(x, y) {
            continue;
        }
        let pb = b.get_pixel(x, y);
        for c in 0..3 {
            sum += (pa.0[c] as f64 - pb.0[c] as f64).abs() / 255.0;
        }
        count += 3;
    }
    if count == 0 { 0.0 } else { sum / count as f64 }
}
