//! 8-bit RGB PNG reading and writing, and resampling, over `[h, w, 3]`
//! tensors with values in `[0, 1]`.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => image_err(path, other),
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let rgb = to_rgb8(img)?;
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => image_err(path, other),
    })
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Quantize to 8 bits with round-half-up after clamping into `[0, 1]`.
pub fn to_rgb8(img: &Tensor<f32>) -> Result<RgbImage> {
    let s = img.shape();
    ensure!(s.len() == 3 && s[2] == 3, Input, "image must be [h, w, 3], got {s:?}");
    ensure!(img.all_finite(), Input, "image contains non-finite values");
    let raw = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8).collect();
    ImageBuffer::from_raw(s[1] as u32, s[0] as u32, raw).ok_or_else(|| Error::Internal("image buffer size".into()))
}

/// Resample to `h×w` with a triangle (bilinear) filter.
pub fn resize(img: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    ensure!(s.len() == 3 && s[2] == 3, Input, "image must be [h, w, 3], got {s:?}");
    ensure!(h > 0 && w > 0, Input, "cannot resize to {h}x{w}");
    if s[0] == h && s[1] == w {
        return Ok(img.clone());
    }
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(s[1] as u32, s[0] as u32, img.data().to_vec()).ok_or_else(|| Error::Internal("image buffer size".into()))?;
    let out = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
    Ok(Tensor::new(&[h, w, 3], out.into_raw()))
}

/// Stack same-sized `[h, w, 3]` images into `[b, h, w, 3]`.
pub fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    ensure!(!images.is_empty(), Input, "cannot stack zero images");
    let s = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for im in images {
        ensure!(im.shape() == s.as_slice(), Input, "stacked images differ in shape");
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(s);
    Ok(Tensor::new(&shape, data))
}

/// Element `i` of a `[b, …]` batch.
pub fn unstack(batch: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let per = batch.numel() / batch.dim(0);
    Tensor::new(&batch.shape()[1..], batch.data()[i * per..(i + 1) * per].to_vec())
}
