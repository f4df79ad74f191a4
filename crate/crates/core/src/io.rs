//! 8-bit RGB PNG interchange. Internally images are `1×3×H×W` tensors in [0, 1].

use std::path::{Path, PathBuf};

use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("expected a single 3-channel image, got shape {0}")]
    NotRgb(Shape),
}

/// `round_half_up(clamp(v, 0, 1) · 255)`.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn load_png(path: &Path) -> Result<Tensor, ImageIoError> {
    let img = image::open(path)
        .map_err(|source| ImageIoError::Read {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(Shape::new(1, 3, h, w), data).expect("length matches"))
}

/// Interleaved RGB bytes of a `1×3×H×W` tensor.
pub fn to_rgb8(img: &Tensor) -> Result<Vec<u8>, ImageIoError> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(ImageIoError::NotRgb(s));
    }
    let plane = s.plane();
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

/// Tensor holding exactly what a PNG round trip would give back.
pub fn quantized(img: &Tensor) -> Result<Tensor, ImageIoError> {
    let s = img.shape();
    let bytes = to_rgb8(img)?;
    let plane = s.plane();
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = bytes[3 * i + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(s, data).expect("length matches"))
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<(), ImageIoError> {
    let s = img.shape();
    let bytes = to_rgb8(img)?;
    let buf = image::RgbImage::from_raw(s.w as u32, s.h as u32, bytes).expect("buffer sized for image");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageIoError::Write {
            path: path.to_path_buf(),
            source,
        })
}
