//! Dark channel prior dehazing, used as the classical baseline.
//!
//! The transmission map is not refined (no soft matting or guided
//! filter), so outputs show blocky halos around depth edges.

use crate::hazegen::{invert_scattering, HazeError};
use crate::plane::Plane;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcpConfig {
    /// Side of the square min-filter window (odd, ≥ 3).
    pub patch: usize,
    /// Fraction of haze removed; 1 removes all of it.
    pub omega: f32,
    pub t_floor: f32,
    /// Top fraction of dark-channel pixels searched for the airlight.
    pub airlight_fraction: f32,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            patch: 15,
            omega: 0.95,
            t_floor: 0.1,
            airlight_fraction: 0.001,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DcpError {
    #[error("invalid dark channel configuration: {0}")]
    Config(String),
    #[error("patch {patch} is larger than the {h}×{w} image")]
    PatchTooLarge { patch: usize, h: usize, w: usize },
    #[error("expected a single RGB image, got shape {0}")]
    NotRgb(Shape),
    #[error(transparent)]
    Haze(#[from] HazeError),
}

impl DcpConfig {
    pub fn validate(&self) -> Result<(), DcpError> {
        if self.patch < 3 || self.patch % 2 == 0 {
            return Err(DcpError::Config(format!("patch must be odd and ≥ 3, got {}", self.patch)));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(DcpError::Config(format!("omega must lie in (0, 1], got {}", self.omega)));
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return Err(DcpError::Config(format!("t_floor must lie in (0, 1), got {}", self.t_floor)));
        }
        if !(self.airlight_fraction > 0.0 && self.airlight_fraction <= 1.0) {
            return Err(DcpError::Config(format!(
                "airlight_fraction must lie in (0, 1], got {}",
                self.airlight_fraction
            )));
        }
        Ok(())
    }
}

fn rgb_shape(img: &Tensor) -> Result<Shape, DcpError> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(DcpError::NotRgb(s));
    }
    Ok(s)
}

/// Sliding minimum along a line with edge replication.
fn min_line(src: &[f32], dst: &mut [f32], r: usize) {
    let n = src.len();
    for (i, d) in dst.iter_mut().enumerate() {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        *d = src[lo..=hi].iter().copied().fold(f32::INFINITY, f32::min);
    }
}

/// Square min filter. Replicating the border never introduces a new
/// minimum, so clipping the window to the image is equivalent.
fn min_filter(p: &Plane, patch: usize) -> Plane {
    let r = patch / 2;
    let (h, w) = (p.h, p.w);
    let mut rows = vec![0.0f32; h * w];
    for y in 0..h {
        min_line(&p.data[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w], r);
    }
    let mut out = vec![0.0f32; h * w];
    let mut col = vec![0.0f32; h];
    let mut res = vec![0.0f32; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        min_line(&col, &mut res, r);
        for y in 0..h {
            out[y * w + x] = res[y];
        }
    }
    Plane::new(h, w, out)
}

/// Per pixel, the minimum over the three channels and the surrounding
/// `patch × patch` window.
pub fn dark_channel(img: &Tensor, patch: usize) -> Result<Plane, DcpError> {
    let s = rgb_shape(img)?;
    if patch == 0 || patch % 2 == 0 {
        return Err(DcpError::Config(format!("patch must be odd, got {patch}")));
    }
    if patch > s.h || patch > s.w {
        return Err(DcpError::PatchTooLarge { patch, h: s.h, w: s.w });
    }
    let plane = s.plane();
    let d = img.data();
    let channel_min = Plane::new(
        s.h,
        s.w,
        (0..plane).map(|i| d[i].min(d[plane + i]).min(d[2 * plane + i])).collect(),
    );
    Ok(min_filter(&channel_min, patch))
}

/// Colour of the brightest (by RGB sum) pixel among the
/// `ceil(fraction·H·W)` haziest pixels of the dark channel. Ties go to the
/// smallest row-major index.
pub fn estimate_atmospheric_light(img: &Tensor, dark: &Plane, fraction: f32) -> Result<[f32; 3], DcpError> {
    let s = rgb_shape(img)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DcpError::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if dark.h != s.h || dark.w != s.w {
        return Err(DcpError::Haze(HazeError::ShapeMismatch {
            t_h: dark.h,
            t_w: dark.w,
            img_h: s.h,
            img_w: s.w,
        }));
    }
    let plane = s.plane();
    let k = ((fraction as f64 * plane as f64).ceil() as usize).clamp(1, plane);
    let mut order: Vec<usize> = (0..plane).collect();
    // Stable: equal dark values keep row-major order.
    order.sort_by(|&a, &b| dark.data[b].total_cmp(&dark.data[a]));
    let d = img.data();
    let rgb = |i: usize| [d[i], d[plane + i], d[2 * plane + i]];
    let sum = |i: usize| rgb(i).iter().map(|&v| v as f64).sum::<f64>();
    let mut best = order[0];
    for &i in &order[1..k] {
        let (si, sb) = (sum(i), sum(best));
        if si > sb || (si == sb && i < best) {
            best = i;
        }
    }
    Ok(rgb(best))
}

/// `t = 1 − ω · dark_channel(I / A)`, clamped to `[t_floor, 1]`.
pub fn estimate_transmission(img: &Tensor, airlight: [f32; 3], cfg: &DcpConfig) -> Result<Plane, DcpError> {
    cfg.validate()?;
    let s = rgb_shape(img)?;
    if let Some(a) = airlight.iter().find(|&&a| !(a > 0.0)) {
        return Err(DcpError::Config(format!("airlight must be positive, got {a}")));
    }
    let plane = s.plane();
    let normalized: Vec<f32> = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v / airlight[i / plane])
        .collect();
    let normalized = Tensor::new(s, normalized).expect("same shape");
    let dark = dark_channel(&normalized, cfg.patch)?;
    let t = dark
        .data
        .iter()
        .map(|&d| (1.0 - cfg.omega * d).clamp(cfg.t_floor, 1.0))
        .collect();
    Ok(Plane::new(s.h, s.w, t))
}

/// Full baseline: dark channel, airlight, transmission, inversion.
pub fn dcp_dehaze(img: &Tensor, cfg: &DcpConfig) -> Result<Tensor, DcpError> {
    cfg.validate()?;
    let clean = img.data().iter().map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
    let img = Tensor::new(rgb_shape(img)?, clean).expect("same shape");
    let dark = dark_channel(&img, cfg.patch)?;
    let mut airlight = estimate_atmospheric_light(&img, &dark, cfg.airlight_fraction)?;
    // A black airlight would make I/A undefined.
    for a in &mut airlight {
        *a = a.max(1e-3);
    }
    let t = estimate_transmission(&img, airlight, cfg)?;
    Ok(invert_scattering(&img, &t, airlight, cfg.t_floor)?)
}
