//! Image quality metrics and every loss used in training.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Result, Shape, Tensor, TensorError};

/// PSNR reported for (numerically) identical images.
pub const DEFAULT_PSNR_CAP: f64 = 100.0;
/// Weight of the perceptual term inside [`content_loss`].
pub const PERCEPTUAL_WEIGHT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    /// Side of the square Gaussian window (odd).
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::with_range(1.0)
    }
}

impl SsimConfig {
    /// Standard constants for dynamic range `l`.
    pub fn with_range(l: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: (0.01 * l).powi(2),
            c2: (0.03 * l).powi(2),
        }
    }

    /// Same configuration with the window shrunk to the largest odd size
    /// that fits an `h×w` image, if needed.
    pub fn fitted(self, h: usize, w: usize) -> Self {
        let fit = h.min(w);
        if fit >= self.window {
            return self;
        }
        let window = if fit % 2 == 1 { fit } else { fit.saturating_sub(1) }.max(1);
        Self { window, ..self }
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    pub fn window_2d(&self) -> Vec<f64> {
        let t = self.taps();
        t.iter().flat_map(|&a| t.iter().map(move |&b| a * b)).collect()
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("shapes differ: {a} vs {b}"),
        });
    }
    Ok(())
}

fn mse_f64<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> f64 {
    let (a, b) = (x.data(), y.data());
    let s: f64 = a.iter().zip(b.iter()).map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2)).sum();
    s / a.len().max(1) as f64
}

/// `10·log10(1/MSE)` for images in [0, 1]; `cap` when MSE < 1e-10.
pub fn psnr<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cap: f64) -> Result<f64> {
    same_shape("psnr", x.shape(), y.shape())?;
    let mse = mse_f64(x, y);
    if mse < 1e-10 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

/// Valid (unpadded) separable filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn check_window(op: &'static str, s: Shape, cfg: &SsimConfig) -> Result<()> {
    if cfg.window == 0 || cfg.window % 2 == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("window must be odd, got {}", cfg.window),
        });
    }
    if s.h < cfg.window || s.w < cfg.window {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("image {}×{} is smaller than the {}×{} window", s.h, s.w, cfg.window, cfg.window),
        });
    }
    Ok(())
}

/// Mean SSIM over every channel plane and every valid window position,
/// computed in double precision.
pub fn ssim<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    let s = x.shape();
    same_shape("ssim", s, y.shape())?;
    check_window("ssim", s, cfg)?;
    let taps = cfg.taps();
    let plane = s.plane();
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..s.n * s.c {
        let a: Vec<f64> = xd[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = yd[p * plane..(p + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let mx = filter_valid(&a, s.h, s.w, &taps);
        let my = filter_valid(&b, s.h, s.w, &taps);
        let mxx = filter_valid(&prod(&a, &a), s.h, s.w, &taps);
        let myy = filter_valid(&prod(&b, &b), s.h, s.w, &taps);
        let mxy = filter_valid(&prod(&a, &b), s.h, s.w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            let num = (2.0 * ux * uy + cfg.c1) * (2.0 * cxy + cfg.c2);
            let den = (ux * ux + uy * uy + cfg.c1) * (vx + vy + cfg.c2);
            total += num / den;
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.sub(target)?.square().mean()
}

/// `1 − SSIM(pred, target)` on the tape. Windowing is a valid
/// convolution with the Gaussian kernel.
pub fn ssim_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    let s = pred.shape();
    same_shape("ssim_loss", s, target.shape())?;
    check_window("ssim_loss", s, cfg)?;
    let planes = Shape::new(s.n * s.c, 1, s.h, s.w);
    let x = pred.reshape(planes)?;
    let y = target.reshape(planes)?;
    let k = cfg.window;
    let window = Tensor::new(
        Shape::new(1, 1, k, k),
        cfg.window_2d().into_iter().map(T::lit).collect(),
    )?;
    let blur = |t: &Tensor<T>| t.conv2d(&window, None, 1, 0);

    let mx = blur(&x)?;
    let my = blur(&y)?;
    let mxx = blur(&x.square())?;
    let myy = blur(&y.square())?;
    let mxy = blur(&x.mul(&y)?)?;

    let mx2 = mx.square();
    let my2 = my.square();
    let mxmy = mx.mul(&my)?;
    let vx = mxx.sub(&mx2)?;
    let vy = myy.sub(&my2)?;
    let cxy = mxy.sub(&mxmy)?;

    let num = mxmy.scale(2.0).add_scalar(cfg.c1).mul(&cxy.scale(2.0).add_scalar(cfg.c2))?;
    let den = mx2.add(&my2)?.add_scalar(cfg.c1).mul(&vx.add(&vy)?.add_scalar(cfg.c2))?;
    Ok(num.div(&den)?.mean()?.neg().add_scalar(1.0))
}

/// Frozen random feature extractor standing in for a pretrained
/// perceptual network: three stride-2 3×3 convs (3→16→32→32), leaky ReLU
/// 0.2, no bias.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    layers: Vec<(Shape, Vec<f32>)>,
}

impl PerceptualNet {
    pub const SEED: u64 = 7;
    pub const STD: f64 = 0.2;
    const CHANNELS: [usize; 4] = [3, 16, 32, 32];

    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::SEED);
        let normal = Normal::new(0.0f64, Self::STD).expect("valid std");
        let layers = Self::CHANNELS
            .windows(2)
            .map(|io| {
                let shape = Shape::new(io[1], io[0], 3, 3);
                let w = (0..shape.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
                (shape, w)
            })
            .collect();
        Self { layers }
    }

    /// Process-wide shared instance.
    pub fn shared() -> &'static PerceptualNet {
        static NET: OnceLock<PerceptualNet> = OnceLock::new();
        NET.get_or_init(PerceptualNet::new)
    }

    pub fn features<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != 3 || s.h < 16 || s.w < 16 {
            return Err(TensorError::InvalidArgument {
                op: "perceptual_features",
                reason: format!("expected N×3×H×W with H, W ≥ 16, got {s}"),
            });
        }
        let mut h = x.clone();
        for (shape, w) in &self.layers {
            let w = Tensor::new(*shape, w.iter().map(|&v| T::lit(v as f64)).collect())?;
            h = h.conv2d(&w, None, 2, 1)?.leaky_relu(0.2);
        }
        Ok(h)
    }
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new()
    }
}

pub fn perceptual_features<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    PerceptualNet::shared().features(x)
}

/// `mse(pred, target) + weight · mse(φ(pred), φ(target))`.
pub fn content_loss_weighted<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, weight: f64) -> Result<Tensor<T>> {
    same_shape("content_loss", pred.shape(), target.shape())?;
    let pixel = mse_loss(pred, target)?;
    if weight == 0.0 {
        return Ok(pixel);
    }
    let fp = perceptual_features(pred)?;
    let ft = perceptual_features(&target.detach())?;
    pixel.add(&mse_loss(&fp, &ft)?.scale(weight))
}

pub fn content_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    content_loss_weighted(pred, target, PERCEPTUAL_WEIGHT)
}

/// Non-saturating GAN losses on logits, as binary cross-entropy:
/// `loss_D = BCE(real, 1) + BCE(fake, 0)`, `loss_G = BCE(fake, 1)`.
pub fn adversarial_losses<T: Real>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape("adversarial_losses", d_real.shape(), d_fake.shape())?;
    let loss_d = discriminator_loss(d_real, d_fake)?;
    let loss_g = generator_loss(d_fake)?;
    Ok((loss_d, loss_g))
}

pub fn discriminator_loss<T: Real>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<Tensor<T>> {
    d_real.neg().softplus().mean()?.add(&d_fake.softplus().mean()?)
}

pub fn generator_loss<T: Real>(d_fake: &Tensor<T>) -> Result<Tensor<T>> {
    d_fake.neg().softplus().mean()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image PSNR/SSIM with aggregate means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("malformed report line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl EvalReport {
    pub const HEADER: &'static str = "image\tpsnr_db\tssim";

    pub fn push(&mut self, image: impl Into<String>, psnr_db: f64, ssim: f64) {
        self.rows.push(EvalRow {
            image: image.into(),
            psnr_db,
            ssim,
        });
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", Self::HEADER).unwrap();
        for r in &self.rows {
            writeln!(s, "{}\t{}\t{}", r.image, r.psnr_db, r.ssim).unwrap();
        }
        writeln!(s, "MEAN\t{}\t{}", self.mean_psnr(), self.mean_ssim()).unwrap();
        s
    }

    pub fn write(&self, path: &Path) -> std::result::Result<(), ReportError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Parses per-image rows; the `MEAN` row is recomputed, not trusted.
    pub fn parse(text: &str) -> std::result::Result<Self, ReportError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::HEADER => {}
            _ => {
                return Err(ReportError::Parse {
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        }
        let mut report = EvalReport::default();
        for (i, line) in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(ReportError::Parse {
                    line: i + 1,
                    reason: format!("expected 3 columns, got {}", cols.len()),
                });
            }
            if cols[0] == "MEAN" {
                continue;
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|e| ReportError::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })
            };
            report.push(cols[0], num(cols[1])?, num(cols[2])?);
        }
        Ok(report)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, v: f64) -> Tensor<f64> {
        Tensor::full(Shape::new(1, 3, h, w), v)
    }

    #[test]
    fn psnr_examples() {
        let x = img(4, 4, 0.0);
        assert!((psnr(&x, &img(4, 4, 0.1), 100.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x, 100.0).unwrap(), 100.0);
        assert_eq!(psnr(&x, &img(4, 4, 1.0), 100.0).unwrap(), 0.0);
        assert!(psnr(&x, &img(4, 5, 0.0), 100.0).is_err());
    }

    #[test]
    fn window_sums_to_one() {
        let cfg = SsimConfig::default();
        let s: f64 = cfg.window_2d().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(cfg.c1, 1e-4);
        assert!((cfg.c2 - 9e-4).abs() < 1e-18);
    }

    #[test]
    fn fitted_window_is_odd_and_fits() {
        let cfg = SsimConfig::default();
        assert_eq!(cfg.fitted(48, 48).window, 11);
        assert_eq!(cfg.fitted(8, 12).window, 7);
        assert_eq!(cfg.fitted(9, 9).window, 9);
    }

    #[test]
    fn ssim_constant_images() {
        let cfg = SsimConfig::default();
        let v = ssim(&img(16, 16, 0.0), &img(16, 16, 1.0), &cfg).unwrap();
        assert!((v - 1e-4 / (1.0 + 1e-4)).abs() < 1e-9);
        let x = img(16, 16, 0.3);
        assert_eq!(ssim(&x, &x, &cfg).unwrap(), 1.0);
        assert!(ssim(&img(8, 8, 0.0), &img(8, 8, 0.0), &cfg).is_err());
    }

    #[test]
    fn ssim_loss_agrees_with_metric() {
        let cfg = SsimConfig::default();
        let n = 3 * 14 * 13;
        let a: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
        let b: Vec<f64> = (0..n).map(|i| ((i * 53 % 97) as f64) / 96.0).collect();
        let x = Tensor::new(Shape::new(1, 3, 14, 13), a).unwrap();
        let y = Tensor::new(Shape::new(1, 3, 14, 13), b).unwrap();
        let metric = ssim(&x, &y, &cfg).unwrap();
        let loss = ssim_loss(&x, &y, &cfg).unwrap().item();
        assert!((1.0 - metric - loss).abs() < 1e-9, "{metric} {loss}");
    }

    #[test]
    fn mse_examples() {
        let x = img(2, 2, 0.5);
        assert_eq!(mse_loss(&x, &x).unwrap().item(), 0.0);
        assert_eq!(mse_loss(&x, &img(2, 2, 0.0)).unwrap().item(), 0.25);
    }

    #[test]
    fn adversarial_at_zero_logits() {
        let z = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        let (d, g) = adversarial_losses(&z, &z).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d.item() - 2.0 * ln2).abs() < 1e-12);
        assert!((g.item() - ln2).abs() < 1e-12);
        let real = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 50.0);
        let fake = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), -50.0);
        assert!(adversarial_losses(&real, &fake).unwrap().0.item() < 1e-20);
    }

    #[test]
    fn perceptual_shape_and_determinism() {
        let x = Tensor::<f32>::full(Shape::new(1, 3, 64, 64), 0.4);
        let f = perceptual_features(&x).unwrap();
        assert_eq!(f.shape(), Shape::new(1, 32, 8, 8));
        assert_eq!(f.to_vec(), PerceptualNet::new().features(&x).unwrap().to_vec());
        assert!(perceptual_features(&Tensor::<f32>::zeros(Shape::new(1, 3, 8, 16))).is_err());
    }

    #[test]
    fn report_round_trip() {
        let mut r = EvalReport::default();
        r.push("a.png", 21.5, 0.8);
        r.push("b.png", 100.0, 1.0);
        let text = r.to_tsv();
        assert!(text.ends_with("MEAN\t60.75\t0.9\n"));
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
    }
}
