//! Haze synthesis with the atmospheric scattering model
//! `I = J·t + A·(1 − t)`, `t = exp(−β·depth)`, and procedural scenes to
//! apply it to.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::{save_png, ImageIoError};
use crate::plane::Plane;
use crate::tensor::{Shape, Tensor};

/// Default lower bound on transmission when inverting the model.
pub const DEFAULT_T_FLOOR: f32 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum HazeError {
    #[error("depth must be nonnegative, found {0}")]
    NegativeDepth(f32),
    #[error("invalid scattering parameter: {0}")]
    InvalidParameter(String),
    #[error("transmission map {t_h}×{t_w} does not match image {img_h}×{img_w}")]
    ShapeMismatch {
        t_h: usize,
        t_w: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("scene must be at least 16×16, got {0}×{1}")]
    TooSmall(usize, usize),
    #[error("expected a 3-channel image, got shape {0}")]
    NotRgb(Shape),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HazeError + '_ {
    move |source| HazeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parameter ranges of the two synthetic haze regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HazeProfile {
    Indoor,
    Outdoor,
}

impl HazeProfile {
    /// Open interval for β.
    pub fn beta_range(self) -> (f32, f32) {
        match self {
            HazeProfile::Indoor => (0.6, 1.8),
            HazeProfile::Outdoor => (0.04, 0.2),
        }
    }

    /// Open interval for the (gray) atmospheric light.
    pub fn airlight_range(self) -> (f32, f32) {
        match self {
            HazeProfile::Indoor => (0.7, 1.0),
            HazeProfile::Outdoor => (0.8, 1.0),
        }
    }
}

impl FromStr for HazeProfile {
    type Err = HazeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "indoor" => Ok(HazeProfile::Indoor),
            "outdoor" => Ok(HazeProfile::Outdoor),
            other => Err(HazeError::InvalidParameter(format!("unknown profile {other:?}"))),
        }
    }
}

impl fmt::Display for HazeProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HazeProfile::Indoor => "indoor",
            HazeProfile::Outdoor => "outdoor",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringParams {
    /// Extinction coefficient per unit depth.
    pub beta: f32,
    /// Atmospheric light per RGB channel.
    pub airlight: [f32; 3],
    pub depth: Option<Plane>,
}

impl ScatteringParams {
    pub fn validate(&self) -> Result<(), HazeError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(HazeError::InvalidParameter(format!("beta must be > 0, got {}", self.beta)));
        }
        if let Some(a) = self.airlight.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(HazeError::InvalidParameter(format!("airlight must lie in (0, 1], got {a}")));
        }
        if let Some(d) = &self.depth {
            check_depth(d)?;
        }
        Ok(())
    }

    /// Transmission implied by `beta` and the depth map.
    pub fn transmission(&self) -> Result<Plane, HazeError> {
        let depth = self
            .depth
            .as_ref()
            .ok_or_else(|| HazeError::InvalidParameter("no depth map attached".into()))?;
        transmission_from_depth(depth, self.beta)
    }
}

fn check_depth(depth: &Plane) -> Result<(), HazeError> {
    match depth.data.iter().find(|&&d| !(d >= 0.0)) {
        Some(&d) => Err(HazeError::NegativeDepth(d)),
        None => Ok(()),
    }
}

/// `t(x) = exp(−β·depth(x))`.
pub fn transmission_from_depth(depth: &Plane, beta: f32) -> Result<Plane, HazeError> {
    if !(beta > 0.0) {
        return Err(HazeError::InvalidParameter(format!("beta must be > 0, got {beta}")));
    }
    check_depth(depth)?;
    let data = depth
        .data
        .iter()
        .map(|&d| (-(beta as f64) * d as f64).exp() as f32)
        .collect();
    Ok(Plane::new(depth.h, depth.w, data))
}

fn check_rgb_against(img: &Tensor, t: &Plane) -> Result<Shape, HazeError> {
    let s = img.shape();
    if s.c != 3 {
        return Err(HazeError::NotRgb(s));
    }
    if s.h != t.h || s.w != t.w {
        return Err(HazeError::ShapeMismatch {
            t_h: t.h,
            t_w: t.w,
            img_h: s.h,
            img_w: s.w,
        });
    }
    Ok(s)
}

/// `I = J·t + A·(1 − t)` per channel, clamped to [0, 1]. Evaluated in
/// double precision and rounded once.
pub fn apply_scattering(clear: &Tensor, t: &Plane, airlight: [f32; 3]) -> Result<Tensor, HazeError> {
    let s = check_rgb_against(clear, t)?;
    let plane = s.plane();
    let out = clear
        .data()
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let c = (i / plane) % 3;
            let tv = t.data[i % plane] as f64;
            let a = airlight[c] as f64;
            (j as f64 * tv + a * (1.0 - tv)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Tensor::new(s, out).expect("same length"))
}

/// `J = (I − A·(1 − t)) / max(t, t_floor)`, clamped to [0, 1].
pub fn invert_scattering(hazy: &Tensor, t: &Plane, airlight: [f32; 3], t_floor: f32) -> Result<Tensor, HazeError> {
    if !(t_floor > 0.0 && t_floor < 1.0) {
        return Err(HazeError::InvalidParameter(format!("t_floor must lie in (0, 1), got {t_floor}")));
    }
    let s = check_rgb_against(hazy, t)?;
    let plane = s.plane();
    let out = hazy
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / plane) % 3;
            let tv = t.data[i % plane] as f64;
            let a = airlight[c] as f64;
            let j = (v as f64 - a * (1.0 - tv)) / tv.max(t_floor as f64);
            if j.is_nan() {
                0.0
            } else {
                j.clamp(0.0, 1.0) as f32
            }
        })
        .collect();
    Ok(Tensor::new(s, out).expect("same length"))
}

/// Uniform draw strictly inside `(lo, hi)`.
fn open_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

/// β and a gray atmospheric light drawn uniformly from the profile ranges.
pub fn sample_scattering_params(profile: HazeProfile, seed: u64) -> ScatteringParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = open_uniform(&mut rng, profile.beta_range());
    let a = open_uniform(&mut rng, profile.airlight_range());
    ScatteringParams {
        beta,
        airlight: [a; 3],
        depth: None,
    }
}

pub const SCENE_DEPTH_RANGE: (f32, f32) = (0.5, 3.0);

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Saturated colour: one channel near zero, as in most natural surfaces.
fn surface_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let h = rng.random_range(0.0..1.0);
    let s = rng.random_range(0.75..1.0);
    let v = rng.random_range(0.35..1.0);
    hsv_to_rgb(h, s, v)
}

/// Procedural scene: a far background gradient with 3–8 coloured
/// rectangles on distinct depth planes, plus a faint smooth texture.
/// Returns radiance `1×3×H×W` in [0, 1] and depth in [0.5, 3.0].
pub fn generate_scene(seed: u64, h: usize, w: usize) -> Result<(Tensor, Plane), HazeError> {
    if h < 16 || w < 16 {
        return Err(HazeError::TooSmall(h, w));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = surface_colour(&mut rng);
    let bottom = surface_colour(&mut rng);
    let far_top: f32 = rng.random_range(2.6..3.0);
    let far_bottom: f32 = rng.random_range(1.8..2.5);

    let mut rgb = [
        vec![0.0f32; h * w],
        vec![0.0f32; h * w],
        vec![0.0f32; h * w],
    ];
    let mut depth = vec![0.0f32; h * w];
    for y in 0..h {
        let a = y as f32 / (h - 1) as f32;
        for x in 0..w {
            for c in 0..3 {
                rgb[c][y * w + x] = top[c] * (1.0 - a) + bottom[c] * a;
            }
            depth[y * w + x] = far_top * (1.0 - a) + far_bottom * a;
        }
    }

    let count = rng.random_range(3..=8usize);
    let mut planes: Vec<f32> = Vec::with_capacity(count);
    while planes.len() < count {
        let d: f32 = rng.random_range(0.5..2.4);
        if planes.iter().all(|&p| (p - d).abs() >= 0.05) {
            planes.push(d);
        }
    }
    // Far to near, so nearer rectangles occlude.
    planes.sort_by(|a, b| b.total_cmp(a));
    for d in planes {
        let rw = rng.random_range(w / 6..=w / 2).max(2);
        let rh = rng.random_range(h / 6..=h / 2).max(2);
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        let colour = surface_colour(&mut rng);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for c in 0..3 {
                    rgb[c][y * w + x] = colour[c];
                }
                depth[y * w + x] = d;
            }
        }
    }

    let freq: [f32; 2] = [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)];
    let phase: [f32; 3] = [
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
        rng.random_range(0.0..6.3),
    ];
    let mut data = Vec::with_capacity(3 * h * w);
    for (c, chan) in rgb.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let tex = 0.03 * (freq[0] * x as f32 + phase[c]).sin() * (freq[1] * y as f32 + phase[(c + 1) % 3]).cos();
                data.push((chan[y * w + x] + tex).clamp(0.0, 1.0));
            }
        }
    }
    let radiance = Tensor::new(Shape::new(1, 3, h, w), data).expect("length matches");
    Ok((radiance, Plane::new(h, w, depth)))
}

/// Clear/hazy pair with the parameters that produced it.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub clear: Tensor,
    pub hazy: Tensor,
    pub params: ScatteringParams,
    pub seed: u64,
}

const PARAM_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn synthesize_pair(seed: u64, h: usize, w: usize, profile: HazeProfile) -> Result<ScenePair, HazeError> {
    let (clear, depth) = generate_scene(seed, h, w)?;
    let mut params = sample_scattering_params(profile, seed ^ PARAM_STREAM);
    let t = transmission_from_depth(&depth, params.beta)?;
    params.depth = Some(depth);
    let hazy = apply_scattering(&clear, &t, params.airlight)?;
    Ok(ScenePair {
        clear,
        hazy,
        params,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub profile: HazeProfile,
    pub seed: u64,
}

/// One written pair.
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub seed: u64,
    pub split: Split,
    pub beta: f32,
    pub airlight: f32,
    pub clear_path: PathBuf,
    pub hazy_path: PathBuf,
}

/// Seed of the `index`-th pair of a dataset.
pub fn pair_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(100_000).wrapping_add(index as u64)
}

/// Which pair indices go to validation: a seeded shuffle, last fifth.
pub fn split_assignment(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5_1175));
    let n_val = count / 5;
    let mut splits = vec![Split::Train; count];
    for &i in &order[count - n_val..] {
        splits[i] = Split::Val;
    }
    splits
}

/// Writes `{split}/{seed:06}_clear.png`, `{split}/{seed:06}_hazy.png` and
/// `params.tsv` (`seed`, `beta`, `A`) under `root`.
pub fn write_dataset(root: &Path, opts: &DatasetOptions) -> Result<Vec<PairRecord>, HazeError> {
    for split in [Split::Train, Split::Val] {
        let dir = root.join(split.dir_name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let splits = split_assignment(opts.count, opts.seed);
    let mut records = Vec::with_capacity(opts.count);
    for (i, split) in splits.into_iter().enumerate() {
        let seed = pair_seed(opts.seed, i);
        let pair = synthesize_pair(seed, opts.height, opts.width, opts.profile)?;
        let dir = root.join(split.dir_name());
        let clear_path = dir.join(format!("{seed:06}_clear.png"));
        let hazy_path = dir.join(format!("{seed:06}_hazy.png"));
        save_png(&pair.clear, &clear_path)?;
        save_png(&pair.hazy, &hazy_path)?;
        records.push(PairRecord {
            seed,
            split,
            beta: pair.params.beta,
            airlight: pair.params.airlight[0],
            clear_path,
            hazy_path,
        });
    }
    let manifest = root.join("params.tsv");
    let mut f = fs::File::create(&manifest).map_err(io_err(&manifest))?;
    let mut text = String::from("seed\tbeta\tA\n");
    for r in &records {
        text.push_str(&format!("{}\t{}\t{}\n", r.seed, r.beta, r.airlight));
    }
    f.write_all(text.as_bytes()).map_err(io_err(&manifest))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, v: f32) -> Tensor {
        Tensor::full(Shape::new(1, 3, h, w), v)
    }

    #[test]
    fn transmission_basics() {
        let t = transmission_from_depth(&Plane::filled(2, 2, 0.0), 1.3).unwrap();
        assert!(t.data.iter().all(|&v| v == 1.0));
        let t = transmission_from_depth(&Plane::filled(1, 1, std::f32::consts::LN_2), 1.0).unwrap();
        assert_eq!(t.data[0], 0.5);
        let depth = Plane::new(1, 4, vec![0.1, 0.5, 1.0, 2.0]);
        let t = transmission_from_depth(&depth, 0.8).unwrap();
        assert!(t.data.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn transmission_rejects_bad_inputs() {
        assert!(matches!(
            transmission_from_depth(&Plane::new(1, 2, vec![0.1, -0.1]), 1.0),
            Err(HazeError::NegativeDepth(_))
        ));
        assert!(transmission_from_depth(&Plane::filled(1, 1, 1.0), 0.0).is_err());
    }

    #[test]
    fn scattering_examples() {
        let t1 = Plane::filled(2, 2, 1.0);
        let j = image(2, 2, 0.37);
        assert_eq!(apply_scattering(&j, &t1, [0.9; 3]).unwrap().to_vec(), j.to_vec());

        let i = apply_scattering(&image(2, 2, 0.8), &Plane::filled(2, 2, 0.5), [1.0; 3]).unwrap();
        assert!(i.to_vec().iter().all(|&v| (v - 0.9).abs() < 1e-7));

        let i = apply_scattering(&image(2, 2, 0.2), &Plane::filled(2, 2, 1e-9), [0.8; 3]).unwrap();
        assert!(i.to_vec().iter().all(|&v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn scattering_rejects_shape_mismatch() {
        let err = apply_scattering(&image(4, 4, 0.5), &Plane::filled(4, 5, 0.5), [0.9; 3]).unwrap_err();
        assert!(matches!(err, HazeError::ShapeMismatch { .. }));
    }

    #[test]
    fn inversion_examples() {
        let a = [0.85f32; 3];
        let t = Plane::filled(3, 3, 0.6);
        let hazy = image(3, 3, 0.85);
        let j = invert_scattering(&hazy, &t, a, DEFAULT_T_FLOOR).unwrap();
        assert!(j.to_vec().iter().all(|&v| (v - 0.85).abs() < 1e-6));

        let tiny = Plane::filled(3, 3, 1e-4);
        let j = invert_scattering(&image(3, 3, 0.1), &tiny, a, DEFAULT_T_FLOOR).unwrap();
        assert!(j.to_vec().iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
        assert!(invert_scattering(&hazy, &t, a, 0.0).is_err());
    }

    #[test]
    fn sampler_ranges_and_determinism() {
        for seed in 0..500 {
            let p = sample_scattering_params(HazeProfile::Indoor, seed);
            assert!(p.beta > 0.6 && p.beta < 1.8);
            assert!(p.airlight.iter().all(|&a| a > 0.7 && a < 1.0));
            let q = sample_scattering_params(HazeProfile::Outdoor, seed);
            assert!(q.beta > 0.04 && q.beta < 0.2);
            assert!(q.airlight.iter().all(|&a| a > 0.8 && a < 1.0));
            assert_eq!(p.airlight[0], p.airlight[2]);
        }
        assert_eq!(
            sample_scattering_params(HazeProfile::Indoor, 9),
            sample_scattering_params(HazeProfile::Indoor, 9)
        );
    }

    #[test]
    fn scene_bounds_and_determinism() {
        for seed in 0..20 {
            let (img, depth) = generate_scene(seed, 24, 40).unwrap();
            assert_eq!(img.shape(), Shape::new(1, 3, 24, 40));
            assert!(img.to_vec().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(depth.min() >= SCENE_DEPTH_RANGE.0 && depth.max() <= SCENE_DEPTH_RANGE.1);
            let (again, depth2) = generate_scene(seed, 24, 40).unwrap();
            assert_eq!(img.to_vec(), again.to_vec());
            assert_eq!(depth, depth2);
        }
        assert!(matches!(generate_scene(0, 15, 32), Err(HazeError::TooSmall(15, 32))));
    }

    #[test]
    fn different_seeds_give_different_scenes() {
        for seed in 0..100u64 {
            let (a, _) = generate_scene(seed, 16, 16).unwrap();
            let (b, _) = generate_scene(seed + 1000, 16, 16).unwrap();
            assert_ne!(a.to_vec(), b.to_vec(), "seed {seed}");
        }
    }

    #[test]
    fn pair_is_exact_scattering_of_its_params() {
        let pair = synthesize_pair(3, 32, 32, HazeProfile::Indoor).unwrap();
        let t = pair.params.transmission().unwrap();
        let again = apply_scattering(&pair.clear, &t, pair.params.airlight).unwrap();
        assert_eq!(again.to_vec(), pair.hazy.to_vec());
        pair.params.validate().unwrap();
    }

    #[test]
    fn split_is_eighty_twenty() {
        let s = split_assignment(10, 4);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 2);
        assert_eq!(s, split_assignment(10, 4));
        let s = split_assignment(80, 0);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 64);
    }
}
