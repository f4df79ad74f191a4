use std::fs;
use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::io::load_png;
use crate::tensor::{Shape, Tensor};

/// Paired clear/hazy images held in memory.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub names: Vec<String>,
    pub hazy: Vec<Tensor>,
    pub clear: Vec<Tensor>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.hazy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hazy.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, hazy: Tensor, clear: Tensor) {
        self.names.push(name.into());
        self.hazy.push(hazy);
        self.clear.push(clear);
    }

    /// Loads every `<stem>_hazy.png` with its `<stem>_clear.png` from
    /// `dir`, sorted by stem.
    pub fn load_dir(dir: &Path) -> Result<Self, TrainError> {
        let entries = fs::read_dir(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut stems: Vec<(String, PathBuf)> = Vec::new();
        for e in entries {
            let path = e
                .map_err(|source| TrainError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?
                .path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(stem) = name.strip_suffix("_hazy.png") {
                stems.push((stem.to_string(), path.clone()));
            }
        }
        stems.sort();
        let mut set = PairSet::default();
        for (stem, hazy_path) in stems {
            let clear_path = dir.join(format!("{stem}_clear.png"));
            if !clear_path.exists() {
                return Err(TrainError::Data(format!("{} has no clear counterpart", hazy_path.display())));
            }
            let hazy = load_png(&hazy_path)?;
            let clear = load_png(&clear_path)?;
            if hazy.shape() != clear.shape() {
                return Err(TrainError::Data(format!("pair {stem}: hazy {} vs clear {}", hazy.shape(), clear.shape())));
            }
            set.push(stem, hazy, clear);
        }
        Ok(set)
    }
}

/// Crop offset and flips chosen for one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub y: usize,
    pub x: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augment {
    pub fn draw(rng: &mut ChaCha8Rng, h: usize, w: usize, patch: usize) -> Self {
        Self {
            y: rng.random_range(0..=h - patch),
            x: rng.random_range(0..=w - patch),
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
        }
    }

    /// Crops a `patch × patch` window and applies the flips.
    pub fn apply(&self, img: &Tensor, patch: usize) -> Tensor {
        let s = img.shape();
        let d = img.data();
        let mut out = Vec::with_capacity(s.n * s.c * patch * patch);
        for nc in 0..s.n * s.c {
            let base = nc * s.plane();
            for py in 0..patch {
                let sy = if self.flip_v { patch - 1 - py } else { py } + self.y;
                for px in 0..patch {
                    let sx = if self.flip_h { patch - 1 - px } else { px } + self.x;
                    out.push(d[base + sy * s.w + sx]);
                }
            }
        }
        Tensor::new(Shape::new(s.n, s.c, patch, patch), out).expect("length matches")
    }
}

/// Same random crop and flips applied to both images of a pair.
pub fn augment_and_crop(
    hazy: &Tensor,
    clear: &Tensor,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Augment), TrainError> {
    let s = hazy.shape();
    if s != clear.shape() {
        return Err(TrainError::Data(format!("pair shapes differ: {s} vs {}", clear.shape())));
    }
    if patch == 0 || patch > s.h || patch > s.w {
        return Err(TrainError::Data(format!("patch {patch} does not fit a {}×{} image", s.h, s.w)));
    }
    let aug = Augment::draw(rng, s.h, s.w, patch);
    Ok((aug.apply(hazy, patch), aug.apply(clear, patch), aug))
}

/// Stacks `1×C×H×W` tensors into one `N×C×H×W` batch.
pub fn stack(items: &[Tensor]) -> Tensor {
    let s = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * s.numel());
    for t in items {
        data.extend_from_slice(&t.data());
    }
    Tensor::new(Shape::new(items.len() * s.n, s.c, s.h, s.w), data).expect("uniform batch")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(Shape::new(1, 3, h, w), (0..3 * h * w).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn pairing_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hazy = ramp(10, 12);
        let clear = hazy.scale(2.0);
        for _ in 0..50 {
            let (h, c, _) = augment_and_crop(&hazy, &clear, 6, &mut rng).unwrap();
            let doubled: Vec<f32> = h.to_vec().iter().map(|v| v * 2.0).collect();
            assert_eq!(doubled, c.to_vec());
        }
        assert!(augment_and_crop(&hazy, &clear, 11, &mut rng).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(6, 6);
        let flip = Augment {
            y: 0,
            x: 0,
            flip_h: true,
            flip_v: true,
        };
        assert_eq!(flip.apply(&flip.apply(&img, 6), 6).to_vec(), img.to_vec());
        assert_ne!(flip.apply(&img, 6).to_vec(), img.to_vec());
    }

    #[test]
    fn flip_frequencies_are_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (mut h, mut v) = (0, 0);
        for _ in 0..1000 {
            let a = Augment::draw(&mut rng, 48, 48, 32);
            h += a.flip_h as usize;
            v += a.flip_v as usize;
        }
        for n in [h, v] {
            assert!((450..=550).contains(&n), "{n}");
        }
    }
}
