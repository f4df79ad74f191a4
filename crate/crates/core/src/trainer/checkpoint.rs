//! Binary checkpoint archive.
//!
//! ```text
//! "IDSCKPT1"
//! u64 manifest bytes, manifest: u32 count, then per tensor
//!     u32 name length, name, u8 dtype, u8 rank, u64 × rank dims
//! raw little-endian values in manifest order
//! optimizer state: a second manifest + values, same layout
//!     ("m:<name>", "v:<name>" as f32, "step:<name>" as u64)
//! u64 epoch
//! u32 blob length, RNG blob: 32-byte seed, u64 stream, u128 word position
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use super::adam::MomentState;
use crate::tensor::Shape;

pub const MAGIC: &[u8; 8] = b"IDSCKPT1";
const MAGIC_STEM: &[u8; 7] = b"IDSCKPT";
const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;
const RNG_BLOB_LEN: u32 = 32 + 8 + 16;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0:?}; this build reads version 1")]
    VersionMismatch(char),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint tensor {0:?} does not belong to this model")]
    UnknownTensor(String),
    #[error("checkpoint has no tensor {0:?} required by this model")]
    MissingTensor(String),
    #[error("checkpoint tensor {name:?} has shape {found}, model expects {expected}")]
    ShapeMismatch { name: String, found: Shape, expected: Shape },
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// Serialisable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<NamedTensor>,
    pub moments: Vec<MomentState>,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: RngState,
}

enum Values<'a> {
    F32(&'a [f32]),
    U64(u64),
}

struct Entry<'a> {
    name: String,
    dims: Vec<u64>,
    values: Values<'a>,
}

fn write_section(out: &mut Vec<u8>, entries: &[Entry<'_>]) {
    let mut manifest = Vec::new();
    manifest.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        manifest.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        manifest.extend_from_slice(e.name.as_bytes());
        manifest.push(match e.values {
            Values::F32(_) => DTYPE_F32,
            Values::U64(_) => DTYPE_U64,
        });
        manifest.push(e.dims.len() as u8);
        for d in &e.dims {
            manifest.extend_from_slice(&d.to_le_bytes());
        }
    }
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for e in entries {
        match e.values {
            Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Values::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

enum Decoded {
    F32(Shape, Vec<f32>),
    U64(u64),
}

fn read_section(r: &mut Reader<'_>) -> Result<Vec<(String, Decoded)>, CheckpointError> {
    let manifest_len = r.u64("manifest length")? as usize;
    let manifest = r.take(manifest_len, "manifest")?;
    let mut m = Reader { buf: manifest, pos: 0 };
    let count = m.u32("manifest")?;
    let mut heads = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = m.u32("manifest")? as usize;
        let name = String::from_utf8(m.take(len, "manifest")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let dtype = m.u8("manifest")?;
        let rank = m.u8("manifest")? as usize;
        let dims = (0..rank).map(|_| m.u64("manifest").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        heads.push((name, dtype, dims));
    }
    if m.pos != manifest.len() {
        return Err(CheckpointError::Malformed("manifest length disagrees with its entries".into()));
    }
    let mut out = Vec::with_capacity(heads.len());
    for (name, dtype, dims) in heads {
        let value = match dtype {
            DTYPE_F32 => {
                if dims.len() != 4 {
                    return Err(CheckpointError::Malformed(format!("{name}: expected rank 4, got {}", dims.len())));
                }
                let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
                let n = shape.numel();
                let bytes = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
                let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Decoded::F32(shape, data)
            }
            DTYPE_U64 => Decoded::U64(r.u64("tensor data")?),
            other => return Err(CheckpointError::Malformed(format!("{name}: unknown dtype tag {other}"))),
        };
        out.push((name, value));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let params: Vec<Entry<'_>> = self
            .params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                dims: p.shape.dims().iter().map(|&d| d as u64).collect(),
                values: Values::F32(&p.data),
            })
            .collect();
        write_section(&mut out, &params);

        let mut opt = Vec::with_capacity(3 * self.moments.len());
        for s in &self.moments {
            let dims = vec![1, 1, 1, s.m.len() as u64];
            opt.push(Entry {
                name: format!("m:{}", s.name),
                dims: dims.clone(),
                values: Values::F32(&s.m),
            });
            opt.push(Entry {
                name: format!("v:{}", s.name),
                dims,
                values: Values::F32(&s.v),
            });
            opt.push(Entry {
                name: format!("step:{}", s.name),
                dims: vec![],
                values: Values::U64(s.step),
            });
        }
        write_section(&mut out, &opt);

        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&RNG_BLOB_LEN.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < MAGIC.len() || &buf[..7] != MAGIC_STEM {
            return Err(CheckpointError::BadMagic);
        }
        if buf[7] != MAGIC[7] {
            return Err(CheckpointError::VersionMismatch(buf[7] as char));
        }
        let mut r = Reader { buf, pos: 8 };
        let params = read_section(&mut r)?
            .into_iter()
            .map(|(name, v)| match v {
                Decoded::F32(shape, data) => Ok(NamedTensor { name, shape, data }),
                Decoded::U64(_) => Err(CheckpointError::Malformed(format!("parameter {name} is not f32"))),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let opt = read_section(&mut r)?;
        if opt.len() % 3 != 0 {
            return Err(CheckpointError::Malformed("optimizer entries come in m/v/step triples".into()));
        }
        let mut moments = Vec::with_capacity(opt.len() / 3);
        let mut it = opt.into_iter();
        while let (Some(m), Some(v), Some(t)) = (it.next(), it.next(), it.next()) {
            let name = m
                .0
                .strip_prefix("m:")
                .ok_or_else(|| CheckpointError::Malformed(format!("expected m: entry, found {}", m.0)))?
                .to_string();
            match (m.1, v.1, t.1) {
                (Decoded::F32(_, m), Decoded::F32(_, v), Decoded::U64(step))
                    if v.len() == m.len() && t.0 == format!("step:{name}") && v.len() == m.len() =>
                {
                    moments.push(MomentState { name, step, m, v })
                }
                _ => return Err(CheckpointError::Malformed(format!("bad optimizer state for {name}"))),
            }
        }

        let epoch = r.u64("epoch")?;
        let blob_len = r.u32("rng state")?;
        if blob_len != RNG_BLOB_LEN {
            return Err(CheckpointError::Malformed(format!("rng blob of {blob_len} bytes")));
        }
        let seed: [u8; 32] = r.take(32, "rng state")?.try_into().unwrap();
        let stream = r.u64("rng state")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng state")?.try_into().unwrap());
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            params,
            moments,
            epoch,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Names and shapes of the stored parameters.
    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        self.params.iter().map(|p| (p.name.clone(), p.shape)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _ = rng.next_u64();
        Checkpoint {
            params: vec![
                NamedTensor {
                    name: "a.w".into(),
                    shape: Shape::new(2, 1, 1, 3),
                    data: vec![1.0, -2.0, 0.5, f32::MIN_POSITIVE, 3.25, -0.0],
                },
                NamedTensor {
                    name: "a.b".into(),
                    shape: Shape::new(1, 2, 1, 1),
                    data: vec![0.0, 7.0],
                },
            ],
            moments: vec![MomentState {
                name: "a.b".into(),
                step: 9,
                m: vec![0.1, 0.2],
                v: vec![0.3, 0.4],
            }],
            epoch: 12,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            rng.next_u32();
        }
        let mut resumed = RngState::capture(&rng).restore();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        bytes[7] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::VersionMismatch('2'))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }
}
