//! Binary generator checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "INRP"
//! version      u32      1
//! resolution   u32
//! stage        u32      1..=3
//! z_dim, w_dim, width, layers, embed_pairs, const_dim   u32 each
//! fourier_sigma f32
//! init_strategy u32     0 random, 1 nearest, 2 bilinear, 3 remove
//! seed         u64
//! block_count  u32
//! blocks       name_len u32, name (UTF-8), ndim u32, dims u32×ndim,
//!              payload f32×prod(dims)
//! checksum     u32      CRC-32 of every payload byte, in block order
//! ```

use std::path::Path;

use crate::coords::StageId;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorParams, InitStrategy};
use crate::tensor::{Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"INRP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub gen: GeneratorParams,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn blocks(gen: &GeneratorParams) -> Vec<(String, &Tensor)> {
    let mut out = vec![("fourier_basis".to_string(), &gen.fourier_basis)];
    out.extend(gen.named());
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.gen;
        let c = &g.config;
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        u32le(&mut out, g.resolution);
        u32le(&mut out, g.stage.index() as usize);
        for d in [c.z_dim, c.w_dim, c.width, c.layers, c.embed_pairs, c.const_dim] {
            u32le(&mut out, d);
        }
        out.extend_from_slice(&c.fourier_sigma.to_le_bytes());
        out.extend_from_slice(&g.strategy.code().to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let blocks = blocks(g);
        u32le(&mut out, blocks.len());
        let mut crc = crc32fast::Hasher::new();
        for (name, t) in blocks {
            u32le(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            u32le(&mut out, t.shape().len());
            for &d in t.shape() {
                u32le(&mut out, d);
            }
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            crc.update(&out[start..]);
        }
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let resolution = r.u32()? as usize;
        let stage = StageId::from_index(r.u32()?)?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let fourier_sigma = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let strategy = InitStrategy::from_code(r.u32()?)?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let config = GeneratorConfig {
            z_dim: dims[0],
            w_dim: dims[1],
            width: dims[2],
            layers: dims[3],
            embed_pairs: dims[4],
            const_dim: dims[5],
            fourier_sigma,
        };
        let mut gen = GeneratorParams::init(config, resolution, stage, strategy, &mut Rng::new(0))?;
        let count = r.u32()? as usize;
        let mut crc = crc32fast::Hasher::new();
        let mut read = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("block name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| bad("block too large"))?)?;
            crc.update(payload);
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            read.push((name, Tensor::from_vec(&shape, data)?));
        }
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after checksum"));
        }
        if stored != crc.finalize() {
            return Err(bad("checksum mismatch"));
        }
        let expected: Vec<(String, Vec<usize>)> =
            blocks(&gen).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let found: Vec<(String, Vec<usize>)> = read.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected != found {
            return Err(bad("parameter blocks do not match the header's architecture"));
        }
        let mut it = read.into_iter().map(|(_, t)| t);
        gen.fourier_basis = it.next().expect("basis block");
        for ((_, slot), t) in gen.named_mut().into_iter().zip(it) {
            *slot = t;
        }
        Ok(Self { seed, gen })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|e| Error::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
