//! Bit-exact training snapshots: magic "TNRF", u32 version, then
//! length-prefixed sections of little-endian scalars and f64 arrays.

use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Arr;

const MAGIC: &[u8; 4] = b"TNRF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub fine_params: Vec<Arr>,
    pub coarse_params: Vec<Arr>,
    /// Interleaved per-layer running mean/var.
    pub fine_stats: Vec<Arr>,
    pub coarse_stats: Vec<Arr>,
    pub adam_fine: AdamState,
    pub adam_coarse: Option<AdamState>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[Arr]) {
    put_u64(out, arrays.len() as u64);
    for a in arrays {
        put_u64(out, a.ndim() as u64);
        for d in a.shape() {
            put_u64(out, *d as u64);
        }
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn put_adam(out: &mut Vec<u8>, state: Option<&AdamState>) {
    match state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            put_u64(out, s.t);
            put_arrays(out, &s.m);
            put_arrays(out, &s.v);
        }
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn arrays(&mut self) -> Result<Vec<Arr>> {
        let count = self.u64()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let ndim = self.u64()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("implausible array rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let bytes = self.take(len * 8)?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(
                Arr::from_shape_vec(ndarray::IxDyn(&shape), values)
                    .map_err(|e| Error::Format(format!("bad array shape: {e}")))?,
            );
        }
        Ok(out)
    }

    fn adam(&mut self) -> Result<Option<AdamState>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(AdamState {
                t: self.u64()?,
                m: self.arrays()?,
                v: self.arrays()?,
            })),
            other => Err(Error::Format(format!("bad optimizer presence byte {other}"))),
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = ckpt.config.to_text();
    put_u64(&mut out, config.len() as u64);
    out.extend_from_slice(config.as_bytes());
    put_u64(&mut out, ckpt.iteration);
    put_u64(&mut out, ckpt.rng_seed);
    out.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    put_arrays(&mut out, &ckpt.fine_params);
    put_arrays(&mut out, &ckpt.coarse_params);
    put_arrays(&mut out, &ckpt.fine_stats);
    put_arrays(&mut out, &ckpt.coarse_stats);
    put_adam(&mut out, Some(&ckpt.adam_fine));
    put_adam(&mut out, ckpt.adam_coarse.as_ref());
    out
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_len = cur.u64()? as usize;
    let config = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|e| Error::Format(format!("config section is not UTF-8: {e}")))?;
    let config = TrainConfig::parse(config)?;
    let iteration = cur.u64()?;
    let rng_seed = cur.u64()?;
    let rng_word_pos = cur.u128()?;
    let fine_params = cur.arrays()?;
    let coarse_params = cur.arrays()?;
    let fine_stats = cur.arrays()?;
    let coarse_stats = cur.arrays()?;
    let adam_fine = cur
        .adam()?
        .ok_or_else(|| Error::Format("missing fine optimizer state".into()))?;
    let adam_coarse = cur.adam()?;
    if cur.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            data.len() - cur.pos
        )));
    }
    Ok(Checkpoint {
        config,
        iteration,
        rng_seed,
        rng_word_pos,
        fine_params,
        coarse_params,
        fine_stats,
        coarse_stats,
        adam_fine,
        adam_coarse,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&data)
}
