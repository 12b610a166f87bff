//! Binary checkpoint format.
//!
//! ```text
//! "OHF1"  u32 version
//! u32 len, UTF-8 model spec
//! u32 count, count × tensor          (parameters and buffers)
//! u32 count, count × tensor          (momentum buffers)
//! u64 step
//! 4 × u64 RNG state
//! tensor = u16 len, UTF-8 name, u8 rank, rank × u32 extents, f32 values
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OHF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model description in `ModelConfig` spec syntax.
    pub spec: String,
    pub params: Vec<(String, Tensor<f32>)>,
    pub momentum: Vec<(String, Tensor<f32>)>,
    pub step: u64,
    pub rng: [u64; 4],
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_len32(&mut out, self.spec.len(), "spec")?;
        out.extend_from_slice(self.spec.as_bytes());
        for list in [&self.params, &self.momentum] {
            put_len32(&mut out, list.len(), "tensor count")?;
            for (name, t) in list {
                put_tensor(&mut out, name, t)?;
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        for s in self.rng {
            out.extend_from_slice(&s.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, not an OHF1 checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let n = r.u32("spec length")? as usize;
        let spec = r.utf8(n, "spec")?;
        let params = r.tensors()?;
        let momentum = r.tensors()?;
        let step = r.u64("step")?;
        let mut rng = [0u64; 4];
        for s in &mut rng {
            *s = r.u64("rng state")?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Checkpoint {
            spec,
            params,
            momentum,
            step,
            rng,
        })
    }
}

fn put_len32(out: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::contract(format!("{what} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let n = u16::try_from(name.len())
        .map_err(|_| Error::contract(format!("tensor name {name:?} is too long")))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::contract(format!("tensor {name:?} has too many axes")))?;
    out.push(rank);
    for &e in t.shape() {
        put_len32(out, e, "extent")?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::format(self.pos, format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32("tensor count")? as usize;
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for _ in 0..count {
            let at = self.pos;
            let n = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes"))
                as usize;
            let name = self.utf8(n, "tensor name")?;
            if !seen.insert(name.clone()) {
                return Err(Error::format(at, format!("duplicate tensor name {name:?}")));
            }
            let rank = self.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(self.pos, "tensor size overflows"))?;
            let raw = self.take(bytes, "tensor values")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::format(at, format!("tensor {name:?}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

/// Write via a temporary sibling and rename, so a failed save never leaves
/// a partial file at `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
