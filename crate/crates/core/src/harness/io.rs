//! Binary grid and checkpoint files, CSV formatting and atomic writes.
//!
//! Grid: `PGRD`, version `1`, rank `u8`, dims `u32` LE, payload `f64` LE.
//! Checkpoint: `PCKP`, version `1`, 8-byte config hash, then two tensor
//! blocks (state, optimizer state), each a `u32` count followed by
//! `{name_len u16, name, rank u8, dims u32 x rank, f64 payload}` records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::Tensor;

const GRID_MAGIC: &[u8; 4] = b"PGRD";
const CKPT_MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u8 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, have {}", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        if self.take(4, "magic")? != m {
            return Err(Error::Format {
                offset: at,
                msg: format!("bad magic, expected {}", String::from_utf8_lossy(m)),
            });
        }
        let at = self.pos;
        let v = self.u8("version")?;
        if v != VERSION {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported version {v}"),
            });
        }
        Ok(())
    }

    fn shaped(&mut self) -> Result<Tensor> {
        let rank = self.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format {
                offset: self.pos,
                msg: "payload size overflows".into(),
            })?;
        let bytes = self.take(n, "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&dims, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn put_shaped(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Capacity("rank above 255".into()))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Capacity("dimension above u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_grid(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(GRID_MAGIC);
    out.push(VERSION);
    put_shaped(&mut out, t)?;
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(GRID_MAGIC)?;
    let t = r.shaped()?;
    r.finish()?;
    Ok(t)
}

pub fn write_grid(path: &Path, t: &Tensor) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::Numeric(format!("grid written to {}", path.display())));
    }
    atomic_write(path, &encode_grid(t)?)
}

pub fn read_grid(path: &Path) -> Result<Tensor> {
    decode_grid(&fs::read(path)?)
}

pub type Named = Vec<(String, Tensor)>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 8],
    /// Model, generator and discriminator parameters plus run metadata.
    pub tensors: Named,
    pub optimizer: Named,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .chain(&self.optimizer)
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor '{name}'")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.config_hash);
        for block in [&self.tensors, &self.optimizer] {
            let n = u32::try_from(block.len()).map_err(|_| Error::Capacity("too many tensors".into()))?;
            out.extend_from_slice(&n.to_le_bytes());
            for (name, t) in block {
                let len = u16::try_from(name.len())
                    .map_err(|_| Error::Capacity(format!("tensor name too long: {name}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                put_shaped(&mut out, t)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.magic(CKPT_MAGIC)?;
        let mut config_hash = [0u8; 8];
        config_hash.copy_from_slice(r.take(8, "config hash")?);
        let mut blocks = [Vec::new(), Vec::new()];
        for block in &mut blocks {
            let n = r.u32("tensor count")?;
            for _ in 0..n {
                let len = r.u16("name length")? as usize;
                let at = r.pos;
                let name = std::str::from_utf8(r.take(len, "name")?)
                    .map_err(|_| Error::Format {
                        offset: at,
                        msg: "tensor name is not UTF-8".into(),
                    })?
                    .to_string();
                block.push((name, r.shaped()?));
            }
        }
        r.finish()?;
        let [tensors, optimizer] = blocks;
        Ok(Self {
            config_hash,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Loads and refuses a checkpoint written under a different config.
    pub fn load_for(path: &Path, hash: [u8; 8]) -> Result<Self> {
        let c = Self::load(path)?;
        if c.config_hash != hash {
            return Err(Error::Config(format!(
                "checkpoint {} was written by config {}, current config is {}",
                path.display(),
                hex(&c.config_hash),
                hex(&hash)
            )));
        }
        Ok(c)
    }
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor {
        Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 1.0 / 3.0]).unwrap()
    }

    #[test]
    fn grid_header_layout() {
        let b = encode_grid(&sample()).unwrap();
        assert_eq!(&b[..4], b"PGRD");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 3);
        assert_eq!(b.len(), 14 + 6 * 8);
        assert_eq!(f64::from_le_bytes(b[14..22].try_into().unwrap()), 1.0);
    }

    #[test]
    fn grid_errors_carry_offsets() {
        let mut b = encode_grid(&sample()).unwrap();
        let short = &b[..b.len() - 3];
        match decode_grid(short) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
        b[4] = 2;
        assert!(matches!(decode_grid(&b), Err(Error::Format { offset: 4, .. })));
        b[0] = b'X';
        assert!(matches!(decode_grid(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Checkpoint {
            config_hash: [1, 2, 3, 4, 5, 6, 7, 8],
            tensors: vec![("a".into(), sample()), ("s".into(), Tensor::scalar(4.0))],
            optimizer: vec![("opt.m".into(), Tensor::zeros(&[0, 3]))],
        };
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), c.encode().unwrap());
        let empty = Checkpoint::default();
        assert_eq!(Checkpoint::decode(&empty.encode().unwrap()).unwrap(), empty);
    }

    #[test]
    fn mismatched_hash_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pckp");
        Checkpoint::default().save(&p).unwrap();
        assert!(Checkpoint::load_for(&p, [0; 8]).is_ok());
        assert!(matches!(Checkpoint::load_for(&p, [9; 8]), Err(Error::Config(_))));
    }

    #[test]
    fn float_format_has_17_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }
}
