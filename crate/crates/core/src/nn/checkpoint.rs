//! Binary model files.
//!
//! Layout (little endian): magic `CMSK`, `u32` version, `u32` length plus
//! UTF-8 `key=value` lines, `u32` tensor count, then per tensor a `u16`
//! name length, the name, a `u8` rank, `u32` dims, a `u8` dtype (0 = f32)
//! and the raw values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::unet::{UNet, UNetConfig};
use crate::nn::{Real, Tensor};

const MAGIC: &[u8; 4] = b"CMSK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A saved model: free-form config entries plus named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Captures the model; `extra` entries are appended to its config.
    pub fn from_model<T: Real>(model: &UNet<T>, extra: &[(String, String)]) -> Self {
        let mut config = model.config().to_lines();
        config.extend(extra.iter().cloned());
        let tensors = model
            .state()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<f32>()))
            .collect();
        Self { config, tensors }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_model<T: Real>(&self) -> Result<UNet<T>> {
        let config = UNetConfig::from_lines(&self.config)?;
        let mut model = UNet::new(config)?;
        let state: Vec<_> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.cast::<T>()))
            .collect();
        model.load_state(&state)?;
        Ok(model)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::param(format!("config entry '{k}' cannot be stored")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::param(format!("tensor name too long: {name}")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F32])?;
            let mut bytes = Vec::with_capacity(4 * t.numel());
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a model checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let text_len = read_u32(&mut r)? as usize;
        let text = String::from_utf8(read_vec(&mut r, text_len)?)
            .map_err(|_| Error::format("config block is not UTF-8"))?;
        let config = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::format(format!("bad config line '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let name = String::from_utf8(read_vec(&mut r, u16::from_le_bytes(len) as usize)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let mut b = [0u8; 1];
            read_exact(&mut r, &mut b)?;
            let shape = (0..b[0])
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            read_exact(&mut r, &mut b)?;
            if b[0] != DTYPE_F32 {
                return Err(Error::format(format!(
                    "unknown dtype {} for '{name}'",
                    b[0]
                )));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= (1 << 32))
                .ok_or_else(|| Error::format(format!("tensor '{name}' is implausibly large")))?;
            let raw = read_vec(&mut r, 4 * numel)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after last tensor"));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("checkpoint is truncated"),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.by_ref().take(len as u64).read_to_end(&mut out)?;
    if out.len() != len {
        return Err(Error::format("checkpoint is truncated"));
    }
    Ok(out)
}
