//! Binary checkpoint format.
//!
//! ```text
//! "VICTCKPT"                      8 bytes
//! version                         u32 LE
//! config length, config text      u32 LE, UTF-8 key=value lines
//! tensor count                    u32 LE
//! per tensor:
//!   name length, name             u32 LE, UTF-8
//!   group label                   u8 (0 encoder, 1 decoder)
//!   rank, dims                    u32 LE each
//!   values                        f32 LE, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{ModelConfig, ModelError, NamedTensor, ParamGroup, Params};

pub const MAGIC: &[u8; 8] = b"VICTCKPT";
pub const VERSION: u32 = 1;

/// Largest rank and element count accepted when reading.
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("tensor `{name}` has dimensions {dims:?} that overflow the supported size")]
    DimOverflow { name: String, dims: Vec<u32> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Header and tensor table without the values.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

impl CheckpointInfo {
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn len_u32(n: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("{what} too large")))
}

pub fn write<W: Write>(params: &Params<f32>, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let config = params.config().to_kv_text();
    write_u32(&mut w, len_u32(config.len(), "config block")?)?;
    w.write_all(config.as_bytes())?;
    write_u32(&mut w, len_u32(params.entries().len(), "tensor count")?)?;
    for e in params.entries() {
        write_u32(&mut w, len_u32(e.name.len(), "tensor name")?)?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.group.label()])?;
        write_u32(&mut w, len_u32(e.tensor.shape().len(), "rank")?)?;
        for &d in e.tensor.shape() {
            write_u32(&mut w, len_u32(d, "dimension")?)?;
        }
        let mut buf = Vec::with_capacity(4 * e.tensor.len());
        for v in e.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save(params: &Params<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    write(params, BufWriter::new(File::create(path)?))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
            _ => CheckpointError::Io(e),
        })
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let mut bytes = Vec::new();
        // grow with the data instead of trusting the prefix
        (&mut self.inner).take(n as u64).read_to_end(&mut bytes)?;
        if bytes.len() != n {
            return Err(CheckpointError::Truncated);
        }
        String::from_utf8(bytes).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn header(&mut self) -> Result<(u32, String, u32), CheckpointError> {
        let mut magic = [0u8; 8];
        self.exact(&mut magic).map_err(|e| match e {
            CheckpointError::Truncated => CheckpointError::BadMagic,
            other => other,
        })?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config = self.string("config block")?;
        let count = self.u32()?;
        Ok((version, config, count))
    }

    fn tensor_header(&mut self) -> Result<(TensorInfo, usize), CheckpointError> {
        let name = self.string("tensor name")?;
        let label = self.u8()?;
        let group = ParamGroup::from_label(label)
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` has unknown group {label}")))?;
        let rank = self.u32()?;
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| CheckpointError::DimOverflow {
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let shape = dims.iter().map(|&d| d as usize).collect();
        Ok((TensorInfo { name, group, shape }, numel as usize))
    }
}

pub fn read<R: Read>(r: R) -> Result<Params<f32>, CheckpointError> {
    let mut rd = Reader { inner: r };
    let (_, config_text, count) = rd.header()?;
    let config = ModelConfig::from_kv_text(&config_text)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let (info, numel) = rd.tensor_header()?;
        let mut bytes = Vec::new();
        (&mut rd.inner).take(4 * numel as u64).read_to_end(&mut bytes)?;
        if bytes.len() != 4 * numel {
            return Err(CheckpointError::Truncated);
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(info.shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        entries.push(NamedTensor {
            name: info.name,
            group: info.group,
            tensor,
        });
    }
    let mut trailing = [0u8; 1];
    if rd.inner.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes after the last tensor".into()));
    }
    Ok(Params::from_entries(config, entries)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Params<f32>, CheckpointError> {
    read(BufReader::new(File::open(path)?))
}

/// Reads the header and tensor table, skipping the values.
pub fn read_info<R: Read>(r: R) -> Result<CheckpointInfo, CheckpointError> {
    let mut rd = Reader { inner: r };
    let (version, config_text, count) = rd.header()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let (info, numel) = rd.tensor_header()?;
        let skipped = std::io::copy(&mut (&mut rd.inner).take(4 * numel as u64), &mut std::io::sink())?;
        if skipped != 4 * numel as u64 {
            return Err(CheckpointError::Truncated);
        }
        tensors.push(info);
    }
    Ok(CheckpointInfo {
        version,
        config_text,
        tensors,
    })
}

pub fn inspect(path: impl AsRef<Path>) -> Result<CheckpointInfo, CheckpointError> {
    read_info(BufReader::new(File::open(path)?))
}
