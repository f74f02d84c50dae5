//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RNET"  u32 version  u32 config_len  config JSON  u32 tensor_count
//! per tensor: u32 name_len  name  u8 kind (0 param, 1 buffer)  u8 dtype
//!             u8 trainable  u8 group  u32 rank  rank × u64 extents  values
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::resnet::{Init, Network, NetworkConfig, ResnetError};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"RNET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint is truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint holds {found} tensors but its configuration declares {expected}")]
    CountMismatch { found: usize, expected: usize },
    #[error("tensor {name} is stored as {found} but {expected} was requested")]
    DTypeMismatch {
        name: String,
        found: String,
        expected: DType,
    },
    #[error("tensor {index}: expected {expected}, found {found}")]
    Layout {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] ResnetError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Element>(out: &mut Vec<u8>, name: &str, kind: u8, trainable: bool, group: usize, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&[kind, T::DTYPE.code(), u8::from(trainable), group as u8]);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend(t.to_le_bytes());
}

/// Serializes every parameter (with trainability and group) and buffer.
pub fn encode<T: Element>(net: &Network<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let config = serde_json::to_vec(net.config()).expect("config serializes");
    put_u32(&mut out, config.len() as u32);
    out.extend(config);
    put_u32(&mut out, (net.params().len() + net.buffers().len()) as u32);
    for p in net.params() {
        put_tensor(&mut out, &p.name, 0, p.trainable(), p.group, &p.tensor);
    }
    for b in net.buffers() {
        put_tensor(&mut out, &b.name, 1, false, 0, &b.tensor);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Header fields readable without knowing the element type.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u32,
    pub config: NetworkConfig,
    pub tensor_count: usize,
    /// Element type of the first tensor.
    pub dtype: Option<DType>,
}

fn read_header<'a>(bytes: &'a [u8]) -> Result<(Header, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = r.u32("config length")? as usize;
    let config: NetworkConfig =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let tensor_count = r.u32("tensor count")? as usize;
    let dtype = peek_dtype(&r);
    Ok((
        Header {
            version,
            config,
            tensor_count,
            dtype,
        },
        r,
    ))
}

fn peek_dtype(r: &Reader<'_>) -> Option<DType> {
    let rest = &r.bytes[r.pos..];
    let name_len = u32::from_le_bytes(rest.get(..4)?.try_into().ok()?) as usize;
    DType::from_code(*rest.get(4 + name_len + 1)?)
}

pub fn header(bytes: &[u8]) -> Result<Header> {
    read_header(bytes).map(|(h, _)| h)
}

/// Rebuilds a network from [`encode`] output. The element type must match
/// the stored one.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Network<T>> {
    let (header, mut r) = read_header(bytes)?;
    let mut net = Network::<T>::build(header.config, Init::Zeros)?;
    let expected = net.params().len() + net.buffers().len();
    if header.tensor_count != expected {
        return Err(CheckpointError::CountMismatch {
            found: header.tensor_count,
            expected,
        });
    }
    let n_params = net.params().len();
    for index in 0..expected {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "tensor name")?).into_owned();
        let kind = r.u8("tensor kind")?;
        let dtype = r.u8("dtype")?;
        let trainable = r.u8("trainable flag")? != 0;
        let group = r.u8("group")? as usize;
        if dtype != T::DTYPE.code() {
            return Err(CheckpointError::DTypeMismatch {
                name,
                found: DType::from_code(dtype).map_or_else(|| format!("code {dtype}"), |d| d.to_string()),
                expected: T::DTYPE,
            });
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let (expected_name, expected_shape, expected_kind, expected_group) = if index < n_params {
            let p = &net.params()[index];
            (p.name.clone(), p.tensor.shape().to_vec(), 0, p.group)
        } else {
            let b = &net.buffers()[index - n_params];
            (b.name.clone(), b.tensor.shape().to_vec(), 1, 0)
        };
        if name != expected_name || shape != expected_shape || kind != expected_kind || group != expected_group {
            return Err(CheckpointError::Layout {
                index,
                expected: format!("{expected_name} {expected_shape:?}"),
                found: format!("{name} {shape:?}"),
            });
        }
        let count: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = r.take(count * size, "tensor values")?;
        let values: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
        let tensor = Tensor::new(shape, values).map_err(ResnetError::from)?;
        if index < n_params {
            net.params_mut()[index].tensor = tensor.with_requires_grad(trainable);
        } else {
            net.buffers_mut()[index - n_params].tensor = tensor;
        }
    }
    let trailing = bytes.len() - r.pos;
    if trailing != 0 {
        return Err(CheckpointError::TrailingBytes(trailing));
    }
    Ok(net)
}

pub fn save_checkpoint<T: Element>(net: &Network<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Network<T>> {
    decode(&read_checkpoint_bytes(path)?)
}
