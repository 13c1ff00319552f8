//! `KBCT` binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | field                                   |
//! |------------|-----------------------------------------|
//! | 0..4       | magic `b"KBCT"`                         |
//! | 4          | version, always 1                       |
//! | 5          | dtype: 0 = f32, 1 = f64                 |
//! | 6          | rank (1..=6)                            |
//! | 7          | reserved, 0                             |
//! | 8..8+4r    | `rank` extents as u32                   |
//! | rest       | row-major payload of little-endian floats |
//!
//! Model weights are stored as a directory of such files, one per named
//! parameter (`<name>.kbct`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"KBCT";
pub const VERSION: u8 = 1;
pub const EXTENSION: &str = "kbct";
const HEADER_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:02x?}, expected \"KBCT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("invalid rank {0}")]
    BadRank(u8),
    #[error("nonzero reserved header byte {0}")]
    Reserved(u8),
    #[error("zero extent at axis {0}")]
    ZeroExtent(usize),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("dtype mismatch: file holds code {found}, caller wants {wanted}")]
    DtypeMismatch { wanted: u8, found: u8 },
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic(_) => "E_MAGIC",
            FormatError::UnsupportedVersion(_) => "E_VERSION",
            FormatError::UnknownDtype(_) => "E_DTYPE",
            FormatError::BadRank(_) => "E_HEADER_RANK",
            FormatError::Reserved(_) => "E_RESERVED",
            FormatError::ZeroExtent(_) => "E_EXTENT",
            FormatError::Truncated { .. } => "E_TRUNCATED",
            FormatError::Trailing(_) => "E_TRAILING",
            FormatError::DtypeMismatch { .. } => "E_DTYPE_MISMATCH",
        }
    }
}

/// A decoded tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type, rounding if necessary.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it is stored with element type `T`.
    pub fn exact<T: Scalar>(self) -> Result<Tensor<T>, FormatError> {
        let found = match &self {
            AnyTensor::F32(_) => f32::DTYPE,
            AnyTensor::F64(_) => f64::DTYPE,
        };
        if found != T::DTYPE {
            return Err(FormatError::DtypeMismatch {
                wanted: T::DTYPE,
                found,
            });
        }
        Ok(self.to())
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let elem = std::mem::size_of::<T>();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.rank() + elem * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE, t.rank() as u8, 0]);
    for &n in t.shape() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.put_le(&mut out);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let (version, dtype, rank, reserved) = (bytes[4], bytes[5], bytes[6], bytes[7]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let elem = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(FormatError::UnknownDtype(other)),
    };
    if rank == 0 || rank as usize > MAX_RANK {
        return Err(FormatError::BadRank(rank));
    }
    if reserved != 0 {
        return Err(FormatError::Reserved(reserved));
    }
    let dims_end = HEADER_LEN + 4 * rank as usize;
    if bytes.len() < dims_end {
        return Err(FormatError::Truncated {
            expected: dims_end,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(axis) = shape.iter().position(|&n| n == 0) {
        return Err(FormatError::ZeroExtent(axis));
    }
    let count: usize = shape.iter().product();
    let expected = dims_end + count * elem;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::Trailing(bytes.len() - expected));
    }
    let payload = &bytes[dims_end..];
    Ok(match dtype {
        0 => AnyTensor::F32(build(&shape, payload)),
        _ => AnyTensor::F64(build(&shape, payload)),
    })
}

fn build<T: Scalar>(shape: &[usize], payload: &[u8]) -> Tensor<T> {
    let data = payload
        .chunks_exact(std::mem::size_of::<T>())
        .map(T::get_le)
        .collect();
    Tensor::new(shape, data).expect("validated header")
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?)
}

/// Writes every named tensor to `<dir>/<name>.kbct`, creating `dir`.
pub fn save_bundle<T: Scalar>(
    dir: impl AsRef<Path>,
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (name, t) in entries {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid parameter name {name:?}")));
        }
        write_tensor(dir.join(format!("{name}.{EXTENSION}")), t)?;
    }
    Ok(())
}

/// Reads all `*.kbct` files in `dir`, keyed by file stem.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<BTreeMap<String, AnyTensor>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.insert(stem.to_owned(), read_tensor(&path)?);
    }
    Ok(out)
}
