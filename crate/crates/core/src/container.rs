//! STC1 tensor container: a one-line JSON header, a little-endian payload and
//! a trailing CRC-64/XZ checksum of the payload.
//!
//! ```text
//! {"version":"STC1","dtype":"f64","shape":[2,3],"layout":"row-major","byte_order":"little","metadata":{}}\n
//! <prod(shape) * dtype_size bytes>
//! <8 bytes: CRC-64 of the payload, little-endian>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const VERSION: &str = "STC1";
pub const SUPPORTED_VERSIONS: &[&str] = &[VERSION];

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    C128,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::C128 => 16,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    C128(Vec<Complex64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::C128(_) => DType::C128,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::C128(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            Payload::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::C128(v) => v
                .iter()
                .flat_map(|z| z.re.to_le_bytes().into_iter().chain(z.im.to_le_bytes()))
                .collect(),
            Payload::U8(v) => v.clone(),
        }
    }

    fn from_bytes(dtype: DType, bytes: &[u8]) -> Payload {
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        match dtype {
            DType::F64 => Payload::F64(bytes.chunks_exact(8).map(f).collect()),
            DType::C128 => Payload::C128(
                bytes
                    .chunks_exact(16)
                    .map(|c| Complex64::new(f(&c[..8]), f(&c[8..])))
                    .collect(),
            ),
            DType::U8 => Payload::U8(bytes.to_vec()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    dtype: DType,
    shape: Vec<usize>,
    layout: String,
    byte_order: String,
    metadata: Value,
}

/// One tensor plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub shape: Vec<usize>,
    pub payload: Payload,
    pub metadata: Value,
}

impl TensorContainer {
    pub fn new(shape: Vec<usize>, payload: Payload, metadata: Value) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != payload.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} holds {n} elements but payload has {}",
                payload.len()
            )));
        }
        Ok(Self {
            shape,
            payload,
            metadata,
        })
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>, metadata: Value) -> Result<Self> {
        Self::new(shape, Payload::F64(data), metadata)
    }

    pub fn c128(shape: Vec<usize>, data: Vec<Complex64>, metadata: Value) -> Result<Self> {
        Self::new(shape, Payload::C128(data), metadata)
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::F64(v) => Ok(v),
            other => Err(Error::Format(format!("expected f64 payload, found {:?}", other.dtype()))),
        }
    }

    pub fn as_c128(&self) -> Result<&[Complex64]> {
        match &self.payload {
            Payload::C128(v) => Ok(v),
            other => Err(Error::Format(format!("expected c128 payload, found {:?}", other.dtype()))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Ok(v),
            other => Err(Error::Format(format!("expected u8 payload, found {:?}", other.dtype()))),
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            version: VERSION.to_string(),
            dtype: self.payload.dtype(),
            shape: self.shape.clone(),
            layout: "row-major".to_string(),
            byte_order: "little".to_string(),
            metadata: self.metadata.clone(),
        };
        let mut line = serde_json::to_vec(&header)?;
        line.push(b'\n');
        let payload = self.payload.to_bytes();
        out.write_all(&line)?;
        out.write_all(&payload)?;
        out.write_all(&CHECKSUM.checksum(&payload).to_le_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("missing header line terminator".into()));
        }
        let raw: Value = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        match raw.get("version").and_then(Value::as_str) {
            Some(v) if SUPPORTED_VERSIONS.contains(&v) => {}
            other => {
                return Err(Error::Format(format!(
                    "unknown container version {other:?}; supported versions: {}",
                    SUPPORTED_VERSIONS.join(", ")
                )))
            }
        }
        let header: Header = serde_json::from_value(raw)
            .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
        if header.layout != "row-major" || header.byte_order != "little" {
            return Err(Error::Format(format!(
                "unsupported layout/byte order {}/{}",
                header.layout, header.byte_order
            )));
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        let n: usize = header.shape.iter().product();
        let expected = n * header.dtype.size();
        if rest.len() != expected + 8 {
            return Err(Error::Format(format!(
                "header shape {:?} ({:?}) implies {} payload bytes plus 8 checksum bytes, found {} bytes",
                header.shape,
                header.dtype,
                expected,
                rest.len()
            )));
        }
        let (payload, tail) = rest.split_at(expected);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = CHECKSUM.checksum(payload);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        Ok(Self {
            shape: header.shape,
            payload: Payload::from_bytes(header.dtype, payload),
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}
