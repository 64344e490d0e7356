//! GDKV-T tensor files and checkpoint bundles.
//!
//! GDKV-T layout: magic `GDKV`, u8 version (1), u8 dtype (0 = f32, 1 = u8),
//! u8 rank, one reserved byte, `rank` u32 little-endian dims, then the raw
//! row-major payload.
//!
//! A checkpoint bundle is a text manifest followed by concatenated GDKV-T
//! blobs:
//!
//! ```text
//! GDKV-MANIFEST 1
//! tensors <n>
//! <name> <byte_len>     (n lines, write order = blob order)
//!
//! <blob 0><blob 1>...
//! ```

use crate::tensor::{Tensor, Tensor32};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GDKV";
const VERSION: u8 = 1;

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "io: {e}"),
            IoError::Format(m) => write!(f, "format: {m}"),
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self, IoError> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            other => Err(IoError::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn elem_size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// A decoded GDKV-T blob.
#[derive(Debug, Clone, PartialEq)]
pub enum GdkvTensor {
    F32 { dims: Vec<u32>, data: Vec<f32> },
    U8 { dims: Vec<u32>, data: Vec<u8> },
}

impl GdkvTensor {
    pub fn dims(&self) -> &[u32] {
        match self {
            GdkvTensor::F32 { dims, .. } | GdkvTensor::U8 { dims, .. } => dims,
        }
    }

    pub fn from_tensor32(t: &Tensor32) -> Self {
        GdkvTensor::F32 {
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor32(&self) -> Result<Tensor32, IoError> {
        match self {
            GdkvTensor::F32 { dims, data } => {
                Tensor::new(dims.iter().map(|&d| d as usize).collect(), data.clone())
                    .map_err(|e| IoError::Format(e.to_string()))
            }
            GdkvTensor::U8 { .. } => Err(IoError::Format("expected f32 tensor, found u8".into())),
        }
    }

    pub fn encode(&self, out: &mut impl Write) -> Result<(), IoError> {
        let (dtype, dims) = match self {
            GdkvTensor::F32 { dims, .. } => (DType::F32, dims),
            GdkvTensor::U8 { dims, .. } => (DType::U8, dims),
        };
        if dims.len() > u8::MAX as usize {
            return Err(IoError::Format("rank exceeds 255".into()));
        }
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION, dtype.code(), dims.len() as u8, 0])?;
        for &d in dims.iter() {
            out.write_all(&d.to_le_bytes())?;
        }
        match self {
            GdkvTensor::F32 { data, .. } => {
                for &v in data {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
            GdkvTensor::U8 { data, .. } => out.write_all(data)?,
        }
        Ok(())
    }

    pub fn decode(inp: &mut impl Read) -> Result<Self, IoError> {
        let mut head = [0u8; 8];
        inp.read_exact(&mut head)?;
        if &head[0..4] != MAGIC {
            return Err(IoError::Format("bad magic bytes".into()));
        }
        if head[4] != VERSION {
            return Err(IoError::Format(format!("unsupported version {}", head[4])));
        }
        let dtype = DType::from_code(head[5])?;
        let rank = head[6] as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut buf4 = [0u8; 4];
        for _ in 0..rank {
            inp.read_exact(&mut buf4)?;
            dims.push(u32::from_le_bytes(buf4));
        }
        let count = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut payload = vec![0u8; count * dtype.elem_size()];
        inp.read_exact(&mut payload)?;
        Ok(match dtype {
            DType::F32 => GdkvTensor::F32 {
                dims,
                data: payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            },
            DType::U8 => GdkvTensor::U8 { dims, data: payload },
        })
    }

    pub fn encoded_len(&self) -> usize {
        let (dims, payload) = match self {
            GdkvTensor::F32 { dims, data } => (dims.len(), data.len() * 4),
            GdkvTensor::U8 { dims, data } => (dims.len(), data.len()),
        };
        8 + dims * 4 + payload
    }
}

pub fn write_tensor(path: &Path, t: &GdkvTensor) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    t.encode(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<GdkvTensor, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    GdkvTensor::decode(&mut r)
}

/// Named tensors serialized as a manifest plus concatenated GDKV-T blobs.
pub fn write_checkpoint(path: &Path, entries: &[(String, GdkvTensor)]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "GDKV-MANIFEST 1")?;
    writeln!(w, "tensors {}", entries.len())?;
    for (name, t) in entries {
        if name.contains(char::is_whitespace) {
            return Err(IoError::Format(format!("tensor name '{name}' contains whitespace")));
        }
        writeln!(w, "{name} {}", t.encoded_len())?;
    }
    writeln!(w)?;
    for (_, t) in entries {
        t.encode(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, GdkvTensor)>, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    // read header lines byte-wise so blob bytes are not consumed
    let mut line = Vec::new();
    let mut read_line = |r: &mut BufReader<File>| -> Result<String, IoError> {
        line.clear();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        Ok(String::from_utf8_lossy(&line).into_owned())
    };
    let header = read_line(&mut r)?;
    if header != "GDKV-MANIFEST 1" {
        return Err(IoError::Format(format!("bad manifest header '{header}'")));
    }
    let count_line = read_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::Format(format!("bad tensor count line '{count_line}'")))?;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let entry = read_line(&mut r)?;
        let mut parts = entry.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| IoError::Format("empty manifest entry".into()))?
            .to_string();
        names.push(name);
    }
    let blank = read_line(&mut r)?;
    if !blank.is_empty() {
        return Err(IoError::Format("missing blank line after manifest".into()));
    }
    let mut out = Vec::with_capacity(count);
    for name in names {
        let t = GdkvTensor::decode(&mut r)?;
        out.push((name, t));
    }
    Ok(out)
}
