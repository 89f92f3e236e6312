//! Versioned binary container shared by every checkpoint kind.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"VSDNERF\0"
//! kind       4 bytes   e.g. b"FELD", b"CDEC", b"DNSR", b"LORA", b"GTFD"
//! version    u32
//! meta_len   u32, followed by meta_len bytes of UTF-8 JSON
//! n_tensors  u32
//! per tensor:
//!   name_len u16, name bytes
//!   ndim     u8, dims u32 × ndim
//!   values   f32 × prod(dims)
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VSDNERF\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: [u8; 4],
    pub meta: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(kind: [u8; 4], meta: Value) -> Self {
        Container {
            kind,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims,
            values,
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Looks up a tensor and checks its element count, reporting `path` on failure.
    pub fn require(&self, name: &str, len: usize, path: &Path) -> Result<&[f32]> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::ingestion(path, format!("missing tensor `{name}`")))?;
        if t.values.len() != len {
            return Err(Error::ingestion(
                path,
                format!(
                    "tensor `{name}` has {} values, expected {len}",
                    t.values.len()
                ),
            ));
        }
        Ok(&t.values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.kind);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(&meta);
        out.write_u32::<LittleEndian>(self.tensors.len() as u32)
            .unwrap();
        for t in &self.tensors {
            out.write_u16::<LittleEndian>(t.name.len() as u16).unwrap();
            out.extend_from_slice(t.name.as_bytes());
            out.write_u8(t.dims.len() as u8).unwrap();
            for &d in &t.dims {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in &t.values {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: [u8; 4], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::ingestion(path, msg);
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a vsdnerf checkpoint (bad magic)".into()));
        }
        let mut kind = [0u8; 4];
        cur.read_exact(&mut kind)
            .map_err(|_| bad("truncated header".into()))?;
        if kind != expected_kind {
            return Err(bad(format!(
                "checkpoint kind {:?}, expected {:?}",
                String::from_utf8_lossy(&kind),
                String::from_utf8_lossy(&expected_kind)
            )));
        }
        let read_err = |_| bad("truncated checkpoint".into());
        let version = cur.read_u32::<LittleEndian>().map_err(read_err)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_len = cur.read_u32::<LittleEndian>().map_err(read_err)? as usize;
        let mut meta = vec![0u8; meta_len];
        cur.read_exact(&mut meta).map_err(read_err)?;
        let meta: Value =
            serde_json::from_slice(&meta).map_err(|e| bad(format!("metadata: {e}")))?;
        let n = cur.read_u32::<LittleEndian>().map_err(read_err)?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = cur.read_u16::<LittleEndian>().map_err(read_err)? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(read_err)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name not UTF-8".into()))?;
            let ndim = cur.read_u8().map_err(read_err)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.read_u32::<LittleEndian>().map_err(read_err)? as usize);
            }
            let count: usize = dims.iter().product();
            let remaining = bytes.len() - cur.position() as usize;
            if count * 4 > remaining {
                return Err(bad(format!("tensor `{name}` truncated")));
            }
            let mut values = vec![0f32; count];
            cur.read_f32_into::<LittleEndian>(&mut values)
                .map_err(read_err)?;
            tensors.push(NamedTensor { name, dims, values });
        }
        Ok(Container {
            kind,
            meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, expected_kind: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes, expected_kind, path)
    }
}
