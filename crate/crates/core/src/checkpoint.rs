//! Self-describing binary checkpoints. The byte layout is documented in
//! `docs/checkpoint.md`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EVL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("checkpoint does not match its spec: {0}")]
    SpecMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Classifier,
    CycleGan,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Classifier => 1,
            CheckpointKind::CycleGan => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(CheckpointKind::Classifier),
            2 => Some(CheckpointKind::CycleGan),
            _ => None,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub config_digest: [u8; 32],
    pub spec_text: String,
    pub records: Vec<Record>,
}

/// SHA-256 of a resolved configuration text.
pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header_start = out.len();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&(self.spec_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.spec_text.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let crc = crc32fast::hash(&out[header_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        for r in &self.records {
            let start = out.len();
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&((r.data.len() * 4) as u64).to_le_bytes());
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind_code = r.u8("kind")?;
        let seed = r.u64("seed")?;
        let config_digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let spec_len = r.u32("spec length")? as usize;
        let spec_bytes = r.take(spec_len, "spec text")?;
        let count = r.u32("record count")? as usize;
        let header_crc = crc32fast::hash(&bytes[4..r.pos]);
        if r.u32("header checksum")? != header_crc {
            return Err(CheckpointError::Integrity("header checksum mismatch".into()));
        }
        let kind = CheckpointKind::from_code(kind_code)
            .ok_or_else(|| CheckpointError::Integrity(format!("unknown kind {kind_code}")))?;
        let spec_text = String::from_utf8(spec_bytes.to_vec())
            .map_err(|_| CheckpointError::Integrity("spec text is not UTF-8".into()))?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let start = r.pos;
            let what = |field: &str| format!("record {i} {field}");
            let name_len = r.u16(&what("name length"))? as usize;
            let name_bytes = r.take(name_len, &what("name"))?.to_vec();
            let ndim = r.u8(&what("rank"))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32(&what("shape")).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let payload_len = r.u64(&what("payload length"))?;
            let payload = r.take(usize::try_from(payload_len).unwrap_or(usize::MAX), &what("payload"))?;
            let crc = crc32fast::hash(&bytes[start..r.pos]);
            if r.u32(&what("checksum"))? != crc {
                return Err(CheckpointError::Integrity(format!("record {i} checksum mismatch")));
            }
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CheckpointError::Integrity(format!("record {i} name is not UTF-8")))?;
            let elems: usize = shape.iter().product();
            if payload.len() != elems * 4 {
                return Err(CheckpointError::Integrity(format!(
                    "record `{name}`: shape {shape:?} needs {} bytes, payload has {}",
                    elems * 4,
                    payload.len()
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(Record { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Integrity(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            seed,
            config_digest,
            spec_text,
            records,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut tmp = PathBuf::from(path);
        tmp.set_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(CheckpointError::SpecMismatch(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
