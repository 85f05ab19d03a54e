//! Versioned binary container for training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSRN" | u32 version | u64 config hash | u32 entry count
//! entry: u32 name length | name | u8 kind | u32 rank | u64 dims… | u64 count | payload
//! ```
//!
//! Kind 0 carries `count` `f64` values, kind 1 carries `count` raw bytes.

use std::collections::BTreeMap;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DSRN";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checkpoint written for config {found:016x}, current config is {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("checkpoint entry `{0}` missing or of the wrong kind")]
    Missing(String),
    #[error("checkpoint entry `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Floats { shape: Vec<usize>, data: Vec<f64> },
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub entries: BTreeMap<String, Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str, unit: usize) -> Result<usize, CheckpointError> {
        let start = self.pos;
        let n = self.u64(what)?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > remaining) {
            self.pos = start;
            return Err(self.corrupt(format!("{what} {n} exceeds remaining {remaining} bytes")));
        }
        Ok(n as usize)
    }
}

impl Checkpoint {
    pub fn new(config_hash: u64) -> Self {
        Self {
            config_hash,
            entries: BTreeMap::new(),
        }
    }

    pub fn put_floats(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(
            name.into(),
            Entry::Floats {
                shape: shape.to_vec(),
                data,
            },
        );
    }

    pub fn put_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.entries.insert(name.into(), Entry::Bytes(bytes));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, values: &[u64]) {
        self.put_bytes(name, values.iter().flat_map(|v| v.to_le_bytes()).collect());
    }

    pub fn floats(&self, name: &str) -> Result<(&[usize], &[f64]), CheckpointError> {
        match self.entries.get(name) {
            Some(Entry::Floats { shape, data }) => Ok((shape, data)),
            _ => Err(CheckpointError::Missing(name.into())),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8], CheckpointError> {
        match self.entries.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            _ => Err(CheckpointError::Missing(name.into())),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>, CheckpointError> {
        let b = self.bytes(name)?;
        if b.len() % 8 != 0 {
            return Err(CheckpointError::Invalid {
                name: name.into(),
                reason: format!("{} bytes is not a whole number of u64", b.len()),
            });
        }
        Ok(b.chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Names under `prefix`, with the prefix stripped.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .range(prefix.to_string()..)
            .map(|(k, _)| k.as_str())
            .take_while(move |k| k.starts_with(prefix))
            .map(move |k| &k[prefix.len()..])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Floats { shape, data } => {
                    out.push(0);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(1);
                    out.extend_from_slice(&0u32.to_le_bytes());
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            r.pos = 0;
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            r.pos -= 4;
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let config_hash = r.u64("config hash")?;
        let count = r.u32("entry count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_start = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| CheckpointError::Corrupt {
                    offset: name_start,
                    reason: "name is not UTF-8".into(),
                })?
                .to_string();
            let kind_at = r.pos;
            let kind = r.u8("entry kind")?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                r.pos -= 4;
                return Err(r.corrupt(format!("rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let entry = match kind {
                0 => {
                    let n = r.len("float count", 8)?;
                    if shape.iter().product::<usize>() != n {
                        return Err(r.corrupt(format!("shape {shape:?} does not hold {n} values")));
                    }
                    let data = r
                        .take(n * 8, "floats")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Entry::Floats { shape, data }
                }
                1 => {
                    let n = r.len("byte count", 1)?;
                    Entry::Bytes(r.take(n, "bytes")?.to_vec())
                }
                k => {
                    return Err(CheckpointError::Corrupt {
                        offset: kind_at,
                        reason: format!("unknown entry kind {k}"),
                    })
                }
            };
            if entries.insert(name, entry).is_some() {
                return Err(CheckpointError::Corrupt {
                    offset: name_start,
                    reason: "duplicate entry".into(),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_config(&self, expected: u64) -> Result<(), CheckpointError> {
        if self.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch {
                expected,
                found: self.config_hash,
            });
        }
        Ok(())
    }
}
