//! Versioned binary checkpoints (`.lsc`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "LSCKPT\r\n"
//! version    u32
//! fingerprint u64     hash of the model and schedule configuration
//! step, epoch u64 x 2
//! adam steps u64 x 3  generator, global critic, local critic
//! count      u32
//! entries    count x { name_len u32, name, dtype u8, rank u32, dims u64 x rank, raw values }
//! ```

use std::fmt::Debug;
use std::io::Write;
use std::path::Path;

use longscape_tensor::{DType, Element, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::{Param, ParamStore};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"LSCKPT\r\n";
pub const VERSION: u32 = 1;

const STORES: [&str; 3] = ["gen", "cg", "cl"];
const SLOTS: [&str; 3] = ["", ".m", ".v"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated entry: {0}")]
    Truncated(String),
    #[error("configuration fingerprint mismatch: checkpoint {found:016x}, current {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Stable 64-bit hash of the `Debug` renderings of configuration values.
pub fn fingerprint(parts: &[&dyn Debug]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(format!("{p:?}").as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub fingerprint: u64,
    pub step: u64,
    pub epoch: u64,
    pub adam_steps: [u64; 3],
}

/// One stored tensor, still as raw bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

fn encode<T: Element>(state: &TrainState<T>, fp: u64) -> Vec<u8> {
    let stores = [&state.gen, &state.global, &state.local];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [fp, state.step, state.epoch] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in stores {
        out.extend_from_slice(&s.steps.to_le_bytes());
    }
    let count: usize = stores.iter().map(|s| 3 * s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (tag, store) in STORES.iter().zip(stores) {
        for (slot_i, slot) in SLOTS.iter().enumerate() {
            for (name, p) in store.iter() {
                let t = match slot_i {
                    0 => p.value.as_ref(),
                    1 => &p.m,
                    _ => &p.v,
                };
                let full = format!("{tag}{slot}/{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(T::DTYPE.tag());
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                T::to_le_bytes_vec(t.data(), &mut out);
            }
        }
    }
    out
}

/// Writes `state` atomically: the data goes to a temporary file in the
/// destination directory, which is then renamed over `path`.
pub fn save<T: Element>(state: &TrainState<T>, fp: u64, path: &Path) -> Result<()> {
    let bytes = encode(state, fp);
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CheckpointError::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses the header and every entry without interpreting names.
pub fn decode(buf: &[u8]) -> Result<(Header, Vec<Entry>)> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header = Header {
        version,
        fingerprint: r.u64("fingerprint")?,
        step: r.u64("step")?,
        epoch: r.u64("epoch")?,
        adam_steps: [r.u64("adam steps")?, r.u64("adam steps")?, r.u64("adam steps")?],
    };
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let tag = r.u8(&name)?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` has unknown dtype tag {tag}")))?;
        let rank = r.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64(&name)? as usize);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(CheckpointError::Malformed(format!("`{name}` has shape {shape:?}")));
        }
        let nbytes = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
        let bytes = r.take(nbytes, &name)?.to_vec();
        entries.push(Entry {
            name,
            dtype,
            shape,
            bytes,
        });
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last entry",
            buf.len() - r.pos
        )));
    }
    Ok((header, entries))
}

pub fn read(path: &Path) -> Result<(Header, Vec<Entry>)> {
    decode(&std::fs::read(path)?)
}

fn entry_tensor<T: Element>(e: &Entry) -> Result<Tensor<T>> {
    if e.dtype != T::DTYPE {
        return Err(CheckpointError::Malformed(format!(
            "`{}` is {:?}, expected {:?}",
            e.name,
            e.dtype,
            T::DTYPE
        )));
    }
    let data = T::from_le_bytes_slice(&e.bytes);
    Tensor::from_vec(&e.shape, data).map_err(|err| CheckpointError::Malformed(format!("`{}`: {err}", e.name)))
}

/// Rebuilds a training state. With `expected` set the stored fingerprint
/// must match it.
pub fn from_entries<T: Element>(header: &Header, entries: &[Entry], expected: Option<u64>) -> Result<TrainState<T>> {
    if let Some(fp) = expected.filter(|&fp| fp != header.fingerprint) {
        return Err(CheckpointError::Fingerprint {
            expected: fp,
            found: header.fingerprint,
        });
    }
    let mut stores: [ParamStore<T>; 3] = Default::default();
    let mut moments: std::collections::HashMap<&str, Tensor<T>> = Default::default();
    for e in entries {
        let (prefix, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| CheckpointError::Malformed(format!("entry `{}` has no store prefix", e.name)))?;
        let t = entry_tensor::<T>(e)?;
        if let Some(i) = STORES.iter().position(|&s| s == prefix) {
            stores[i]
                .insert(name, Param::new(t))
                .map_err(|_| CheckpointError::Malformed(format!("duplicate entry `{}`", e.name)))?;
        } else if STORES.iter().any(|s| prefix == format!("{s}.m") || prefix == format!("{s}.v")) {
            if moments.insert(e.name.as_str(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate entry `{}`", e.name)));
            }
        } else {
            return Err(CheckpointError::Malformed(format!("unknown store in `{}`", e.name)));
        }
    }
    let used = moments.len();
    let mut matched = 0;
    for (tag, store) in STORES.iter().zip(stores.iter_mut()) {
        for (name, p) in store.iter_mut() {
            for (slot, dst) in [(".m", &mut p.m), (".v", &mut p.v)] {
                let key = format!("{tag}{slot}/{name}");
                let t = moments
                    .remove(key.as_str())
                    .ok_or_else(|| CheckpointError::Malformed(format!("missing entry `{key}`")))?;
                if t.shape() != p.value.shape() {
                    return Err(CheckpointError::Malformed(format!("`{key}` shape differs from its parameter")));
                }
                *dst = t;
                matched += 1;
            }
        }
    }
    if matched != used {
        let stray: Vec<_> = moments.keys().collect();
        return Err(CheckpointError::Malformed(format!("moments without parameters: {stray:?}")));
    }
    let [mut gen, mut global, mut local] = stores;
    gen.steps = header.adam_steps[0];
    global.steps = header.adam_steps[1];
    local.steps = header.adam_steps[2];
    Ok(TrainState {
        gen,
        global,
        local,
        step: header.step,
        epoch: header.epoch,
    })
}

pub fn load<T: Element>(path: &Path, expected: Option<u64>) -> Result<TrainState<T>> {
    let (header, entries) = read(path)?;
    from_entries(&header, &entries, expected)
}
