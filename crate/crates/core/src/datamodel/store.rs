//! Binary feature store.
//!
//! Little-endian layout:
//!
//! ```text
//! "HFRS" | u32 version (=1) | u64 entry count
//! per entry: u32 id length | id (UTF-8) | u8 rank (1..=3) | rank x u32 dims (d, h, w) | f32 values
//! ```
//!
//! Values are channel-major. Tensors with `h = w = 1` are written as rank 1.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::FeatureTensor;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"HFRS";
pub const STORE_VERSION: u32 = 1;

pub fn write_feature_store<P: AsRef<Path>>(path: P, entries: &[(String, FeatureTensor)]) -> Result<()> {
    let mut seen = HashMap::with_capacity(entries.len());
    for (id, t) in entries {
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("store entry `{id}`")));
        }
    }

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(STORE_MAGIC)?;
    out.write_all(&STORE_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (id, t) in entries {
        let id_len = u32::try_from(id.len()).map_err(|_| Error::DimensionOverflow(format!("id length of `{id}`")))?;
        out.write_all(&id_len.to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        let dims: Vec<usize> = if t.h() == 1 && t.w() == 1 { vec![t.d()] } else { vec![t.d(), t.h(), t.w()] };
        out.write_all(&[dims.len() as u8])?;
        for d in dims {
            let d = u32::try_from(d).map_err(|_| Error::DimensionOverflow(format!("dims of `{id}`")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_feature_store<P: AsRef<Path>>(path: P) -> Result<Vec<(String, FeatureTensor)>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("{what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn parse(bytes: &[u8]) -> Result<Vec<(String, FeatureTensor)>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "magic").map_err(|_| Error::BadMagic)?;
    if magic != STORE_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u64::from_le_bytes(cur.take(8, "entry count")?.try_into().unwrap());
    // every entry needs at least 4 + 1 + 4 + 4 bytes
    if count > (cur.remaining() / 13) as u64 {
        return Err(Error::Truncated(format!("{count} entries declared, file too short")));
    }

    let mut out = Vec::with_capacity(count as usize);
    for n in 0..count {
        let id_len = cur.u32("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| Error::InvalidArgument(format!("entry {n}: id is not UTF-8")))?
            .to_string();
        let rank = cur.take(1, "rank")?[0];
        if !(1..=3).contains(&rank) {
            return Err(Error::InvalidArgument(format!("entry `{id}`: rank {rank} not in 1..=3")));
        }
        let mut dims = [1usize; 3];
        for slot in dims.iter_mut().take(rank as usize) {
            *slot = cur.u32("dims")? as usize;
        }
        let [d, h, w] = dims;
        let len = d
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= cur.remaining()))
            .ok_or_else(|| Error::DimensionOverflow(format!("entry `{id}` declares {d}x{h}x{w}")))?;
        let raw = cur.take(len * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = FeatureTensor::new(d, h, w, data).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("store entry `{id}`")),
            other => other,
        })?;
        out.push((id, t));
    }
    if cur.remaining() != 0 {
        log::warn!("feature store has {} trailing bytes", cur.remaining());
    }
    Ok(out)
}

/// `path` with `.json` appended, where models keep their metadata.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// In-memory keyed view over a feature store, preserving insertion order.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    entries: Vec<(String, FeatureTensor)>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut store = Self::new();
        for (id, t) in read_feature_store(path)? {
            store.insert(id, t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: String, tensor: FeatureTensor) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push((id, tensor));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureTensor> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, id: &str) -> Result<&FeatureTensor> {
        self.get(id).ok_or_else(|| Error::MissingFeature(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, FeatureTensor)] {
        &self.entries
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        write_feature_store(path, &self.entries)
    }
}
