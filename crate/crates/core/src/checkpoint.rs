//! Checkpoint container and binary serialization.
//!
//! A checkpoint is a sorted map from tensor names to f32 payloads. The on-disk
//! layout is fixed little-endian: magic `BMTC`, format version, record count,
//! then per record the name (u16 length prefix), rank as u8, dims as u32, and
//! the raw f32 payload. Records are written in ascending name order, so
//! serialization is canonical: load followed by save reproduces the input
//! byte for byte.
//!
//! Run metadata travels inside the same map under reserved `__meta.` names.
//! Those records are bit carriers, not numbers: consumers that operate on
//! tensor values (averaging, interpolation, init) must skip them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::ModelError;

const MAGIC: &[u8; 4] = b"BMTC";
const FORMAT_VERSION: u32 = 1;

/// Prefix for reserved metadata records.
pub const META_PREFIX: &str = "__meta.";

const META_STEP: &str = "__meta.step";
const META_EPOCH: &str = "__meta.epoch";
const META_CONFIG_DIGEST: &str = "__meta.config_digest";
const META_SOURCE_PATHS: &str = "__meta.source_paths";

/// One named tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// An in-memory checkpoint: named f32 tensors plus reserved metadata records.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    records: BTreeMap<String, Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a record. Names must be unique and shapes must match the
    /// payload length exactly.
    pub fn insert(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<(), ModelError> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(ModelError::Checkpoint(format!(
                "record name length {} outside 1..={}",
                name.len(),
                u16::MAX
            )));
        }
        if shape.is_empty() || shape.len() > u8::MAX as usize {
            return Err(ModelError::Checkpoint(format!(
                "record {name} has rank {}, expected 1..={}",
                shape.len(),
                u8::MAX
            )));
        }
        if shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(ModelError::Checkpoint(format!(
                "record {name} has a dim outside 1..={}",
                u32::MAX
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ModelError::Checkpoint(format!(
                "record {name}: shape {shape:?} wants {numel} values, payload has {}",
                data.len()
            )));
        }
        if self.records.contains_key(name) {
            return Err(ModelError::Checkpoint(format!("duplicate record {name}")));
        }
        self.records.insert(name.to_string(), Record { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.get(name)
    }

    /// All record names in ascending order, metadata included.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    /// Tensor record names in ascending order, metadata excluded.
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !n.starts_with(META_PREFIX))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stores step, epoch, and the config digest. The digest is carried as
    /// two bit-cast f32 words (high, low); no arithmetic ever touches them.
    pub fn set_meta(&mut self, step: u64, epoch: u64, config_digest: u64) {
        self.records.insert(
            META_STEP.into(),
            Record { shape: vec![1], data: vec![step as f32] },
        );
        self.records.insert(
            META_EPOCH.into(),
            Record { shape: vec![1], data: vec![epoch as f32] },
        );
        let hi = f32::from_bits((config_digest >> 32) as u32);
        let lo = f32::from_bits(config_digest as u32);
        self.records.insert(
            META_CONFIG_DIGEST.into(),
            Record { shape: vec![2], data: vec![hi, lo] },
        );
    }

    pub fn meta_step(&self) -> Option<u64> {
        self.get(META_STEP).map(|r| r.data[0] as u64)
    }

    pub fn meta_epoch(&self) -> Option<u64> {
        self.get(META_EPOCH).map(|r| r.data[0] as u64)
    }

    pub fn meta_config_digest(&self) -> Option<u64> {
        self.get(META_CONFIG_DIGEST).and_then(|r| {
            if r.data.len() != 2 {
                return None;
            }
            let hi = r.data[0].to_bits() as u64;
            let lo = r.data[1].to_bits() as u64;
            Some((hi << 32) | lo)
        })
    }

    /// Records the paths this checkpoint was derived from, one byte per f32.
    pub fn set_source_paths(&mut self, paths: &[String]) {
        let joined = paths.join("\n");
        let data: Vec<f32> = joined.bytes().map(|b| b as f32).collect();
        let shape = vec![data.len().max(1)];
        let data = if data.is_empty() { vec![0.0] } else { data };
        self.records
            .insert(META_SOURCE_PATHS.into(), Record { shape, data });
    }

    pub fn source_paths(&self) -> Option<Vec<String>> {
        let rec = self.get(META_SOURCE_PATHS)?;
        let bytes: Vec<u8> = rec.data.iter().map(|&f| f as u8).collect();
        if bytes == [0] {
            return Some(Vec::new());
        }
        let joined = String::from_utf8(bytes).ok()?;
        Some(joined.split('\n').map(str::to_string).collect())
    }

    /// Serializes to the canonical byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rec.shape.len() as u8);
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &f in &rec.data {
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        out
    }

    /// Parses the canonical byte layout. Errors carry the byte offset of the
    /// first inconsistency.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize, what: &str| -> Result<&[u8], ModelError> {
            if *off + n > bytes.len() {
                return Err(ModelError::Checkpoint(format!(
                    "truncated reading {what} at byte {off} (need {n}, have {})",
                    bytes.len() - *off
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };

        let magic = take(&mut off, 4, "magic")?;
        if magic != MAGIC {
            return Err(ModelError::Checkpoint(format!(
                "bad magic {magic:?} at byte 0, expected {MAGIC:?}"
            )));
        }
        let version = u32::from_le_bytes(take(&mut off, 4, "version")?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {version} at byte 4"
            )));
        }
        let count = u32::from_le_bytes(take(&mut off, 4, "record count")?.try_into().unwrap());

        let mut records = BTreeMap::new();
        let mut prev_name: Option<String> = None;
        for _ in 0..count {
            let name_at = off;
            let name_len =
                u16::from_le_bytes(take(&mut off, 2, "name length")?.try_into().unwrap()) as usize;
            let name_bytes = take(&mut off, name_len, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| {
                    ModelError::Checkpoint(format!("record name at byte {name_at} is not UTF-8"))
                })?
                .to_string();
            if let Some(prev) = &prev_name {
                if *prev >= name {
                    return Err(ModelError::Checkpoint(format!(
                        "record {name} at byte {name_at} breaks ascending name order after {prev}"
                    )));
                }
            }
            let rank = take(&mut off, 1, "rank")?[0] as usize;
            if rank == 0 {
                return Err(ModelError::Checkpoint(format!(
                    "record {name} has rank 0 at byte {}",
                    off - 1
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u32::from_le_bytes(take(&mut off, 4, "dim")?.try_into().unwrap()) as usize;
                if d == 0 {
                    return Err(ModelError::Checkpoint(format!(
                        "record {name} has a zero dim at byte {}",
                        off - 4
                    )));
                }
                shape.push(d);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut off, numel * 4, "payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            prev_name = Some(name.clone());
            records.insert(name, Record { shape, data });
        }
        if off != bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} trailing bytes after last record at byte {off}",
                bytes.len() - off
            )));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Arithmetic mean of checkpoints, element-wise per tensor.
///
/// Metadata records are skipped: step and epoch are carried over from the
/// last input, the config digest from the first, and the source list is
/// replaced by `paths` when given. Tensor name sets and shapes must agree
/// across all inputs.
pub fn average(ckpts: &[Checkpoint], paths: Option<&[String]>) -> Result<Checkpoint, ModelError> {
    if ckpts.is_empty() {
        return Err(ModelError::Checkpoint(
            "average of zero checkpoints".into(),
        ));
    }
    let first = &ckpts[0];
    let names: Vec<&str> = first.tensor_names().collect();
    for (i, c) in ckpts.iter().enumerate().skip(1) {
        let other: Vec<&str> = c.tensor_names().collect();
        if other != names {
            let missing = names
                .iter()
                .find(|n| !other.contains(n))
                .copied()
                .or_else(|| other.iter().find(|n| !names.contains(n)).copied())
                .unwrap_or("<none>");
            return Err(ModelError::Checkpoint(format!(
                "checkpoint {i} disagrees on tensor names, first discrepancy: {missing}"
            )));
        }
        for n in &names {
            let a = first.get(n).unwrap();
            let b = c.get(n).unwrap();
            if a.shape != b.shape {
                return Err(ModelError::ShapeMismatch {
                    name: (*n).to_string(),
                    found: b.shape.clone(),
                    expected: a.shape.clone(),
                });
            }
        }
    }

    let k = ckpts.len() as f64;
    let mut out = Checkpoint::new();
    for n in &names {
        let shape = first.get(n).unwrap().shape.clone();
        let numel: usize = shape.iter().product();
        let mut acc = vec![0f64; numel];
        for c in ckpts {
            for (a, &v) in acc.iter_mut().zip(&c.get(n).unwrap().data) {
                *a += v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|&s| (s / k) as f32).collect();
        out.insert(n, shape, data)?;
    }

    let last = ckpts.last().unwrap();
    out.set_meta(
        last.meta_step().unwrap_or(0),
        last.meta_epoch().unwrap_or(0),
        first.meta_config_digest().unwrap_or(0),
    );
    if let Some(paths) = paths {
        out.set_source_paths(paths);
    }
    Ok(out)
}
