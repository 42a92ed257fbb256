//! Named-tensor parameter sets and the algebra the aggregator needs over them.
//!
//! A [`ParameterSet`] is immutable once built. Every operation that combines
//! several sets first checks that they share a schema (same tensor names and
//! shapes in the same order), which is summarised by a SHA-256 digest.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Vector norm used for parameter-space distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    #[default]
    L2,
}

/// Whether distances (and weights derived from them) are taken over the whole
/// flattened set or separately for each named tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    #[default]
    PerTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidTensor {
            name: name.clone(),
            reason,
        };
        if shape.is_empty() || shape.contains(&0) {
            return Err(invalid(format!(
                "shape {shape:?} must be nonempty and positive"
            )));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(invalid(format!(
                "{} values for shape {shape:?} (expected {expected})",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite value {} at index {i}",
                values[i]
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.name.clone(), self.shape.clone(), values)
    }
}

/// SHA-256 digest over the ordered `(name, shape)` sequence of a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SchemaHash([u8; 32]);

impl SchemaHash {
    fn of(entries: &[TensorEntry]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update((entries.len() as u64).to_le_bytes());
        for e in entries {
            hasher.update((e.name.len() as u64).to_le_bytes());
            hasher.update(e.name.as_bytes());
            hasher.update((e.shape.len() as u64).to_le_bytes());
            for &d in &e.shape {
                hasher.update((d as u64).to_le_bytes());
            }
        }
        Self(hasher.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for SchemaHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<TensorEntry>,
    schema_hash: SchemaHash,
}

impl ParameterSet {
    pub fn new(entries: Vec<TensorEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("parameter set has no tensors"));
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::InvalidTensor {
                    name: e.name.clone(),
                    reason: "duplicate tensor name".into(),
                });
            }
        }
        let schema_hash = SchemaHash::of(&entries);
        Ok(Self {
            entries,
            schema_hash,
        })
    }

    /// Builds a set from `(name, shape, values)` triples.
    pub fn from_parts<S: Into<String>>(parts: Vec<(S, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let entries = parts
            .into_iter()
            .map(|(n, s, v)| TensorEntry::new(n, s, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    /// A set with the same schema as `self` whose values all equal `value`.
    pub fn filled(&self, value: f64) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|e| e.with_values(vec![value; e.len()]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn schema_hash(&self) -> SchemaHash {
        self.schema_hash
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(TensorEntry::len).sum()
    }

    /// All values concatenated in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.values.iter().copied())
            .collect()
    }

    /// Rebuilds a set with this schema from a flat value vector.
    pub fn with_flat_values(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_elements() {
            return Err(Error::LengthMismatch {
                expected: self.num_elements(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            entries.push(e.with_values(flat[offset..offset + e.len()].to_vec())?);
            offset += e.len();
        }
        Self::new(entries)
    }

    pub fn is_compatible(&self, other: &ParameterSet) -> bool {
        self.schema_hash == other.schema_hash
    }

    pub fn ensure_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::SchemaMismatch(format!(
                "schema {} vs {}",
                self.schema_hash, other.schema_hash
            )))
        }
    }

    /// Writes the binary checkpoint format (see `docs/FORMATS.md`).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dtype: CHECKPOINT_DTYPE.into(),
            schema_hash: self.schema_hash.to_hex(),
            tensors: self
                .entries
                .iter()
                .map(|e| HeaderTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.entries {
            let mut buf = Vec::with_capacity(e.len() * 8);
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| corrupt("truncated header length"))?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER_LEN {
            return Err(corrupt("header length out of range"));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)
            .map_err(|_| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT
            || header.version != CHECKPOINT_VERSION
            || header.dtype != CHECKPOINT_DTYPE
        {
            return Err(corrupt("unsupported format, version or dtype"));
        }
        let mut entries = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|_| corrupt("truncated payload"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push(
                TensorEntry::new(t.name, t.shape, values)
                    .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?,
            );
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(corrupt("trailing bytes after payload"));
        }
        let set = Self::new(entries).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if set.schema_hash.to_hex() != header.schema_hash {
            return Err(corrupt("schema hash does not match tensors"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FSPARAM\0";
const CHECKPOINT_FORMAT: &str = "fedsim-params";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_DTYPE: &str = "f64-le";
const MAX_HEADER_LEN: u64 = 1 << 26;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    dtype: String,
    schema_hash: String,
    tensors: Vec<HeaderTensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderTensor {
    name: String,
    shape: Vec<usize>,
}

fn ensure_all_compatible(sets: &[&ParameterSet]) -> Result<()> {
    let first = sets.first().ok_or(Error::EmptyInput("no parameter sets"))?;
    for s in &sets[1..] {
        first.ensure_compatible(s)?;
    }
    Ok(())
}

/// Elementwise arithmetic mean of schema-compatible sets.
pub fn mean_params(sets: &[&ParameterSet]) -> Result<ParameterSet> {
    ensure_all_compatible(sets)?;
    let n = sets.len() as f64;
    let first = sets[0];
    let entries = (0..first.num_tensors())
        .map(|t| {
            let len = first.entries[t].len();
            let mut acc = vec![0.0; len];
            for s in sets {
                for (a, v) in acc.iter_mut().zip(&s.entries[t].values) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n);
            first.entries[t].with_values(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterSet::new(entries)
}

/// Distance between two sets, either one scalar or one scalar per tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Distance {
    Global(f64),
    /// One value per tensor, in schema order.
    PerTensor(Vec<f64>),
}

fn norm_of_diff(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Norm::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Per-tensor distances, in schema order.
pub fn tensor_distances(a: &ParameterSet, b: &ParameterSet, norm: Norm) -> Result<Vec<f64>> {
    a.ensure_compatible(b)?;
    Ok(a.entries
        .iter()
        .zip(&b.entries)
        .map(|(x, y)| norm_of_diff(&x.values, &y.values, norm))
        .collect())
}

/// Distance over the flattened sets.
pub fn global_distance(a: &ParameterSet, b: &ParameterSet, norm: Norm) -> Result<f64> {
    a.ensure_compatible(b)?;
    Ok(match norm {
        Norm::L1 => a
            .entries
            .iter()
            .zip(&b.entries)
            .map(|(x, y)| norm_of_diff(&x.values, &y.values, Norm::L1))
            .sum(),
        Norm::L2 => a
            .entries
            .iter()
            .zip(&b.entries)
            .flat_map(|(x, y)| x.values.iter().zip(&y.values))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt(),
    })
}

pub fn distance(a: &ParameterSet, b: &ParameterSet, scope: Scope, norm: Norm) -> Result<Distance> {
    Ok(match scope {
        Scope::Global => Distance::Global(global_distance(a, b, norm)?),
        Scope::PerTensor => Distance::PerTensor(tensor_distances(a, b, norm)?),
    })
}

/// Elementwise `Σᵢ wᵢ·pᵢ`. Weights are used as given.
pub fn axpy_combine(weights: &[f64], sets: &[&ParameterSet]) -> Result<ParameterSet> {
    let per_tensor: Vec<&[f64]> = match sets.first() {
        Some(s) => vec![weights; s.num_tensors()],
        None => return Err(Error::EmptyInput("no parameter sets")),
    };
    combine_per_tensor(&per_tensor, sets)
}

/// Like [`axpy_combine`], with a separate weight vector for each tensor.
/// `weights[t][i]` scales tensor `t` of set `i`.
pub fn combine_per_tensor<W: AsRef<[f64]>>(
    weights: &[W],
    sets: &[&ParameterSet],
) -> Result<ParameterSet> {
    ensure_all_compatible(sets)?;
    let first = sets[0];
    if weights.len() != first.num_tensors() {
        return Err(Error::LengthMismatch {
            expected: first.num_tensors(),
            actual: weights.len(),
        });
    }
    let mut entries = Vec::with_capacity(first.num_tensors());
    for (t, w) in weights.iter().enumerate() {
        let w = w.as_ref();
        if w.len() != sets.len() {
            return Err(Error::LengthMismatch {
                expected: sets.len(),
                actual: w.len(),
            });
        }
        let mut acc = vec![0.0; first.entries[t].len()];
        for (wi, s) in w.iter().zip(sets) {
            for (a, v) in acc.iter_mut().zip(&s.entries[t].values) {
                *a += wi * v;
            }
        }
        entries.push(first.entries[t].with_values(acc)?);
    }
    ParameterSet::new(entries)
}
