//! In-memory datasets and their on-disk cache.
//!
//! Cache file layout, all integers little-endian:
//!
//! ```text
//! magic "SPGD" | version u32 | kind u8 | split u8 | has_clean u8
//! samples u64 | units_per_sample u64 | feature_dim u64 | classes u64
//! grid_h u64 | grid_w u64                  (zero when not a grid task)
//! features f64 x samples*units*feature_dim
//! targets  u64 x samples*units
//! clean    u8  x samples*units             (only when has_clean = 1)
//! ```

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Split, TaskKind, TaskSpec};
use crate::autodiff::Tensor;
use crate::error::{Result, SpgError};
use crate::io::{ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"SPGD";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub split: Split,
    pub samples: usize,
    pub units_per_sample: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub grid: Option<(usize, usize)>,
    /// `samples * units_per_sample * feature_dim`, row-major
    pub features: Vec<f64>,
    /// one class per unit
    pub targets: Vec<usize>,
    /// per-unit flag for positions untouched by label noise
    pub clean: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    Dense(Tensor),
    Tokens { indices: Vec<usize>, window: usize },
}

impl BatchInput {
    pub fn rows(&self) -> usize {
        match self {
            BatchInput::Dense(t) => t.shape()[0],
            BatchInput::Tokens { indices, window } => indices.len() / window,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            BatchInput::Dense(t) => t.shape()[1],
            BatchInput::Tokens { window, .. } => *window,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: usize,
    pub input: BatchInput,
    pub targets: Vec<usize>,
    pub clean: Option<Vec<bool>>,
}

impl Dataset {
    pub fn units(&self) -> usize {
        self.samples * self.units_per_sample
    }

    /// Gather the given samples into one batch of units.
    pub fn batch(&self, samples: &[usize]) -> Result<Batch> {
        if samples.is_empty() {
            return Err(SpgError::invalid("empty batch"));
        }
        let (u, f) = (self.units_per_sample, self.feature_dim);
        let mut feats = Vec::with_capacity(samples.len() * u * f);
        let mut targets = Vec::with_capacity(samples.len() * u);
        let mut clean = self.clean.as_ref().map(|_| Vec::with_capacity(samples.len() * u));
        for &s in samples {
            if s >= self.samples {
                return Err(SpgError::OutOfRange {
                    what: "sample",
                    index: s,
                    bound: self.samples,
                });
            }
            feats.extend_from_slice(&self.features[s * u * f..(s + 1) * u * f]);
            targets.extend_from_slice(&self.targets[s * u..(s + 1) * u]);
            if let (Some(out), Some(src)) = (clean.as_mut(), self.clean.as_ref()) {
                out.extend_from_slice(&src[s * u..(s + 1) * u]);
            }
        }
        let input = match self.kind {
            TaskKind::LanguageModeling => BatchInput::Tokens {
                indices: feats.iter().map(|&x| x as usize).collect(),
                window: f,
            },
            _ => BatchInput::Dense(Tensor::new(vec![samples.len() * u, f], feats)?),
        };
        Ok(Batch {
            samples: samples.len(),
            input,
            targets,
            clean,
        })
    }

    /// Consecutive batches over the whole split, in order.
    pub fn sequential_batches(&self, size: usize) -> Result<Vec<Batch>> {
        let order: Vec<usize> = (0..self.samples).collect();
        order.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(match self.kind {
            TaskKind::Classification => 0,
            TaskKind::Segmentation => 1,
            TaskKind::LanguageModeling => 2,
        });
        w.u8(self.split.tag());
        w.u8(u8::from(self.clean.is_some()));
        for v in [self.samples, self.units_per_sample, self.feature_dim, self.classes] {
            w.u64(v as u64);
        }
        let (h, gw) = self.grid.unwrap_or((0, 0));
        w.u64(h as u64);
        w.u64(gw as u64);
        w.f64s(&self.features);
        for &t in &self.targets {
            w.u64(t as u64);
        }
        if let Some(c) = &self.clean {
            for &b in c {
                w.u8(u8::from(b));
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(SpgError::Format("not a dataset cache file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SpgError::Format(format!(
                "dataset cache version {version}, expected {VERSION}"
            )));
        }
        let kind = match r.u8()? {
            0 => TaskKind::Classification,
            1 => TaskKind::Segmentation,
            2 => TaskKind::LanguageModeling,
            k => return Err(SpgError::Format(format!("unknown task tag {k}"))),
        };
        let split = Split::from_tag(r.u8()?)?;
        let has_clean = r.u8()? == 1;
        let samples = r.usize()?;
        let units_per_sample = r.usize()?;
        let feature_dim = r.usize()?;
        let classes = r.usize()?;
        let (h, w) = (r.usize()?, r.usize()?);
        let units = samples
            .checked_mul(units_per_sample)
            .ok_or_else(|| SpgError::Format("dataset size overflow".into()))?;
        let features = r.f64s(units * feature_dim)?;
        let targets = (0..units).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let clean = if has_clean {
            Some((0..units).map(|_| Ok(r.u8()? == 1)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        r.expect_end()?;
        Ok(Dataset {
            kind,
            split,
            samples,
            units_per_sample,
            feature_dim,
            classes,
            grid: (h > 0).then_some((h, w)),
            features,
            targets,
            clean,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Hex SHA-256 of the canonical JSON form of a task spec.
pub fn cache_key(spec: &TaskSpec) -> Result<String> {
    let canonical = serde_json::to_vec(spec)?;
    let digest = Sha256::digest(&canonical);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Read a split from `dir` if cached, otherwise generate and cache it.
pub fn load_or_generate(spec: &TaskSpec, split: Split, dir: &Path) -> Result<Dataset> {
    let path: PathBuf = dir.join(format!("{}-{}.spgd", cache_key(spec)?, split.name()));
    if path.exists() {
        let bytes = std::fs::read(&path).map_err(|e| SpgError::io(&path, e))?;
        return Dataset::from_bytes(&bytes);
    }
    let data = spec.generate(split)?;
    std::fs::create_dir_all(dir).map_err(|e| SpgError::io(dir, e))?;
    std::fs::write(&path, data.to_bytes()).map_err(|e| SpgError::io(&path, e))?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        for spec in [
            TaskSpec::blobs_preset(2),
            TaskSpec::shapes_preset(2),
            TaskSpec::pattern_preset(2),
        ] {
            let d = spec.generate(Split::Val).unwrap();
            let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
            assert_eq!(d, back);
        }
    }

    #[test]
    fn corrupt_cache_rejected() {
        let d = TaskSpec::blobs_preset(2).generate(Split::Val).unwrap();
        let mut bytes = d.to_bytes();
        bytes[0] = b'X';
        assert!(Dataset::from_bytes(&bytes).is_err());
        let bytes = d.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn cache_hit_matches_generation() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TaskSpec::pattern_preset(5);
        let first = load_or_generate(&spec, Split::Test, dir.path()).unwrap();
        let second = load_or_generate(&spec, Split::Test, dir.path()).unwrap();
        assert_eq!(first, second);
        let mut other = spec.clone();
        other.seed = 6;
        assert_ne!(cache_key(&spec).unwrap(), cache_key(&other).unwrap());
    }

    #[test]
    fn batch_gathers_units() {
        let d = TaskSpec::shapes_preset(1).generate(Split::Val).unwrap();
        let b = d.batch(&[3, 0]).unwrap();
        assert_eq!(b.targets.len(), 2 * 256);
        assert_eq!(b.targets[..256], d.targets[3 * 256..4 * 256]);
        assert_eq!(b.input.rows(), 512);
    }
}
