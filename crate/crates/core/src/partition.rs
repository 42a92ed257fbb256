//! Synthetic non-IID shards.
//!
//! Every collaborator gets a sample count, a label mixture and a feature
//! offset. Sample counts follow a Dirichlet draw (each shard keeps at least
//! one sample), label mixtures are Dirichlet(α) over the classes, and offsets
//! are Gaussian. Small α gives strongly skewed shards; large α approaches IID.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskSpec;
use crate::rng::{chacha, derive_seed, stream};
use crate::selection::roster_ids;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_collaborators: usize,
    pub total_samples: usize,
    /// Dirichlet concentration for label mixtures.
    pub skew: f64,
    /// Dirichlet concentration for sample counts; `None` reuses `skew`.
    pub quantity_skew: Option<f64>,
    pub num_classes: usize,
    pub num_features: usize,
    /// Standard deviation of each collaborator's per-feature offset.
    pub feature_shift_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_collaborators: 33,
            total_samples: 3300,
            skew: 0.3,
            quantity_skew: None,
            num_classes: 4,
            num_features: 8,
            feature_shift_scale: 0.5,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadConfig(msg));
        if self.num_collaborators == 0 {
            return bad("num_collaborators must be at least 1".into());
        }
        if self.total_samples < self.num_collaborators {
            return bad(format!(
                "total_samples ({}) must be at least num_collaborators ({})",
                self.total_samples, self.num_collaborators
            ));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.skew) {
            return bad(format!("skew must be positive, got {}", self.skew));
        }
        if let Some(q) = self.quantity_skew {
            if !positive(q) {
                return bad(format!("quantity_skew must be positive, got {q}"));
            }
        }
        if self.num_classes == 0 || self.num_features == 0 {
            return bad("num_classes and num_features must be positive".into());
        }
        if !(self.feature_shift_scale >= 0.0 && self.feature_shift_scale.is_finite())
            || !(self.noise_scale >= 0.0 && self.noise_scale.is_finite())
        {
            return bad("feature_shift_scale and noise_scale must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub collab_id: String,
    pub sample_count: usize,
    pub label_mixture: Vec<f64>,
    pub feature_shift: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl ShardSpec {
    fn validate(&self, task: &TaskSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::BadSpec(format!("{}: {msg}", self.collab_id)));
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1".into());
        }
        if self.label_mixture.len() != task.num_classes {
            return bad(format!(
                "label mixture has {} classes, task has {}",
                self.label_mixture.len(),
                task.num_classes
            ));
        }
        if self
            .label_mixture
            .iter()
            .any(|p| !(*p >= 0.0 && p.is_finite()))
        {
            return bad("label mixture entries must be nonnegative".into());
        }
        let total: f64 = self.label_mixture.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("label mixture sums to {total}"));
        }
        if self.feature_shift.len() != task.num_features
            || self.feature_shift.iter().any(|x| !x.is_finite())
        {
            return bad("feature shift must be finite with one entry per feature".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be nonnegative".into());
        }
        Ok(())
    }
}

/// Draws from a symmetric Dirichlet(α) over `k` categories.
///
/// Each Gamma(α) variate is formed as `Gamma(α+1) · U^(1/α)` and kept in log
/// space, so tiny α does not underflow every component to zero.
pub fn sample_dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha validated positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Splits `total` into `proportions.len()` counts of at least one each, the
/// remainder allocated by largest fractional share (ties to the lower index).
fn allocate_counts(total: usize, proportions: &[f64]) -> Vec<usize> {
    let k = proportions.len();
    let spare = total - k;
    let exact: Vec<f64> = proportions.iter().map(|p| p * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(spare.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

pub fn make_partition(cfg: &PartitionConfig) -> Result<Vec<ShardSpec>> {
    cfg.validate()?;
    let mut rng = chacha(cfg.seed);
    let k = cfg.num_collaborators;
    let shares = sample_dirichlet(&mut rng, k, cfg.quantity_skew.unwrap_or(cfg.skew));
    let counts = allocate_counts(cfg.total_samples, &shares);
    let ids = roster_ids(k);
    let shards = ids
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (collab_id, sample_count))| {
            let label_mixture = sample_dirichlet(&mut rng, cfg.num_classes, cfg.skew);
            let feature_shift = (0..cfg.num_features)
                .map(|_| cfg.feature_shift_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ShardSpec {
                collab_id,
                sample_count,
                label_mixture,
                feature_shift,
                noise_scale: cfg.noise_scale,
                seed: derive_seed(cfg.seed, stream::SHARD, i as u64),
            }
        })
        .collect();
    Ok(shards)
}

/// Class-conditional Gaussian clusters: one mean vector per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGenerator {
    pub num_features: usize,
    pub class_means: Vec<Vec<f64>>,
}

impl TaskGenerator {
    pub fn new(task: &TaskSpec, seed: u64) -> Result<Self> {
        task.validate()?;
        let mut rng = chacha(seed);
        let class_means = (0..task.num_classes)
            .map(|_| {
                (0..task.num_features)
                    .map(|_| task.class_separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(Self {
            num_features: task.num_features,
            class_means,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    /// An IID set: uniform labels, no offset.
    pub fn iid_dataset(&self, n: usize, noise_scale: f64, seed: u64) -> Result<Dataset> {
        let k = self.num_classes();
        let spec = ShardSpec {
            collab_id: "iid".into(),
            sample_count: n,
            label_mixture: vec![1.0 / k as f64; k],
            feature_shift: vec![0.0; self.num_features],
            noise_scale,
            seed,
        };
        self.sample(&spec)
    }

    fn sample(&self, spec: &ShardSpec) -> Result<Dataset> {
        let mut rng = chacha(spec.seed);
        let mut cumulative = Vec::with_capacity(spec.label_mixture.len());
        let mut acc = 0.0;
        for p in &spec.label_mixture {
            acc += p;
            cumulative.push(acc);
        }
        let last_positive = spec
            .label_mixture
            .iter()
            .rposition(|p| *p > 0.0)
            .ok_or_else(|| Error::BadSpec("label mixture has no mass".into()))?;
        let mut features = Vec::with_capacity(spec.sample_count * self.num_features);
        let mut labels = Vec::with_capacity(spec.sample_count);
        for _ in 0..spec.sample_count {
            let u: f64 = rng.random();
            let y = cumulative
                .iter()
                .position(|c| u < *c)
                .unwrap_or(last_positive)
                .min(last_positive);
            labels.push(y as u32);
            for (m, s) in self.class_means[y].iter().zip(&spec.feature_shift) {
                let noise = if spec.noise_scale > 0.0 {
                    spec.noise_scale * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                features.push(m + s + noise);
            }
        }
        Dataset::new(self.num_features, features, labels)
    }
}

pub fn materialize_shard(
    spec: &ShardSpec,
    task: &TaskSpec,
    generator: &TaskGenerator,
) -> Result<Dataset> {
    spec.validate(task)?;
    if generator.num_features != task.num_features || generator.num_classes() != task.num_classes {
        return Err(Error::BadSpec(
            "generator does not match task dimensions".into(),
        ));
    }
    generator.sample(spec)
}

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_features: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(num_features: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if num_features == 0 || features.len() != labels.len() * num_features {
            return Err(Error::BadSpec(format!(
                "{} feature values do not form {} rows of width {num_features}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            num_features,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Writes the binary dataset format (see `docs/FORMATS.md`).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: 1,
            rows: self.len(),
            cols: self.num_features,
            feature_dtype: "f64-le".into(),
            label_dtype: "u32-le".into(),
        })?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.features.len() * 8 + self.labels.len() * 4);
        for v in &self.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let corrupt = |m: &str| Error::BadSpec(format!("dataset file: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated"))?;
        if &magic != DATASET_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| corrupt("truncated"))?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 20 {
            return Err(corrupt("header too large"));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)
            .map_err(|_| corrupt("truncated header"))?;
        let header: DatasetHeader =
            serde_json::from_slice(&header).map_err(|e| Error::BadSpec(e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != 1 {
            return Err(corrupt("unsupported format"));
        }
        let mut raw = vec![0u8; header.rows * header.cols * 8];
        r.read_exact(&mut raw)
            .map_err(|_| corrupt("truncated features"))?;
        let features = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut raw = vec![0u8; header.rows * 4];
        r.read_exact(&mut raw)
            .map_err(|_| corrupt("truncated labels"))?;
        let labels = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(header.cols, features, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::read(path)?.as_slice())
    }

    /// Row indices in a seeded random order.
    pub fn shuffled_indices(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }
}

const DATASET_MAGIC: &[u8; 8] = b"FSDATA\0\0";
const DATASET_FORMAT: &str = "fedsim-dataset";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    rows: usize,
    cols: usize,
    feature_dtype: String,
    label_dtype: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(classes: usize, features: usize) -> TaskSpec {
        TaskSpec {
            num_classes: classes,
            num_features: features,
            ..Default::default()
        }
    }

    fn tv_from_uniform(p: &[f64]) -> f64 {
        let u = 1.0 / p.len() as f64;
        0.5 * p.iter().map(|x| (x - u).abs()).sum::<f64>()
    }

    #[test]
    fn config_validation() {
        let mut cfg = PartitionConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.total_samples = 10;
        assert!(matches!(make_partition(&cfg), Err(Error::BadConfig(_))));
        let cfg = PartitionConfig {
            skew: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PartitionConfig {
            num_collaborators: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn counts_are_conserved() {
        for seed in 0..30 {
            for (k, total, skew) in [
                (33, 3300, 0.3),
                (23, 23, 0.1),
                (5, 1000, 100.0),
                (1, 7, 1.0),
            ] {
                let cfg = PartitionConfig {
                    num_collaborators: k,
                    total_samples: total,
                    skew,
                    seed,
                    ..Default::default()
                };
                let shards = make_partition(&cfg).unwrap();
                assert_eq!(shards.len(), k);
                assert_eq!(shards.iter().map(|s| s.sample_count).sum::<usize>(), total);
                assert!(shards.iter().all(|s| s.sample_count >= 1));
                for s in &shards {
                    assert!((s.label_mixture.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn iid_limit_is_uniform() {
        let cfg = PartitionConfig {
            skew: 1e6,
            ..Default::default()
        };
        for s in make_partition(&cfg).unwrap() {
            for p in &s.label_mixture {
                assert!((p - 0.25).abs() < 1e-2, "{:?}", s.label_mixture);
            }
        }
    }

    #[test]
    fn small_alpha_is_skewed() {
        let mut majority_seeds = 0;
        for seed in 0..20 {
            let cfg = PartitionConfig {
                skew: 0.1,
                seed,
                ..Default::default()
            };
            let shards = make_partition(&cfg).unwrap();
            let skewed = shards
                .iter()
                .filter(|s| s.label_mixture.iter().copied().fold(0.0, f64::max) > 0.5)
                .count();
            if skewed * 2 > shards.len() {
                majority_seeds += 1;
            }
        }
        assert_eq!(majority_seeds, 20);
    }

    #[test]
    fn larger_alpha_is_closer_to_uniform() {
        let mean_tv = |alpha: f64| {
            let mut total = 0.0;
            let mut n = 0;
            for seed in 0..40 {
                let cfg = PartitionConfig {
                    skew: alpha,
                    seed,
                    ..Default::default()
                };
                for s in make_partition(&cfg).unwrap() {
                    total += tv_from_uniform(&s.label_mixture);
                    n += 1;
                }
            }
            total / n as f64
        };
        let tvs: Vec<f64> = [0.05, 0.3, 1.0, 10.0, 1000.0]
            .iter()
            .map(|a| mean_tv(*a))
            .collect();
        assert!(tvs.windows(2).all(|w| w[0] > w[1]), "{tvs:?}");
    }

    #[test]
    fn dirichlet_tiny_alpha_stays_finite() {
        let mut rng = chacha(3);
        for _ in 0..100 {
            let p = sample_dirichlet(&mut rng, 10, 1e-3);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_mixture_without_noise() {
        let t = task(2, 3);
        let generator = TaskGenerator::new(&t, 1).unwrap();
        let spec = ShardSpec {
            collab_id: "a".into(),
            sample_count: 25,
            label_mixture: vec![1.0, 0.0],
            feature_shift: vec![0.0; 3],
            noise_scale: 0.0,
            seed: 4,
        };
        let data = materialize_shard(&spec, &t, &generator).unwrap();
        assert_eq!(data.len(), 25);
        assert!(data.labels().iter().all(|&y| y == 0));
        for i in 0..data.len() {
            assert_eq!(data.row(i), generator.class_means[0].as_slice());
        }
    }

    #[test]
    fn label_frequencies_track_mixture() {
        let t = task(3, 2);
        let generator = TaskGenerator::new(&t, 1).unwrap();
        let mixture = vec![0.5, 0.3, 0.2];
        let n = 4000;
        for seed in 0..10 {
            let spec = ShardSpec {
                collab_id: "a".into(),
                sample_count: n,
                label_mixture: mixture.clone(),
                feature_shift: vec![0.1, -0.2],
                noise_scale: 1.0,
                seed,
            };
            let data = materialize_shard(&spec, &t, &generator).unwrap();
            for (c, p) in mixture.iter().enumerate() {
                let freq =
                    data.labels().iter().filter(|&&y| y as usize == c).count() as f64 / n as f64;
                assert!(
                    (freq - p).abs() <= 3.0 / (n as f64).sqrt(),
                    "class {c}: {freq} vs {p}"
                );
            }
        }
    }

    #[test]
    fn same_spec_same_data() {
        let t = task(4, 5);
        let generator = TaskGenerator::new(&t, 2).unwrap();
        let cfg = PartitionConfig {
            num_features: 5,
            ..Default::default()
        };
        let shards = make_partition(&cfg).unwrap();
        let a = materialize_shard(&shards[3], &t, &generator).unwrap();
        let b = materialize_shard(&shards[3].clone(), &t, &generator).unwrap();
        let bits = |d: &Dataset| d.features().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
        assert_eq!(make_partition(&cfg).unwrap(), shards);
    }

    #[test]
    fn bad_specs_rejected() {
        let t = task(2, 2);
        let generator = TaskGenerator::new(&t, 0).unwrap();
        let good = ShardSpec {
            collab_id: "a".into(),
            sample_count: 3,
            label_mixture: vec![0.5, 0.5],
            feature_shift: vec![0.0, 0.0],
            noise_scale: 1.0,
            seed: 0,
        };
        assert!(materialize_shard(&good, &t, &generator).is_ok());
        let cases = [
            ShardSpec {
                sample_count: 0,
                ..good.clone()
            },
            ShardSpec {
                label_mixture: vec![0.5, 0.6],
                ..good.clone()
            },
            ShardSpec {
                label_mixture: vec![1.0],
                ..good.clone()
            },
            ShardSpec {
                feature_shift: vec![0.0],
                ..good.clone()
            },
            ShardSpec {
                noise_scale: -1.0,
                ..good.clone()
            },
        ];
        for c in cases {
            assert!(matches!(
                materialize_shard(&c, &t, &generator),
                Err(Error::BadSpec(_))
            ));
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let d = Dataset::new(2, vec![1.0, -2.5, 3.25, 0.1], vec![1, 0]).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(buf.as_slice()).unwrap(), d);
        buf.truncate(buf.len() - 1);
        assert!(Dataset::read_from(buf.as_slice()).is_err());
    }
}
