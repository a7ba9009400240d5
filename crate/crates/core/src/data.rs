//! Embedding datasets, one-shot device streams and synthetic generators.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! header  : "FTED" | u32 E | u32 C | u32 n            (16 bytes)
//! record  : u8 split | u8 label | u16 pad (0) | E x f32   (4 + 4E bytes)
//! ```
//!
//! `split` is 0 for train and 1 for validation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{EmbeddingSample, HeadShape};

pub const DATASET_MAGIC: &[u8; 4] = b"FTED";
const HEADER_LEN: usize = 16;

/// Class-centroid separation used by [`synth_sparse`].
pub const DEFAULT_MARGIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Validation = 1,
}

impl TryFrom<u8> for Split {
    type Error = u8;

    fn try_from(tag: u8) -> std::result::Result<Self, u8> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Validation),
            other => Err(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub split: Split,
    pub sample: EmbeddingSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub name: String,
    shape: HeadShape,
    records: Vec<DatasetRecord>,
}

impl EmbeddingDataset {
    pub fn new(name: impl Into<String>, embedding_dim: usize, num_classes: usize) -> Result<Self> {
        if embedding_dim == 0 || num_classes == 0 {
            return Err(Error::usage("dataset dimensions must be positive"));
        }
        Ok(Self {
            name: name.into(),
            shape: HeadShape::new(embedding_dim, num_classes),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, split: Split, sample: EmbeddingSample) -> Result<()> {
        if sample.features.len() != self.shape.embedding_dim {
            return Err(Error::Shape {
                what: "sample features",
                expected: self.shape.embedding_dim,
                got: sample.features.len(),
            });
        }
        if sample.label >= self.shape.num_classes {
            return Err(Error::LabelOutOfRange {
                label: sample.label,
                num_classes: self.shape.num_classes,
            });
        }
        self.records.push(DatasetRecord { split, sample });
        Ok(())
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.shape.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn records(&self) -> &[DatasetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn split(&self, split: Split) -> Vec<EmbeddingSample> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.sample.clone())
            .collect()
    }

    /// Training samples in file order. Device streams index into this list.
    pub fn train(&self) -> Vec<EmbeddingSample> {
        self.split(Split::Train)
    }

    pub fn validation(&self) -> Vec<EmbeddingSample> {
        self.split(Split::Validation)
    }

    /// Retags the last `n_val` records as validation.
    pub fn with_validation_tail(mut self, n_val: usize) -> Result<Self> {
        if n_val > self.records.len() {
            return Err(Error::usage(format!(
                "cannot hold out {n_val} of {} samples",
                self.records.len()
            )));
        }
        let start = self.records.len() - n_val;
        for r in &mut self.records[start..] {
            r.split = Split::Validation;
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let e = u32::try_from(self.shape.embedding_dim).map_err(|_| Error::usage("embedding dim exceeds u32"))?;
        let c = u32::try_from(self.shape.num_classes).map_err(|_| Error::usage("class count exceeds u32"))?;
        if self.shape.num_classes > 256 {
            return Err(Error::usage("dataset format stores labels as u8 (C <= 256)"));
        }
        let n = u32::try_from(self.records.len()).map_err(|_| Error::usage("sample count exceeds u32"))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * record_len(self.shape.embedding_dim));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&e.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        for r in &self.records {
            out.push(r.split as u8);
            out.push(r.sample.label as u8);
            out.extend_from_slice(&[0, 0]);
            for &v in &r.sample.features {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(name: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::parse(
                "header",
                format!("need {HEADER_LEN} header bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::parse("offset 0", format!("bad magic {:?}", &bytes[..4])));
        }
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (e, c, n) = (read_u32(4), read_u32(8), read_u32(12));
        if e == 0 || c == 0 {
            return Err(Error::parse("header", format!("invalid shape E={e}, C={c}")));
        }
        let rec_len = record_len(e);
        let body = &bytes[HEADER_LEN..];
        let expected = n
            .checked_mul(rec_len)
            .ok_or_else(|| Error::parse("header", "record table size overflows"))?;
        if body.len() < expected {
            let row = body.len() / rec_len;
            let have = (body.len() % rec_len).saturating_sub(4) / 4;
            return Err(Error::parse(
                format!("record {row} (offset {})", HEADER_LEN + row * rec_len),
                format!("header declares E={e} features but record is cut short at {have}"),
            ));
        }
        if body.len() > expected {
            return Err(Error::parse(
                format!("offset {}", HEADER_LEN + expected),
                format!("{} trailing bytes after {n} records", body.len() - expected),
            ));
        }

        let mut ds = EmbeddingDataset::new(name, e, c)?;
        ds.records.reserve(n);
        for (row, rec) in body.chunks_exact(rec_len).enumerate() {
            let at = || format!("record {row} (offset {})", HEADER_LEN + row * rec_len);
            let split =
                Split::try_from(rec[0]).map_err(|tag| Error::parse(at(), format!("unknown split tag {tag}")))?;
            let label = rec[1] as usize;
            if label >= c {
                return Err(Error::parse(at(), format!("label {label} out of range for C={c}")));
            }
            let features: Vec<f64> = rec[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            if let Some(i) = features.iter().position(|v| !v.is_finite()) {
                return Err(Error::parse(at(), format!("feature {i} is not finite")));
            }
            ds.records.push(DatasetRecord {
                split,
                sample: EmbeddingSample { features, label },
            });
        }
        Ok(ds)
    }
}

fn record_len(embedding_dim: usize) -> usize {
    4 + 4 * embedding_dim
}

/// Reads a dataset file. The dataset name is the file stem.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    EmbeddingDataset::from_bytes(name, &bytes)
}

pub fn save_dataset(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

/// A device's private, read-once view of the training pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceStream {
    pub device_id: usize,
    indices: Vec<usize>,
    cursor: usize,
}

impl DeviceStream {
    pub fn new(device_id: usize, indices: Vec<usize>) -> Self {
        Self {
            device_id,
            indices,
            cursor: 0,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.indices.len() - self.cursor
    }

    /// Hands out the next `n` unseen indices. Never wraps around.
    pub fn next_batch(&mut self, n: usize) -> Result<&[usize]> {
        if self.remaining() < n {
            return Err(Error::DataExhausted {
                device: self.device_id,
                needed: n,
                remaining: self.remaining(),
            });
        }
        let start = self.cursor;
        self.cursor += n;
        Ok(&self.indices[start..self.cursor])
    }
}

/// Seeded shuffle of `0..n`, cut into `num_devices` contiguous shards whose
/// sizes differ by at most one (the first `n % num_devices` get the extra).
pub fn partition_indices(n: usize, num_devices: usize, seed: u64) -> Result<Vec<DeviceStream>> {
    if num_devices == 0 {
        return Err(Error::usage("need at least one device"));
    }
    if num_devices > n {
        return Err(Error::usage(format!(
            "cannot split {n} samples across {num_devices} devices"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (shard, extra) = (n / num_devices, n % num_devices);
    let start = |d: usize| d * shard + d.min(extra);
    Ok((0..num_devices)
        .map(|d| DeviceStream::new(d, order[start(d)..start(d + 1)].to_vec()))
        .collect())
}

/// Partitions the training split of `dataset`.
pub fn partition(dataset: &EmbeddingDataset, num_devices: usize, seed: u64) -> Result<Vec<DeviceStream>> {
    let n = dataset.records.iter().filter(|r| r.split == Split::Train).count();
    if n == 0 {
        return Err(Error::usage("dataset has no training samples"));
    }
    partition_indices(n, num_devices, seed)
}

/// Gaussian class clusters around seeded centroids.
///
/// Centroids are scaled so the closest pair sits exactly `margin` apart, and
/// within-class noise is isotropic with `sigma = margin / 6`. Labels cycle
/// `0, 1, .., C-1` so classes are balanced. Features are rounded to f32 so
/// the dataset survives a save/load round trip unchanged.
pub fn synth_separable(
    embedding_dim: usize,
    num_classes: usize,
    n: usize,
    margin: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    check_margin(margin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = draw_centroids(embedding_dim, num_classes, margin, &mut rng);
    sample_clusters(format!("separable-{seed}"), &centroids, n, margin / 6.0, &mut rng)
}

/// The class centroids [`synth_separable`] uses for these arguments.
pub fn separable_centroids(embedding_dim: usize, num_classes: usize, margin: f64, seed: u64) -> Vec<Vec<f64>> {
    draw_centroids(embedding_dim, num_classes, margin, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A source task related to the [`synth_separable`] task drawn from
/// `target_seed`: class 0 (the "none of the above" class) keeps the target's
/// centroid, every other class gets a fresh centroid `margin` away from it.
pub fn synth_related_task(
    embedding_dim: usize,
    num_classes: usize,
    n: usize,
    margin: f64,
    target_seed: u64,
    source_seed: u64,
) -> Result<EmbeddingDataset> {
    check_margin(margin)?;
    if embedding_dim == 0 || num_classes == 0 {
        return Err(Error::usage("dataset dimensions must be positive"));
    }
    let shared = separable_centroids(embedding_dim, num_classes, margin, target_seed).swap_remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(source_seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut centroids = vec![shared.clone()];
    for _ in 1..num_classes {
        let dir: Vec<f64> = (0..embedding_dim).map(|_| unit.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        centroids.push(shared.iter().zip(&dir).map(|(c, d)| c + margin * d / norm).collect());
    }
    sample_clusters(
        format!("related-{target_seed}-{source_seed}"),
        &centroids,
        n,
        margin / 6.0,
        &mut rng,
    )
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::usage(format!("margin must be positive, got {margin}")))
    }
}

fn sample_clusters(
    name: String,
    centroids: &[Vec<f64>],
    n: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingDataset> {
    let dim = centroids.first().map_or(0, Vec::len);
    let mut ds = EmbeddingDataset::new(name, dim, centroids.len())?;
    let noise = Normal::new(0.0, sigma).expect("sigma is positive");
    for i in 0..n {
        let label = i % centroids.len();
        let features = centroids[label]
            .iter()
            .map(|&m| (m + noise.sample(rng)) as f32 as f64)
            .collect();
        ds.records.push(DatasetRecord {
            split: Split::Train,
            sample: EmbeddingSample { features, label },
        });
    }
    Ok(ds)
}

fn draw_centroids(dim: usize, classes: usize, margin: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut centroids: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| unit.sample(rng)).collect())
        .collect();
    let mut closest = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            closest = closest.min(distance(&centroids[a], &centroids[b]));
        }
    }
    let scale = if closest.is_finite() && closest > 0.0 {
        margin / closest
    } else {
        margin
    };
    for c in &mut centroids {
        c.iter_mut().for_each(|v| *v *= scale);
    }
    centroids
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Separable data whose signal lives in a fixed seeded subset of `k` of the
/// `E` dimensions; the other `E - k` dimensions are exactly zero everywhere.
pub fn synth_sparse(
    embedding_dim: usize,
    active_dims: usize,
    num_classes: usize,
    n: usize,
    seed: u64,
) -> Result<EmbeddingDataset> {
    if active_dims == 0 || active_dims > embedding_dim {
        return Err(Error::usage(format!(
            "active dims must be in 1..={embedding_dim}, got {active_dims}"
        )));
    }
    let dense = synth_separable(active_dims, num_classes, n, DEFAULT_MARGIN, seed)?;
    let active = sparse_support(embedding_dim, active_dims, seed);
    let mut ds = EmbeddingDataset::new(
        format!("sparse-{active_dims}of{embedding_dim}-{seed}"),
        embedding_dim,
        num_classes,
    )?;
    for r in dense.records {
        let mut features = vec![0.0; embedding_dim];
        for (&dim, v) in active.iter().zip(r.sample.features) {
            features[dim] = v;
        }
        ds.records.push(DatasetRecord {
            split: r.split,
            sample: EmbeddingSample {
                features,
                label: r.sample.label,
            },
        });
    }
    Ok(ds)
}

/// The dimensions [`synth_sparse`] puts signal on, ascending.
pub fn sparse_support(embedding_dim: usize, active_dims: usize, seed: u64) -> Vec<usize> {
    let mut dims: Vec<usize> = (0..embedding_dim).collect();
    // Offset the seed so the support is not correlated with the cluster draw.
    dims.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let mut active = dims[..active_dims.min(embedding_dim)].to_vec();
    active.sort_unstable();
    active
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"FTED");
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&3u32.to_le_bytes());
        let rows: [(u8, u8, [f32; 4]); 3] = [
            (0, 0, [1.0, 2.0, 3.0, 4.0]),
            (0, 1, [-0.5, 0.25, 0.0, 8.0]),
            (1, 1, [0.125, -1.0, 16.0, -2.5]),
        ];
        for (split, label, feats) in rows {
            b.extend_from_slice(&[split, label, 0, 0]);
            for f in feats {
                b.extend_from_slice(&f.to_le_bytes());
            }
        }
        b
    }

    #[test]
    fn golden_file_parses() {
        let ds = EmbeddingDataset::from_bytes("golden", &golden()).unwrap();
        assert_eq!((ds.embedding_dim(), ds.num_classes(), ds.len()), (4, 2, 3));
        assert_eq!(ds.train().len(), 2);
        assert_eq!(ds.validation()[0].features, vec![0.125, -1.0, 16.0, -2.5]);
        assert_eq!(ds.records()[1].sample.label, 1);
        assert_eq!(ds.to_bytes().unwrap(), golden());
    }

    #[test]
    fn short_row_names_the_record() {
        let mut bytes = golden();
        bytes.truncate(bytes.len() - 4);
        match EmbeddingDataset::from_bytes("bad", &bytes) {
            Err(Error::Parse { location, .. }) => assert!(location.starts_with("record 2"), "{location}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_label_magic_and_split() {
        let mut bytes = golden();
        bytes[16 + 1] = 2;
        assert!(matches!(
            EmbeddingDataset::from_bytes("x", &bytes),
            Err(Error::Parse { .. })
        ));
        let mut bytes = golden();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingDataset::from_bytes("x", &bytes),
            Err(Error::Parse { .. })
        ));
        let mut bytes = golden();
        bytes[16] = 7;
        assert!(matches!(
            EmbeddingDataset::from_bytes("x", &bytes),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            EmbeddingDataset::from_bytes("x", &[]),
            Err(Error::Parse { .. })
        ));
        let mut bytes = golden();
        bytes.push(0);
        assert!(matches!(
            EmbeddingDataset::from_bytes("x", &bytes),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.fted");
        let ds = synth_separable(6, 3, 30, 2.0, 4)
            .unwrap()
            .with_validation_tail(9)
            .unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.name, "toy");
        assert_eq!(back.records(), ds.records());
    }

    #[test]
    fn partition_shapes() {
        let one = partition_indices(10, 1, 3).unwrap();
        let mut all = one[0].indices().to_vec();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let two = partition_indices(10, 2, 3).unwrap();
        assert_eq!((two[0].indices().len(), two[1].indices().len()), (5, 5));
        assert_eq!(two, partition_indices(10, 2, 3).unwrap());

        let three = partition_indices(10, 3, 3).unwrap();
        let sizes: Vec<usize> = three.iter().map(|s| s.indices().len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert!(matches!(partition_indices(3, 4, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn stream_is_read_once() {
        let mut s = DeviceStream::new(3, vec![7, 8, 9]);
        assert_eq!(s.next_batch(2).unwrap(), &[7, 8]);
        assert!(matches!(
            s.next_batch(2),
            Err(Error::DataExhausted {
                device: 3,
                needed: 2,
                remaining: 1
            })
        ));
        assert_eq!(s.next_batch(1).unwrap(), &[9]);
        assert_eq!(s.remaining(), 0);
    }

    #[test]
    fn separable_generator_properties() {
        assert!(synth_separable(4, 2, 0, 1.0, 0).unwrap().is_empty());
        assert!(synth_separable(4, 2, 10, 0.0, 0).is_err());

        let margin = 3.0;
        let ds = synth_separable(16, 2, 2000, margin, 21).unwrap();
        let mut sums = vec![vec![0.0; 16]; 2];
        let mut counts = [0usize; 2];
        for r in ds.records() {
            counts[r.sample.label] += 1;
            for (s, v) in sums[r.sample.label].iter_mut().zip(&r.sample.features) {
                *s += v;
            }
        }
        assert_eq!(counts, [1000, 1000]);
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(counts)
            .map(|(s, n)| s.iter().map(|v| v / n as f64).collect())
            .collect();
        // Sampling error of each mean is about sigma * sqrt(E / 1000) = 0.06 * margin.
        assert!(distance(&means[0], &means[1]) >= 0.9 * margin);
    }

    #[test]
    fn related_task_shares_class_zero() {
        let target = separable_centroids(12, 2, 2.0, 5);
        let ds = synth_related_task(12, 2, 10, 2.0, 5, 99).unwrap();
        assert_eq!(ds.len(), 10);
        let mut mean0 = vec![0.0; 12];
        let big = synth_related_task(12, 2, 4000, 2.0, 5, 99).unwrap();
        for r in big.records().iter().filter(|r| r.sample.label == 0) {
            mean0
                .iter_mut()
                .zip(&r.sample.features)
                .for_each(|(m, v)| *m += v / 2000.0);
        }
        assert!(distance(&mean0, &target[0]) < 0.1);
    }

    #[test]
    fn sparse_generator_support() {
        let ds = synth_sparse(256, 16, 2, 200, 8).unwrap();
        for r in ds.records() {
            assert!(r.sample.features.iter().filter(|&&v| v == 0.0).count() >= 240);
        }
        let ever_nonzero: Vec<usize> = (0..256)
            .filter(|&d| ds.records().iter().any(|r| r.sample.features[d] != 0.0))
            .collect();
        assert_eq!(ever_nonzero, sparse_support(256, 16, 8));
        assert!(matches!(synth_sparse(8, 9, 2, 10, 0), Err(Error::Usage(_))));

        let full = synth_sparse(5, 5, 2, 10, 1).unwrap();
        assert!(full
            .records()
            .iter()
            .all(|r| r.sample.features.iter().all(|&v| v != 0.0)));
    }
}
