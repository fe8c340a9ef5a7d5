//! IDX ingestion, synthetic Gaussian blobs and seeded batching.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RfaError};
use crate::numcore::{Rng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Distance of every blob center from the cube midpoint.
pub const BLOB_CENTER_RADIUS: f64 = 0.3;
const BLOB_CENTER_SEED: u64 = 0x5eed_b10b;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.rows() != labels.len() {
            return Err(RfaError::InvalidArgument(format!(
                "images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(RfaError::InvalidArgument("pixel outside [0, 1]".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(RfaError::InvalidArgument(format!(
                "label {y} >= num_classes {num_classes}"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[c, h, w]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn input_dim(&self) -> usize {
        self.images.row_len()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// First `n` samples (or all, when shorter).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| RfaError::Idx("truncated header".into()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| RfaError::io(path, e))
}

/// Parses an IDX image file (`0x00000803`, dims `[n, h, w]`) into `[n, 1, h, w] / 255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(RfaError::Idx(format!(
            "unsupported IDX type 0x{magic:08x} for images"
        )));
    }
    let (n, h, w) = (
        read_u32(bytes, 4)? as usize,
        read_u32(bytes, 8)? as usize,
        read_u32(bytes, 12)? as usize,
    );
    let payload = &bytes[16..];
    if payload.len() < n * h * w {
        return Err(RfaError::Idx(format!(
            "truncated file: expected {} pixel bytes, found {}",
            n * h * w,
            payload.len()
        )));
    }
    let data = payload[..n * h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Parses an IDX label file (`0x00000801`, dims `[n]`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(RfaError::Idx(format!(
            "unsupported IDX type 0x{magic:08x} for labels"
        )));
    }
    let n = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(RfaError::Idx(format!(
            "truncated file: expected {n} labels, found {}",
            payload.len()
        )));
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    if images.rows() != labels.len() {
        return Err(RfaError::Idx(format!(
            "count mismatch: {} images, {} labels",
            images.rows(),
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, num_classes, "idx")
}

/// Serializes images `[n, 1, h, w]` in `[0, 1]` to IDX bytes (rounding to the nearest byte).
pub fn encode_idx_images(images: &Tensor) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&y| y as u8));
    out
}

/// Class centers: orthonormalized Gaussian directions scaled to
/// [`BLOB_CENTER_RADIUS`] around the cube midpoint. Fixed for a given
/// `(num_classes, dim)`, so train and test draws share them.
pub fn blob_centers(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(BLOB_CENTER_SEED).split_indexed("centers", (num_classes * 7919 + dim) as u64);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if dirs.len() < dim {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dirs.push(v.into_iter().map(|a| a / norm).collect());
    }
    dirs.into_iter()
        .map(|u| u.into_iter().map(|a| 0.5 + BLOB_CENTER_RADIUS * a).collect())
        .collect()
}

/// Gaussian clusters around [`blob_centers`], clipped to `[0, 1]`, shaped `[n, 1, 1, dim]`.
/// Samples are laid out class by class.
pub fn synth_blobs(seed: u64, n_per_class: usize, num_classes: usize, dim: usize, spread: f64) -> Result<Dataset> {
    if dim < 2 {
        return Err(RfaError::InvalidArgument(format!("blob dim {dim} < 2")));
    }
    if spread < 0.0 || !spread.is_finite() {
        return Err(RfaError::InvalidArgument(format!("blob spread {spread}")));
    }
    if num_classes == 0 || n_per_class == 0 {
        return Err(RfaError::InvalidArgument("empty blob dataset".into()));
    }
    let centers = blob_centers(num_classes, dim);
    let mut rng = Rng::new(seed).split("blobs");
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &c in center {
                data.push((c + spread * rng.normal()).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 1, 1, dim], data)?,
        labels,
        num_classes,
        format!("blobs-{num_classes}x{dim}"),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

/// Index batches of a seeded permutation of `0..n`.
pub fn batch_indices(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 || plan.batch_size > n {
        return Err(RfaError::InvalidArgument(format!(
            "batch size {} for {n} samples",
            plan.batch_size
        )));
    }
    let perm = Rng::new(plan.shuffle_seed).split("batches").permutation(n);
    Ok(perm
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_last || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Materialized `(images, labels)` batches.
pub fn batches<'a>(
    dataset: &'a Dataset,
    plan: &BatchPlan,
) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + 'a> {
    let idx = batch_indices(dataset.len(), plan)?;
    Ok(idx.into_iter().map(move |b| {
        let labels = b.iter().map(|&i| dataset.labels[i]).collect();
        (dataset.images.select_rows(&b), labels)
    }))
}

/// Consecutive unshuffled batches, for evaluation.
pub fn sequential_batches(dataset: &Dataset, batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
    (0..dataset.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|b| {
            (
                dataset.images.select_rows(b),
                b.iter().map(|&i| dataset.labels[i]).collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * h * w).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_round_trip_shapes() {
        let imgs = parse_idx_images(&idx_images(3, 4, 5)).unwrap();
        assert_eq!(imgs.shape(), &[3, 1, 4, 5]);
        assert_eq!(imgs.data()[1], 1.0 / 255.0);
        assert_eq!(encode_idx_images(&imgs), idx_images(3, 4, 5));
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let mut b = idx_images(1, 2, 2);
        b[3] = 0x02;
        let err = parse_idx_images(&b).unwrap_err().to_string();
        assert!(err.contains("unsupported IDX type"), "{err}");
    }

    #[test]
    fn idx_rejects_truncation() {
        let b = idx_images(2, 3, 3);
        let err = parse_idx_images(&b[..b.len() - 1]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(parse_idx_labels(&[0, 0, 8]).is_err());
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, idx_images(10, 2, 2)).unwrap();
        std::fs::write(&lp, encode_idx_labels(&[1; 9])).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("count mismatch"), "{err}");
    }

    #[test]
    fn zero_spread_blobs_sit_on_centers() {
        let ds = synth_blobs(1, 4, 3, 8, 0.0).unwrap();
        let centers = blob_centers(3, 8);
        for i in 0..ds.len() {
            assert_eq!(ds.images.row(i), centers[ds.labels[i]].as_slice());
        }
    }

    #[test]
    fn blobs_are_seeded() {
        let a = synth_blobs(7, 10, 3, 16, 0.05).unwrap();
        let b = synth_blobs(7, 10, 3, 16, 0.05).unwrap();
        let c = synth_blobs(8, 10, 3, 16, 0.05).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, c.images);
        assert!(synth_blobs(7, 10, 3, 1, 0.05).is_err());
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let plan = BatchPlan {
            batch_size: 3,
            shuffle_seed: 4,
            drop_last: false,
        };
        let b = batch_indices(10, &plan).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let dropped = batch_indices(10, &BatchPlan { drop_last: true, ..plan.clone() }).unwrap();
        assert_eq!(dropped.len(), 3);
        assert_eq!(batch_indices(10, &plan).unwrap(), b);
    }
}
