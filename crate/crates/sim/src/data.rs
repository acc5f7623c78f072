//! Datasets: synthetic Gaussian class clusters, IDX image ingestion, the
//! held-out evaluation split, and the label-skewed partition that hands
//! each device a small palette of classes.

use eocd_core::model::Sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic 0x{got:08x}, expected 0x{want:08x}")]
    BadMagic { path: String, got: u32, want: u32 },
    #[error("{path}: file ends before the declared payload")]
    Truncated { path: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(
        "partition infeasible: class {class} needs {needed} samples but only {available} remain"
    )]
    NotEnoughSamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("device {device} appears in more than one partition group")]
    DuplicateDevice { device: usize },
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Gaussian blobs, one per class: centers are random unit directions scaled
/// by `separation`, samples add unit-variance noise. `separation` of 0 makes
/// every class the same distribution; a few standard deviations makes the
/// problem nearly separable.
pub fn synthesize_dataset<R: Rng>(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    rng: &mut R,
) -> Vec<Sample> {
    assert!(classes >= 2, "need at least two classes");
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v *= separation / norm;
        }
        centers.push(dir);
    }
    let mut out = Vec::with_capacity(classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push((x, label));
        }
    }
    out
}

/// Split off an evaluation set that no device will ever hold. The split is
/// a uniform shuffle, so both halves keep the class mix in expectation.
pub fn split_holdout<R: Rng>(
    mut dataset: Vec<Sample>,
    holdout_frac: f64,
    rng: &mut R,
) -> (Vec<Sample>, Vec<Sample>) {
    assert!((0.0..1.0).contains(&holdout_frac));
    dataset.shuffle(rng);
    let eval_len = ((dataset.len() as f64) * holdout_frac).round() as usize;
    let pool = dataset.split_off(eval_len.min(dataset.len()));
    (pool, dataset)
}

// ---------------------------------------------------------------------------
// Non-iid partition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct PartitionRules {
    pub classes: usize,
    pub labels_per_device: usize,
    pub max_labels_per_cluster: usize,
    pub samples_per_device: usize,
}

/// Label-skewed partition. Each group of devices (one group per cluster,
/// plus one trailing group for devices outside every cluster) works from a
/// palette of at most `max_labels_per_cluster` consecutive labels; within a
/// group, devices take `labels_per_device` palette labels round-robin, so
/// the group's label union never exceeds the palette. Samples are drawn
/// without replacement from the shared pool; asking for more than a class
/// holds is an error. `labels_per_device = classes` degenerates to an iid
/// random split.
pub fn partition_non_iid<R: Rng>(
    pool: &[Sample],
    groups: &[Vec<usize>],
    rules: &PartitionRules,
    rng: &mut R,
) -> Result<BTreeMap<usize, Vec<Sample>>, DataError> {
    let mut seen = std::collections::BTreeSet::new();
    for g in groups {
        for &dev in g {
            if !seen.insert(dev) {
                return Err(DataError::DuplicateDevice { device: dev });
            }
        }
    }

    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); rules.classes];
    for (x, y) in pool {
        if *y >= rules.classes {
            return Err(DataError::LabelOutOfRange {
                label: *y,
                classes: rules.classes,
            });
        }
        by_class[*y].push((x.clone(), *y));
    }
    for class_pool in &mut by_class {
        class_pool.shuffle(rng);
    }

    let mut take = |class: usize, count: usize| -> Result<Vec<Sample>, DataError> {
        let class_pool = &mut by_class[class];
        if class_pool.len() < count {
            return Err(DataError::NotEnoughSamples {
                class,
                needed: count,
                available: class_pool.len(),
            });
        }
        Ok(class_pool.split_off(class_pool.len() - count))
    };

    let palette_len = rules.max_labels_per_cluster.min(rules.classes);
    let iid = rules.labels_per_device >= rules.classes;
    let num_groups = groups.len().max(1);
    let mut out = BTreeMap::new();
    for (j, group) in groups.iter().enumerate() {
        let offset = j * rules.classes / num_groups;
        for (k, &dev) in group.iter().enumerate() {
            let labels: Vec<usize> = if iid {
                (0..rules.classes).collect()
            } else {
                (0..rules.labels_per_device)
                    .map(|i| {
                        (offset + (rules.labels_per_device * k + i) % palette_len) % rules.classes
                    })
                    .collect()
            };
            let mut local = Vec::with_capacity(rules.samples_per_device);
            let base = rules.samples_per_device / labels.len();
            let extra = rules.samples_per_device % labels.len();
            for (i, &label) in labels.iter().enumerate() {
                let quota = base + usize::from(i < extra);
                local.extend(take(label, quota)?);
            }
            local.shuffle(rng);
            out.insert(dev, local);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    let chunk: [u8; 4] = bytes
        .get(at..at + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| DataError::Truncated {
            path: path.display().to_string(),
        })?;
    Ok(u32::from_be_bytes(chunk))
}

/// Read a big-endian IDX image/label file pair. Pixels land in [0, 1],
/// labels keep their byte values.
pub fn ingest_idx_images(images_path: &Path, labels_path: &Path) -> Result<Vec<Sample>, DataError> {
    let images = read_all(images_path)?;
    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            want: IDX_IMAGES_MAGIC,
        });
    }
    let count = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    let pixel_len = rows * cols;
    if images.len() < 16 + count * pixel_len {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
        });
    }

    let labels = read_all(labels_path)?;
    let magic = be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            got: magic,
            want: IDX_LABELS_MAGIC,
        });
    }
    let label_count = be_u32(&labels, 4, labels_path)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    if labels.len() < 8 + label_count {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
        });
    }

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * pixel_len;
        let x: Vec<f64> = images[start..start + pixel_len]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        out.push((x, labels[8 + i] as usize));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use eocd_core::model::LossModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn fit_logistic(data: &[Sample], dim: usize, classes: usize, steps: usize) -> Vec<f64> {
        let model = LossModel::Logistic { dim, classes };
        let mut w = vec![0.0; model.num_params()];
        for _ in 0..steps {
            let g = model.grad(&w, data);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= 0.5 * gi;
            }
        }
        w
    }

    #[test]
    fn wide_separation_is_linearly_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = synthesize_dataset(3, 4, 40, 50.0, &mut rng);
        let model = LossModel::Logistic { dim: 4, classes: 3 };
        let w = fit_logistic(&data, 4, 3, 60);
        assert_eq!(model.accuracy(&w, &data), 1.0);
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = synthesize_dataset(5, 4, 300, 0.0, &mut rng);
        let (pool, eval) = split_holdout(data, 0.25, &mut rng);
        let model = LossModel::Logistic { dim: 4, classes: 5 };
        let w = fit_logistic(&pool, 4, 5, 40);
        let acc = model.accuracy(&w, &eval);
        assert!((acc - 0.2).abs() < 0.08, "accuracy {acc} is far from chance");
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synthesize_dataset(4, 6, 25, 2.0, &mut ChaCha8Rng::seed_from_u64(7));
        let b = synthesize_dataset(4, 6, 25, 2.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a.len(), b.len());
        for ((xa, ya), (xb, yb)) in a.iter().zip(&b) {
            assert_eq!(ya, yb);
            assert!(xa.iter().zip(xb).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn holdout_split_sizes_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = synthesize_dataset(2, 3, 50, 1.0, &mut rng);
        let (pool, eval) = split_holdout(data, 0.2, &mut rng);
        assert_eq!(pool.len(), 80);
        assert_eq!(eval.len(), 20);
    }

    fn rules() -> PartitionRules {
        PartitionRules {
            classes: 10,
            labels_per_device: 2,
            max_labels_per_cluster: 6,
            samples_per_device: 20,
        }
    }

    #[test]
    fn cluster_label_union_stays_within_the_palette() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = synthesize_dataset(10, 3, 200, 1.0, &mut rng);
        let groups = vec![vec![0, 1, 2, 3, 4, 5, 6], vec![7, 8, 9]];
        let parts = partition_non_iid(&pool, &groups, &rules(), &mut rng).unwrap();
        for group in &groups {
            let mut union = std::collections::BTreeSet::new();
            for dev in group {
                let labels: std::collections::BTreeSet<usize> =
                    parts[dev].iter().map(|(_, y)| *y).collect();
                assert_eq!(labels.len(), 2, "device {dev} holds {labels:?}");
                union.extend(labels);
            }
            assert!(union.len() <= 6, "cluster union {union:?}");
        }
        for part in parts.values() {
            assert_eq!(part.len(), 20);
        }
    }

    #[test]
    fn same_seed_same_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = synthesize_dataset(10, 3, 100, 1.0, &mut rng);
        let groups = vec![vec![0, 1, 2], vec![3, 4]];
        let a = partition_non_iid(&pool, &groups, &rules(), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = partition_non_iid(&pool, &groups, &rules(), &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a.len(), b.len());
        for (dev, part) in &a {
            let other = &b[dev];
            assert_eq!(part.len(), other.len());
            for ((xa, ya), (xb, yb)) in part.iter().zip(other) {
                assert_eq!(ya, yb);
                assert_eq!(xa, xb);
            }
        }
    }

    #[test]
    fn full_label_spread_is_an_iid_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = synthesize_dataset(4, 3, 50, 1.0, &mut rng);
        let r = PartitionRules {
            classes: 4,
            labels_per_device: 4,
            max_labels_per_cluster: 4,
            samples_per_device: 16,
        };
        let parts = partition_non_iid(&pool, &[vec![0, 1]], &r, &mut rng).unwrap();
        for part in parts.values() {
            let labels: std::collections::BTreeSet<usize> =
                part.iter().map(|(_, y)| *y).collect();
            assert_eq!(labels.len(), 4);
        }
    }

    #[test]
    fn exhausted_class_pool_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pool = synthesize_dataset(10, 3, 5, 1.0, &mut rng);
        let groups = vec![(0..8).collect::<Vec<_>>()];
        let err = partition_non_iid(&pool, &groups, &rules(), &mut rng).unwrap_err();
        assert!(matches!(err, DataError::NotEnoughSamples { .. }), "{err}");
    }

    fn write_idx_pair(dir: &Path, count: u32, bad_magic: bool) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("images.idx");
        let labels = dir.join("labels.idx");
        let mut f = std::fs::File::create(&images).unwrap();
        let magic: u32 = if bad_magic { 0xdead_beef } else { IDX_IMAGES_MAGIC };
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for i in 0..count * 4 {
            f.write_all(&[(i % 256) as u8]).unwrap();
        }
        let mut f = std::fs::File::create(&labels).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        for i in 0..count {
            f.write_all(&[(i % 10) as u8]).unwrap();
        }
        (images, labels)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 3, false);
        let data = ingest_idx_images(&images, &labels).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data[0].0.len(), 4);
        assert_eq!(data[1].1, 1);
        assert!((data[1].0[0] - 4.0 / 255.0).abs() < 1e-12);
        assert!(data.iter().all(|(x, _)| x.iter().all(|&p| (0.0..=1.0).contains(&p))));
    }

    #[test]
    fn idx_bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 3, true);
        let err = ingest_idx_images(&images, &labels).unwrap_err();
        assert!(matches!(err, DataError::BadMagic { .. }), "{err}");

        let (images, _) = write_idx_pair(dir.path(), 3, false);
        let (_, labels_other) = {
            let sub = dir.path().join("other");
            std::fs::create_dir(&sub).unwrap();
            write_idx_pair(&sub, 2, false)
        };
        let err = ingest_idx_images(&images, &labels_other).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 3, labels: 2 }), "{err}");
    }

    #[test]
    fn idx_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 3, false);
        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&images, &bytes[..bytes.len() - 3]).unwrap();
        let err = ingest_idx_images(&images, &labels).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. }), "{err}");
    }
}
