//! Datasets: seeded Gaussian-blob classification tasks and an IDX image
//! loader for small image files.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Real;
use crate::model::LabeledSample;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    BadSpec(String),
    #[error("{path}: bad magic at byte {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated at byte {offset}: needed {needed} more bytes")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot derive label file path from {0}")]
    NoCompanion(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone)]
pub struct Dataset<F: Real> {
    pub samples: Vec<LabeledSample<F>>,
    pub input_dim: usize,
    pub classes: usize,
}

impl<F: Real> Dataset<F> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flattens a subset of samples into a `[len, input_dim]` matrix plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Vec<F>, Vec<usize>) {
        let mut flat = Vec::with_capacity(idx.len() * self.input_dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            flat.extend_from_slice(&self.samples[i].input);
            labels.push(self.samples[i].label);
        }
        (flat, labels)
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset<F: Real> {
    pub train: Dataset<F>,
    pub test: Dataset<F>,
}

/// Gaussian mixture classification task. Class means are drawn once from
/// the seed; labels cycle round-robin so both splits are balanced.
#[derive(Debug, Clone)]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub means: Vec<Vec<f64>>,
    pub scale: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Draws `classes` distinct means uniformly from `[-spread, spread]^dim`.
    pub fn generated(
        classes: usize,
        input_dim: usize,
        spread: f64,
        scale: f64,
        train_count: usize,
        test_count: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        if classes < 2 || input_dim == 0 {
            return Err(DataError::BadSpec(
                "need at least 2 classes and a positive input dim".into(),
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..input_dim).map(|_| rng.random_range(-spread..spread)).collect())
            .collect();
        let spec = SyntheticTaskSpec {
            classes,
            input_dim,
            means,
            scale,
            train_count,
            test_count,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(DataError::BadSpec("sample counts must be positive".into()));
        }
        if self.means.len() != self.classes || self.means.iter().any(|m| m.len() != self.input_dim)
        {
            return Err(DataError::BadSpec("means do not match classes/dim".into()));
        }
        for i in 0..self.means.len() {
            for j in (i + 1)..self.means.len() {
                if self.means[i] == self.means[j] {
                    return Err(DataError::BadSpec(format!(
                        "class means {i} and {j} coincide"
                    )));
                }
            }
        }
        if self.scale < 0.0 {
            return Err(DataError::BadSpec("scale must be non-negative".into()));
        }
        Ok(())
    }
}

fn draw_split<F: Real>(spec: &SyntheticTaskSpec, count: usize, stream: u64) -> Dataset<F> {
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let samples = (0..count)
        .map(|i| {
            let label = i % spec.classes;
            let input = spec.means[label]
                .iter()
                .map(|&m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    F::from_f64(m + spec.scale * noise)
                })
                .collect();
            LabeledSample { input, label }
        })
        .collect();
    Dataset {
        samples,
        input_dim: spec.input_dim,
        classes: spec.classes,
    }
}

/// Deterministic train/test datasets from a task spec. The two splits use
/// disjoint RNG streams.
pub fn make_synthetic<F: Real>(spec: &SyntheticTaskSpec) -> Result<SplitDataset<F>, DataError> {
    spec.validate()?;
    Ok(SplitDataset {
        train: draw_split(spec, spec.train_count, 1),
        test: draw_split(spec, spec.test_count, 2),
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(buf: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    if buf.len() < offset + 4 {
        return Err(DataError::Truncated {
            path: path.to_string(),
            offset: buf.len(),
            needed: offset + 4 - buf.len(),
        });
    }
    Ok(u32::from_be_bytes([
        buf[offset],
        buf[offset + 1],
        buf[offset + 2],
        buf[offset + 3],
    ]))
}

fn read_idx_images(path: &Path) -> Result<(Vec<Vec<u8>>, usize), DataError> {
    let name = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| DataError::Io(format!("{name}: {e}")))?;
    let magic = read_be_u32(&buf, 0, &name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: name,
            offset: 0,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(&buf, 4, &name)? as usize;
    let rows = read_be_u32(&buf, 8, &name)? as usize;
    let cols = read_be_u32(&buf, 12, &name)? as usize;
    let pixels = rows * cols;
    let need = 16 + n * pixels;
    if buf.len() < need {
        return Err(DataError::Truncated {
            path: name,
            offset: buf.len(),
            needed: need - buf.len(),
        });
    }
    let images = (0..n)
        .map(|i| buf[16 + i * pixels..16 + (i + 1) * pixels].to_vec())
        .collect();
    Ok((images, pixels))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let name = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| DataError::Io(format!("{name}: {e}")))?;
    let magic = read_be_u32(&buf, 0, &name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: name,
            offset: 0,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_be_u32(&buf, 4, &name)? as usize;
    if buf.len() < 8 + n {
        return Err(DataError::Truncated {
            path: name,
            offset: buf.len(),
            needed: 8 + n - buf.len(),
        });
    }
    Ok(buf[8..8 + n].to_vec())
}

/// Loads an IDX image file plus its label file; pixels scale to `[0, 1]`.
pub fn load_idx_pair<F: Real>(images: &Path, labels: &Path) -> Result<Dataset<F>, DataError> {
    let (imgs, pixels) = read_idx_images(images)?;
    let labs = read_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(DataError::CountMismatch {
            images: imgs.len(),
            labels: labs.len(),
        });
    }
    let classes = labs.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    let samples = imgs
        .into_iter()
        .zip(&labs)
        .map(|(img, &label)| LabeledSample {
            input: img
                .iter()
                .map(|&b| F::from_f64(b as f64 / 255.0))
                .collect(),
            label: label as usize,
        })
        .collect();
    Ok(Dataset {
        samples,
        input_dim: pixels,
        classes,
    })
}

/// Loads an IDX image file, deriving the companion label path by replacing
/// `images`/`idx3` naming with `labels`/`idx1`.
pub fn load_idx_images<F: Real>(path: &Path) -> Result<Dataset<F>, DataError> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| DataError::NoCompanion(path.display().to_string()))?;
    let companion = name.replace("images", "labels").replace("idx3", "idx1");
    if companion == name {
        return Err(DataError::NoCompanion(path.display().to_string()));
    }
    let mut label_path = PathBuf::from(path);
    label_path.set_file_name(companion);
    load_idx_pair(path, &label_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticTaskSpec::generated(8, 4, 1.0, 0.2, 2000, 500, 11).unwrap();
        let a: SplitDataset<f32> = make_synthetic(&spec).unwrap();
        assert_eq!(a.train.len(), 2000);
        assert_eq!(a.test.len(), 500);
        let b: SplitDataset<f32> = make_synthetic(&spec).unwrap();
        for (x, y) in a.train.samples.iter().zip(&b.train.samples) {
            assert_eq!(x, y);
        }
        // train and test are disjoint draws
        assert_ne!(a.train.samples[0].input, a.test.samples[0].input);
    }

    #[test]
    fn tiny_scale_is_separable_by_nearest_mean() {
        let spec = SyntheticTaskSpec::generated(5, 3, 1.0, 1e-9, 100, 100, 3).unwrap();
        let ds: SplitDataset<f64> = make_synthetic(&spec).unwrap();
        // nearest-class-mean oracle classifies everything correctly
        let mut correct = 0;
        for s in &ds.test.samples {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, mean) in spec.means.iter().enumerate() {
                let d: f64 = s
                    .input
                    .iter()
                    .zip(mean)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == s.label {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.test.len());
    }

    #[test]
    fn rejects_coincident_means() {
        let spec = SyntheticTaskSpec {
            classes: 2,
            input_dim: 2,
            means: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            scale: 0.1,
            train_count: 10,
            test_count: 10,
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    fn write_idx(dir: &Path, n: usize, rows: usize, cols: usize) -> (PathBuf, PathBuf) {
        let img_path = dir.join("t-images-idx3-ubyte");
        let lab_path = dir.join("t-labels-idx1-ubyte");
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..n * rows * cols {
            img.push((i % 256) as u8);
        }
        std::fs::File::create(&img_path)
            .unwrap()
            .write_all(&img)
            .unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            lab.push((i % 3) as u8);
        }
        std::fs::File::create(&lab_path)
            .unwrap()
            .write_all(&lab)
            .unwrap();
        (img_path, lab_path)
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = write_idx(dir.path(), 4, 3, 3);
        let ds: Dataset<f32> = load_idx_images(&img).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.input_dim, 9);
        assert_eq!(ds.samples[0].input[0], 0.0);
        // pixel byte 35 is sample 3, offset 8
        assert_eq!(ds.samples[3].input[8], 35.0 / 255.0);
    }

    #[test]
    fn idx_pixel_255_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("p-images-idx3-ubyte");
        let lab_path = dir.path().join("p-labels-idx1-ubyte");
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.push(255);
        std::fs::write(&img_path, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&1u32.to_be_bytes());
        lab.push(0);
        std::fs::write(&lab_path, lab).unwrap();
        let ds: Dataset<f32> = load_idx_pair(&img_path, &lab_path).unwrap();
        assert_eq!(ds.samples[0].input[0], 1.0);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad-images-idx3-ubyte");
        std::fs::write(&bad, 0x0000_0802u32.to_be_bytes()).unwrap();
        match load_idx_images::<f32>(&bad) {
            Err(DataError::BadMagic { offset: 0, .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
        let (img, lab) = write_idx(dir.path(), 4, 3, 3);
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 5]).unwrap();
        match load_idx_pair::<f32>(&img, &lab) {
            Err(DataError::Truncated { needed: 5, .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_idx(dir.path(), 4, 2, 2);
        // rewrite labels with 3 entries
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&lab, bytes).unwrap();
        assert!(matches!(
            load_idx_pair::<f32>(&img, &lab),
            Err(DataError::CountMismatch { images: 4, labels: 3 })
        ));
    }
}
