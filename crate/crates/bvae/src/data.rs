//! MNIST-style IDX datasets and continual-learning task schedules.
//!
//! IDX files are parsed from their big-endian headers (magic 2051 for images,
//! 2049 for labels); files beginning with the gzip signature 0x1f 0x8b are
//! decompressed transparently. Pixels are scaled to [0, 1] by /255. No code
//! here touches the network; `tools/fetch_mnist.sh` provisions the files.

use crate::rng::Rng;
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use std::env;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x} at offset 0, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated, needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("schedule: classes_per_task {0} must divide 10")]
    BadClassesPerTask(usize),
    #[error("schedule: need at least one task, got {0}")]
    NoTasks(usize),
    #[error("{path}: not a dataset container (bad magic or version)")]
    BadContainer { path: String },
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    if buf.len() < offset + 4 {
        return Err(DataError::Truncated {
            path: path.to_string(),
            offset,
            needed: 4,
            len: buf.len(),
        });
    }
    Ok(u32::from_be_bytes([
        buf[offset],
        buf[offset + 1],
        buf[offset + 2],
        buf[offset + 3],
    ]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

/// Images `[n, rows*cols]` with f64 pixels in [0, 1] plus byte labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    images: Tensor,
    labels: Vec<u8>,
    split: SplitTag,
}

impl ImageDataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: SplitTag) -> ImageDataset {
        assert_eq!(
            images.shape().len(),
            2,
            "ImageDataset: images must be rank 2"
        );
        assert_eq!(
            images.shape()[0],
            labels.len(),
            "ImageDataset: {} image rows vs {} labels",
            images.shape()[0],
            labels.len()
        );
        ImageDataset {
            images,
            labels,
            split,
        }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Rows `rows` gathered into a fresh `[len, dim]` batch tensor.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.images.row(r));
        }
        Tensor::from_vec(&[rows.len(), d], data)
    }

    pub fn subset(&self, rows: &[usize]) -> ImageDataset {
        ImageDataset {
            images: self.gather(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            split: self.split,
        }
    }

    /// First `n` examples in file order.
    pub fn take(&self, n: usize) -> ImageDataset {
        assert!(n <= self.n(), "take: {} of {}", n, self.n());
        let rows: Vec<usize> = (0..n).collect();
        self.subset(&rows)
    }

    /// Examples whose label is in `classes`, in file order.
    pub fn filter_classes(&self, classes: &[u8]) -> ImageDataset {
        let rows: Vec<usize> = (0..self.n())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&rows)
    }

    /// Same images with columns rearranged: output column j reads input
    /// column `perm[j]`. Labels unchanged.
    pub fn permute_pixels(&self, perm: &[usize]) -> ImageDataset {
        let d = self.dim();
        assert_eq!(
            perm.len(),
            d,
            "permute_pixels: perm length {} vs dim {}",
            perm.len(),
            d
        );
        let mut data = Vec::with_capacity(self.images.numel());
        for i in 0..self.n() {
            let row = self.images.row(i);
            for &p in perm {
                data.push(row[p]);
            }
        }
        ImageDataset {
            images: Tensor::from_vec(&[self.n(), d], data),
            labels: self.labels.clone(),
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> [usize; 10] {
        let mut counts = [0usize; 10];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    // ---- binary container: magic, version, split, n, dim, labels, LE f64 pixels ----

    const CONTAINER_MAGIC: &'static [u8; 4] = b"BVDS";
    const CONTAINER_VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::with_capacity(16 + self.labels.len() + self.images.numel() * 8);
        buf.extend_from_slice(Self::CONTAINER_MAGIC);
        buf.extend_from_slice(&Self::CONTAINER_VERSION.to_le_bytes());
        buf.push(match self.split {
            SplitTag::Train => 0,
            SplitTag::Test => 1,
        });
        buf.extend_from_slice(&(self.n() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        buf.extend_from_slice(&self.labels);
        for v in self.images.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<ImageDataset, DataError> {
        let p = path.display().to_string();
        let buf = fs::read(path).map_err(|source| DataError::Io {
            path: p.clone(),
            source,
        })?;
        let bad = || DataError::BadContainer { path: p.clone() };
        if buf.len() < 25 || &buf[0..4] != Self::CONTAINER_MAGIC {
            return Err(bad());
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != Self::CONTAINER_VERSION {
            return Err(bad());
        }
        let split = match buf[8] {
            0 => SplitTag::Train,
            1 => SplitTag::Test,
            _ => return Err(bad()),
        };
        let n = u64::from_le_bytes(buf[9..17].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(buf[17..25].try_into().unwrap()) as usize;
        let want = 25 + n + n * dim * 8;
        if buf.len() != want {
            return Err(bad());
        }
        let labels = buf[25..25 + n].to_vec();
        let mut data = Vec::with_capacity(n * dim);
        for chunk in buf[25 + n..].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(ImageDataset {
            images: Tensor::from_vec(&[n, dim], data),
            labels,
            split,
        })
    }
}

/// Parses an IDX image/label file pair into a dataset.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    split: SplitTag,
) -> Result<ImageDataset, DataError> {
    let ip = images_path.display().to_string();
    let ibuf = read_file(images_path)?;
    let magic = be_u32(&ibuf, 0, &ip)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: ip,
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let n = be_u32(&ibuf, 4, &ip)? as usize;
    let rows = be_u32(&ibuf, 8, &ip)? as usize;
    let cols = be_u32(&ibuf, 12, &ip)? as usize;
    let dim = rows * cols;
    if ibuf.len() < 16 + n * dim {
        return Err(DataError::Truncated {
            path: ip,
            offset: 16,
            needed: n * dim,
            len: ibuf.len(),
        });
    }
    let data: Vec<f64> = ibuf[16..16 + n * dim]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();

    let lp = labels_path.display().to_string();
    let lbuf = read_file(labels_path)?;
    let magic = be_u32(&lbuf, 0, &lp)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: lp,
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let ln = be_u32(&lbuf, 4, &lp)? as usize;
    if lbuf.len() < 8 + ln {
        return Err(DataError::Truncated {
            path: lp,
            offset: 8,
            needed: ln,
            len: lbuf.len(),
        });
    }
    if n != ln {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ln,
        });
    }
    let labels = lbuf[8..8 + ln].to_vec();

    Ok(ImageDataset {
        images: Tensor::from_vec(&[n, dim], data),
        labels,
        split,
    })
}

/// Data root: `$BVAE_DATA_DIR` if set, else `data/mnist` under the current
/// directory.
pub fn default_data_dir() -> PathBuf {
    match env::var_os("BVAE_DATA_DIR") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from("data/mnist"),
    }
}

fn find_idx_file(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{}.gz", stem))
    }
}

/// Loads the standard train/test MNIST pair from `dir`, accepting either
/// plain or gzipped files under the canonical names.
pub fn load_mnist(dir: &Path) -> Result<(ImageDataset, ImageDataset), DataError> {
    let train = load_idx(
        &find_idx_file(dir, "train-images-idx3-ubyte"),
        &find_idx_file(dir, "train-labels-idx1-ubyte"),
        SplitTag::Train,
    )?;
    let test = load_idx(
        &find_idx_file(dir, "t10k-images-idx3-ubyte"),
        &find_idx_file(dir, "t10k-labels-idx1-ubyte"),
        SplitTag::Test,
    )?;
    Ok((train, test))
}

// ---- task schedules ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScheduleKind {
    SplitMnist,
    PermutedMnist,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    /// Classes present in this task (all ten for permuted schedules).
    pub classes: Vec<u8>,
    /// Pixel permutation for permuted schedules; `None` means identity.
    pub pixel_perm: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSchedule {
    pub kind: ScheduleKind,
    pub tasks: Vec<Task>,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// The slice of `ds` a task trains or tests on: class filter for split
    /// schedules, pixel permutation for permuted ones.
    pub fn materialize(&self, ds: &ImageDataset, task: &Task) -> ImageDataset {
        match self.kind {
            ScheduleKind::SplitMnist => ds.filter_classes(&task.classes),
            ScheduleKind::PermutedMnist => match &task.pixel_perm {
                Some(p) => ds.permute_pixels(p),
                None => ds.clone(),
            },
        }
    }
}

/// Splits the ten digit classes into `10 / classes_per_task` tasks. The seed
/// shuffles which classes land in which task; both arms of a comparison run
/// sharing a seed therefore see the same schedule.
pub fn make_split_schedule(classes_per_task: usize, seed: u64) -> Result<TaskSchedule, DataError> {
    if classes_per_task == 0 || 10 % classes_per_task != 0 {
        return Err(DataError::BadClassesPerTask(classes_per_task));
    }
    let mut classes: Vec<u8> = (0..10).collect();
    Rng::derive(seed, "split-schedule").shuffle(&mut classes);
    let tasks = classes
        .chunks_exact(classes_per_task)
        .enumerate()
        .map(|(id, chunk)| Task {
            id,
            classes: chunk.to_vec(),
            pixel_perm: None,
        })
        .collect();
    Ok(TaskSchedule {
        kind: ScheduleKind::SplitMnist,
        tasks,
    })
}

/// `num_tasks` full-MNIST tasks; task 1 sees the identity pixel order, every
/// later task a fresh seeded permutation of the 784 pixels.
pub fn make_permuted_schedule(num_tasks: usize, seed: u64) -> Result<TaskSchedule, DataError> {
    if num_tasks == 0 {
        return Err(DataError::NoTasks(num_tasks));
    }
    let all: Vec<u8> = (0..10).collect();
    let tasks = (0..num_tasks)
        .map(|id| Task {
            id,
            classes: all.clone(),
            pixel_perm: if id == 0 {
                None
            } else {
                Some(Rng::derive(seed, &format!("permuted-task-{}", id)).permutation(784))
            },
        })
        .collect();
    Ok(TaskSchedule {
        kind: ScheduleKind::PermutedMnist,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        b.extend_from_slice(&(n as u32).to_be_bytes());
        b.extend_from_slice(&(rows as u32).to_be_bytes());
        b.extend_from_slice(&(cols as u32).to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write_tmp(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn parses_synthetic_idx_pair() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_tmp(
            dir.path(),
            "img",
            &idx_images(2, 2, 2, &[0, 51, 102, 255, 0, 0, 0, 0]),
        );
        let lab = write_tmp(dir.path(), "lab", &idx_labels(&[7, 3]));
        let ds = load_idx(&img, &lab, SplitTag::Train).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.images().row(0), &[0.0, 0.2, 0.4, 1.0]);
        assert_eq!(ds.split(), SplitTag::Train);
    }

    #[test]
    fn gzip_detection_by_prefix() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_images(1, 1, 2, &[128, 64])).unwrap();
        let img = write_tmp(dir.path(), "img.gz", &enc.finish().unwrap());
        let lab = write_tmp(dir.path(), "lab", &idx_labels(&[1]));
        let ds = load_idx(&img, &lab, SplitTag::Test).unwrap();
        assert_eq!(ds.images().row(0), &[128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn wrong_magic_names_offset_and_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x99;
        let img = write_tmp(dir.path(), "img", &bytes);
        let lab = write_tmp(dir.path(), "lab", &idx_labels(&[0]));
        let err = load_idx(&img, &lab, SplitTag::Train).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("bad magic") && msg.contains("offset 0"),
            "{}",
            msg
        );
    }

    #[test]
    fn truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_tmp(dir.path(), "img", &idx_images(2, 2, 2, &[0; 5]));
        let lab = write_tmp(dir.path(), "lab", &idx_labels(&[0, 1]));
        assert!(matches!(
            load_idx(&img, &lab, SplitTag::Train),
            Err(DataError::Truncated { .. })
        ));
        let img = write_tmp(dir.path(), "img2", &idx_images(2, 2, 2, &[0; 8]));
        let lab = write_tmp(dir.path(), "lab2", &idx_labels(&[0, 1, 2]));
        assert!(matches!(
            load_idx(&img, &lab, SplitTag::Train),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn container_round_trip_is_bit_identical() {
        let ds = ImageDataset::new(
            Tensor::from_vec(&[3, 2], vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0 / 3.0]),
            vec![1, 2, 3],
            SplitTag::Test,
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.bvds");
        ds.save(&p).unwrap();
        let back = ImageDataset::load(&p).unwrap();
        assert!(ds.images().bit_eq(back.images()));
        assert_eq!(ds.labels(), back.labels());
        assert_eq!(ds.split(), back.split());
    }

    #[test]
    fn subset_filter_and_permute() {
        let ds = ImageDataset::new(
            Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            vec![0, 1, 0],
            SplitTag::Train,
        );
        let f = ds.filter_classes(&[0]);
        assert_eq!(f.n(), 2);
        assert_eq!(f.images().row(1), &[5.0, 6.0]);
        let p = ds.permute_pixels(&[1, 0]);
        assert_eq!(p.images().row(0), &[2.0, 1.0]);
        assert_eq!(p.labels(), ds.labels());
    }

    #[test]
    fn split_schedule_covers_each_class_once() {
        for cpt in [1, 2, 5] {
            let s = make_split_schedule(cpt, 3).unwrap();
            assert_eq!(s.num_tasks(), 10 / cpt);
            let mut seen = [false; 10];
            for t in &s.tasks {
                assert_eq!(t.classes.len(), cpt);
                for &c in &t.classes {
                    assert!(!seen[c as usize], "class {} twice", c);
                    seen[c as usize] = true;
                }
            }
            assert!(seen.iter().all(|&b| b));
        }
        assert!(make_split_schedule(3, 0).is_err());
        assert!(make_split_schedule(0, 0).is_err());
    }

    #[test]
    fn split_schedule_deterministic_per_seed() {
        let a = make_split_schedule(1, 9).unwrap();
        let b = make_split_schedule(1, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permuted_schedule_first_task_identity_rest_seeded() {
        let s = make_permuted_schedule(3, 5).unwrap();
        assert!(s.tasks[0].pixel_perm.is_none());
        let p1 = s.tasks[1].pixel_perm.as_ref().unwrap();
        let p2 = s.tasks[2].pixel_perm.as_ref().unwrap();
        assert_eq!(p1.len(), 784);
        assert_ne!(p1, p2);
        let again = make_permuted_schedule(3, 5).unwrap();
        assert_eq!(s, again);
        assert!(make_permuted_schedule(0, 5).is_err());
    }
}
