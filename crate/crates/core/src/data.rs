//! Dataset ingestion with checksum verification and a split access audit.
//!
//! Datasets live under `<root>/<name>/` where `root` comes from
//! `DFQ_DATA_DIR` (or an explicit path). Every directory carries a
//! `SHA256SUMS` file in `sha256sum` format listing the files read.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Normalization;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "DFQ_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    /// Gzipped IDX files, `{split}-images-idx3-ubyte.gz` / `-labels-idx1-ubyte.gz`.
    Idx,
    /// CIFAR-10 binary batches: 1 label byte + 3072 CHW pixel bytes per record.
    CifarBin,
}

/// Static description of a supported dataset.
#[derive(Clone, Debug)]
pub struct DatasetCard {
    pub name: &'static str,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub class_names: &'static [&'static str],
    pub mean: &'static [f64],
    pub std: &'static [f64],
    format: Format,
}

const DIGITS: &[&str] = &["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

const REGISTRY: &[DatasetCard] = &[
    DatasetCard {
        name: "cifar10",
        shape: [3, 32, 32],
        num_classes: 10,
        train_count: 50000,
        test_count: 10000,
        class_names: &[
            "airplane",
            "automobile",
            "bird",
            "cat",
            "deer",
            "dog",
            "frog",
            "horse",
            "ship",
            "truck",
        ],
        mean: &[0.4914, 0.4822, 0.4465],
        std: &[0.2470, 0.2435, 0.2616],
        format: Format::CifarBin,
    },
    DatasetCard {
        name: "mnist",
        shape: [1, 28, 28],
        num_classes: 10,
        train_count: 60000,
        test_count: 10000,
        class_names: DIGITS,
        mean: &[0.1307],
        std: &[0.3081],
        format: Format::Idx,
    },
    DatasetCard {
        name: "mnist-lite",
        shape: [1, 28, 28],
        num_classes: 10,
        train_count: 8004,
        test_count: 1996,
        class_names: DIGITS,
        mean: &[0.1307],
        std: &[0.3081],
        format: Format::Idx,
    },
];

pub fn supported_datasets() -> Vec<&'static str> {
    REGISTRY.iter().map(|c| c.name).collect()
}

pub fn dataset_card(name: &str) -> Result<&'static DatasetCard> {
    REGISTRY.iter().find(|c| c.name == name).ok_or_else(|| Error::UnknownDataset {
        name: name.to_string(),
        supported: supported_datasets().join(", "),
    })
}

impl DatasetCard {
    pub fn normalization(&self) -> Normalization {
        Normalization {
            mean: self.mean.to_vec(),
            std: self.std.to_vec(),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }

    fn files(&self, split: Split) -> Vec<String> {
        match (self.format, split) {
            (Format::Idx, s) => vec![
                format!("{s}-images-idx3-ubyte.gz"),
                format!("{s}-labels-idx1-ubyte.gz"),
            ],
            (Format::CifarBin, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (Format::CifarBin, Split::Test) => vec!["test_batch.bin".into()],
        }
    }
}

/// One attempt to open a dataset split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub dataset: String,
    pub split: Split,
    /// Context active at the time (e.g. the plan cell id).
    pub context: Option<String>,
    pub granted: bool,
}

#[derive(Debug, Default)]
struct AuditState {
    records: Vec<AccessRecord>,
    context: Option<String>,
    deny_train: bool,
}

/// Shared log of dataset accesses. While the training split is embargoed,
/// any attempt to open it fails and is logged as denied.
#[derive(Clone, Debug, Default)]
pub struct AuditLog {
    inner: Arc<Mutex<AuditState>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Blocks the training split until the guard is dropped.
    pub fn embargo_train(&self, context: &str) -> Embargo {
        let mut s = self.inner.lock().expect("audit lock");
        let previous = (s.context.replace(context.to_string()), s.deny_train);
        s.deny_train = true;
        Embargo {
            log: self.clone(),
            previous,
        }
    }

    pub fn set_context(&self, context: Option<&str>) {
        self.inner.lock().expect("audit lock").context = context.map(str::to_string);
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.inner.lock().expect("audit lock").records.clone()
    }

    /// Training-split accesses (granted or not) recorded under `context`.
    pub fn train_reads(&self, context: &str) -> usize {
        self.records()
            .iter()
            .filter(|r| r.split == Split::Train && r.context.as_deref() == Some(context))
            .count()
    }

    fn check(&self, dataset: &str, split: Split) -> Result<()> {
        let mut s = self.inner.lock().expect("audit lock");
        let granted = !(s.deny_train && split == Split::Train);
        let record = AccessRecord {
            dataset: dataset.to_string(),
            split,
            context: s.context.clone(),
            granted,
        };
        s.records.push(record);
        if granted {
            Ok(())
        } else {
            Err(Error::DataFreeViolation(format!(
                "training split of {dataset} requested during {}",
                s.context.as_deref().unwrap_or("a data-free run")
            )))
        }
    }
}

/// Restores the previous audit policy when dropped.
pub struct Embargo {
    log: AuditLog,
    previous: (Option<String>, bool),
}

impl Drop for Embargo {
    fn drop(&mut self) {
        if let Ok(mut s) = self.log.inner.lock() {
            s.context = self.previous.0.take();
            s.deny_train = self.previous.1;
        }
    }
}

/// Entry point for reading datasets from disk.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub root: PathBuf,
    pub audit: AuditLog,
}

impl DataSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            audit: AuditLog::new(),
        }
    }

    /// Root from `DFQ_DATA_DIR`, falling back to `./data`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| "data".into()))
    }

    pub fn load(&self, name: &str, split: Split) -> Result<Dataset> {
        let card = dataset_card(name)?;
        self.audit.check(name, split)?;
        let dir = self.root.join(name);
        let sums = read_checksums(&dir)?;
        let mut blobs = Vec::new();
        for file in card.files(split) {
            let path = dir.join(&file);
            let bytes = fs::read(&path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
            let expected = sums
                .get(&file)
                .ok_or_else(|| Error::Ingestion(format!("{file} is not listed in {}/SHA256SUMS", dir.display())))?;
            let actual = hex::encode(Sha256::digest(&bytes));
            if &actual != expected {
                return Err(Error::ChecksumMismatch {
                    file: path.display().to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
            blobs.push(bytes);
        }
        let (pixels, labels) = match card.format {
            Format::Idx => parse_idx_pair(&blobs[0], &blobs[1], card.shape)?,
            Format::CifarBin => parse_cifar(&blobs)?,
        };
        let expected = card.count(split);
        if labels.len() != expected {
            return Err(Error::Ingestion(format!(
                "{name} {split}: expected {expected} items, found {}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= card.num_classes) {
            return Err(Error::Ingestion(format!("{name} {split}: label {bad} out of range")));
        }
        Ok(Dataset {
            name: name.to_string(),
            split,
            shape: card.shape,
            num_classes: card.num_classes,
            normalization: card.normalization(),
            pixels,
            labels,
        })
    }
}

fn read_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("SHA256SUMS");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::Ingestion(format!(
            "{}: {e} (datasets need a SHA256SUMS file in sha256sum format)",
            path.display()
        ))
    })?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let digest = it.next()?;
            let file = it.next()?.trim_start_matches('*');
            Some((file.to_string(), digest.to_ascii_lowercase()))
        })
        .collect())
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Ingestion(format!("gzip: {e}")))?;
    Ok(out)
}

fn be_u32(b: &[u8], at: usize) -> Result<usize> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes([s[0], s[1], s[2], s[3]]) as usize)
        .ok_or_else(|| Error::Ingestion("truncated IDX header".into()))
}

fn parse_idx_pair(images: &[u8], labels: &[u8], shape: [usize; 3]) -> Result<(Vec<u8>, Vec<usize>)> {
    let images = gunzip(images)?;
    let labels = gunzip(labels)?;
    if be_u32(&images, 0)? != 0x0803 || be_u32(&labels, 0)? != 0x0801 {
        return Err(Error::Ingestion("bad IDX magic number".into()));
    }
    let n = be_u32(&images, 4)?;
    let (h, w) = (be_u32(&images, 8)?, be_u32(&images, 12)?);
    if [1, h, w] != shape {
        return Err(Error::Ingestion(format!("IDX images are {h}x{w}, expected {}x{}", shape[1], shape[2])));
    }
    if be_u32(&labels, 4)? != n || images.len() != 16 + n * h * w || labels.len() != 8 + n {
        return Err(Error::Ingestion("IDX image and label files disagree".into()));
    }
    Ok((images[16..].to_vec(), labels[8..].iter().map(|&l| l as usize).collect()))
}

fn parse_cifar(blobs: &[Vec<u8>]) -> Result<(Vec<u8>, Vec<usize>)> {
    const REC: usize = 1 + 3 * 32 * 32;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for b in blobs {
        if b.len() % REC != 0 {
            return Err(Error::Ingestion(format!("CIFAR batch of {} bytes is not whole records", b.len())));
        }
        for rec in b.chunks(REC) {
            labels.push(rec[0] as usize);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok((pixels, labels))
}

/// An in-memory split: raw 8-bit pixels, normalised on access.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub normalization: Normalization,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from raw pixels (`N * C * H * W` bytes).
    pub fn from_raw(
        name: &str,
        split: Split,
        shape: [usize; 3],
        num_classes: usize,
        normalization: Normalization,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if pixels.len() != per * labels.len() {
            return Err(Error::shape("dataset pixels", per * labels.len(), pixels.len()));
        }
        Ok(Self {
            name: name.into(),
            split,
            shape,
            num_classes,
            normalization,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The first `n` items (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per: usize = self.shape.iter().product();
        Self {
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Normalised images `(len(idx), C, H, W)` and their labels.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let per = c * plane;
        let scale: Vec<(T, T)> = (0..c)
            .map(|ch| {
                let (m, s) = (self.normalization.mean[ch], self.normalization.std[ch]);
                (T::lit(1.0 / (255.0 * s)), T::lit(-m / s))
            })
            .collect();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let src = &self.pixels[i * per..(i + 1) * per];
            for (ch, &(a, b)) in scale.iter().enumerate() {
                data.extend(src[ch * plane..(ch + 1) * plane].iter().map(|&p| T::lit(p as f64) * a + b));
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&[idx.len(), c, h, w], data).expect("sized above"), labels)
    }

    /// Index batches in order; the last one may be short.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// A random permutation split into full batches.
    pub fn shuffled_batches<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Raw pixel values in [0, 1] from normalised tensor values.
pub fn denormalize<T: Scalar>(x: &Tensor<T>, norm: &Normalization) -> Tensor<T> {
    let shape = x.shape();
    let c = shape.get(1).copied().unwrap_or(1);
    let plane: usize = shape.iter().skip(2).product();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (i / plane) % c;
        let p = v.as_f64() * norm.std[ch] + norm.mean[ch];
        *v = T::lit(p.clamp(0.0, 1.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use std::io::Write;

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut e = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    }

    fn idx_files(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3];
        for v in [n as u32, 28, 28] {
            img.extend(v.to_be_bytes());
        }
        img.extend((0..n * 784).map(|i| (i % 256) as u8));
        let mut lab = vec![0, 0, 8, 1];
        lab.extend((n as u32).to_be_bytes());
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (gz(&img), gz(&lab))
    }

    #[test]
    fn idx_parses() {
        let (i, l) = idx_files(3);
        let (px, lab) = parse_idx_pair(&i, &l, [1, 28, 28]).unwrap();
        assert_eq!(px.len(), 3 * 784);
        assert_eq!(lab, vec![0, 1, 2]);
    }

    #[test]
    fn unknown_dataset_lists_supported() {
        let err = dataset_card("imagenet").unwrap_err().to_string();
        assert!(err.contains("cifar10") && err.contains("mnist"));
    }

    #[test]
    fn checksum_mismatch_reports_digests() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("mnist-lite");
        fs::create_dir_all(&d).unwrap();
        let (i, l) = idx_files(2);
        fs::write(d.join("test-images-idx3-ubyte.gz"), &i).unwrap();
        fs::write(d.join("test-labels-idx1-ubyte.gz"), &l).unwrap();
        let good = hex::encode(Sha256::digest(&l));
        fs::write(
            d.join("SHA256SUMS"),
            format!("{}  test-images-idx3-ubyte.gz\n{good}  test-labels-idx1-ubyte.gz\n", "0".repeat(64)),
        )
        .unwrap();
        match DataSource::new(dir.path()).load("mnist-lite", Split::Test) {
            Err(Error::ChecksumMismatch { expected, actual, .. }) => {
                assert_eq!(expected, "0".repeat(64));
                assert_eq!(actual, hex::encode(Sha256::digest(&i)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn embargo_blocks_train_split_and_is_audited() {
        let src = DataSource::new("/nonexistent");
        {
            let _g = src.audit.embargo_train("cell-a");
            let err = src.load("mnist-lite", Split::Train).unwrap_err();
            assert!(err.to_string().contains("data-free violation"));
        }
        assert_eq!(src.audit.train_reads("cell-a"), 1);
        assert!(!src.audit.records()[0].granted);
        // Embargo lifted: the failure is now an ingestion error.
        assert!(matches!(src.load("mnist-lite", Split::Train), Err(Error::Ingestion(_))));
    }

    #[test]
    fn batch_normalises_per_channel() {
        let norm = Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        };
        let ds = Dataset::from_raw("t", Split::Test, [1, 1, 2], 2, norm.clone(), vec![0, 255, 51, 102], vec![0, 1]).unwrap();
        let (x, y) = ds.batch::<f64>(&[1, 0]);
        assert_eq!(y, vec![1, 0]);
        let want = [0.2 / 0.25 - 2.0, 0.4 / 0.25 - 2.0, -2.0, 2.0];
        for (a, b) in x.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = denormalize(&x, &norm);
        assert!((back.data()[3] - 1.0).abs() < 1e-12);
    }
}
