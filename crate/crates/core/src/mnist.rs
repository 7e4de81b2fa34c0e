//! MNIST ingestion: IDX parsing, normalization, one-hot targets and mini-batching.
//!
//! IDX layout: a big-endian `u32` magic (`0x0803` for rank-3 images, `0x0801`
//! for rank-1 labels), one big-endian `u32` per dimension, then the unsigned
//! byte payload. Files may be raw or wrapped in gzip.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// The kind of IDX file, which fixes the expected magic number and rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

impl IdxKind {
    pub fn magic(self) -> u32 {
        match self {
            IdxKind::Images => IMAGE_MAGIC,
            IdxKind::Labels => LABEL_MAGIC,
        }
    }

    fn rank(self) -> usize {
        match self {
            IdxKind::Images => 3,
            IdxKind::Labels => 1,
        }
    }
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Decodes the header and validates the payload length.
///
/// The low byte of the magic number encodes the rank; the type byte must be
/// `0x08` (unsigned byte).
pub fn parse_idx(bytes: &[u8]) -> Result<(IdxHeader, &[u8])> {
    let magic = read_be_u32(bytes, 0)?;
    if magic >> 8 != 0x08 {
        return Err(Error::Format(format!(
            "magic {magic:#010x} is not an unsigned-byte IDX file"
        )));
    }
    let rank = (magic & 0xff) as usize;
    if rank == 0 {
        return Err(Error::Format("IDX rank 0".into()));
    }
    let dims = (0..rank)
        .map(|i| read_be_u32(bytes, 4 + 4 * i))
        .collect::<Result<Vec<_>>>()?;
    let header = IdxHeader { magic, dims };
    let start = 4 + 4 * rank;
    let payload = &bytes[start..];
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected: start + expected,
            actual: bytes.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after a {expected}-byte payload",
            payload.len() - expected
        )));
    }
    Ok((header, payload))
}

/// Like [`parse_idx`], additionally requiring the magic number of `kind`.
pub fn parse_idx_kind(bytes: &[u8], kind: IdxKind) -> Result<(IdxHeader, &[u8])> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != kind.magic() {
        return Err(Error::Magic {
            expected: kind.magic(),
            actual: magic,
        });
    }
    let (header, payload) = parse_idx(bytes)?;
    debug_assert_eq!(header.dims.len(), kind.rank());
    Ok((header, payload))
}

/// Returns the bytes unchanged, or inflated when they start with the gzip signature.
pub fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Maps an 8-bit intensity to `[0, 1]`: 0 stays 0, 255 becomes 1.
pub fn normalize_pixel(p: u8) -> f64 {
    f64::from(p) / 255.0
}

pub fn one_hot(label: usize) -> Result<Tensor> {
    if label >= NUM_CLASSES {
        return Err(Error::domain(format!(
            "label {label} outside 0..{NUM_CLASSES}"
        )));
    }
    let mut v = vec![0.0; NUM_CLASSES];
    v[label] = 1.0;
    Tensor::vector(&v)
}

/// Paired images, class labels and one-hot targets.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    targets: Tensor,
}

impl Dataset {
    /// `images` must be `[N, C, H, W]` with one label per sample.
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        let mut targets = vec![0.0; labels.len() * NUM_CLASSES];
        for (i, &label) in labels.iter().enumerate() {
            if label >= NUM_CLASSES {
                return Err(Error::domain(format!(
                    "label {label} of sample {i} outside 0..{NUM_CLASSES}"
                )));
            }
            targets[i * NUM_CLASSES + label] = 1.0;
        }
        let targets = Tensor::from_vec(&[labels.len(), NUM_CLASSES], targets)?;
        Ok(Self {
            images,
            labels,
            targets,
        })
    }

    /// Builds a dataset from parsed IDX image and label files.
    pub fn from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Self> {
        let (ih, pixels) = parse_idx_kind(image_bytes, IdxKind::Images)?;
        let (lh, raw_labels) = parse_idx_kind(label_bytes, IdxKind::Labels)?;
        if ih.dims[0] != lh.dims[0] {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                ih.dims[0], lh.dims[0]
            )));
        }
        let (n, h, w) = (ih.dims[0] as usize, ih.dims[1] as usize, ih.dims[2] as usize);
        let data = pixels.iter().map(|&p| normalize_pixel(p)).collect();
        let images = Tensor::from_vec(&[n, 1, h, w], data)?;
        let labels = raw_labels.iter().map(|&l| usize::from(l)).collect();
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// The samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let images = self.images.gather_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels)
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Batch `idx` as `(images, targets, labels)`.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            images: self.images.gather_rows(idx)?,
            targets: self.targets.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// One epoch of mini-batches. With `shuffle`, the order is a permutation
    /// drawn from `rng`; otherwise samples come in index order.
    pub fn batches(&self, m: usize, shuffle: Option<&mut ChaCha8Rng>) -> Result<Batches<'_>> {
        let plan = batch_plan(self.len(), m, shuffle)?;
        Ok(Batches {
            dataset: self,
            plan: plan.into_iter(),
        })
    }

    /// [`Dataset::batches`] with a dedicated generator seeded from `seed`.
    pub fn batches_seeded(&self, m: usize, shuffle: bool, seed: u64) -> Result<Batches<'_>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.batches(m, shuffle.then_some(&mut rng))
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub labels: Vec<usize>,
}

pub struct Batches<'a> {
    dataset: &'a Dataset,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.plan.next()?;
        // indices come from batch_plan and are always in range
        Some(self.dataset.batch(&idx).expect("planned batch indices are valid"))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.plan.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Splits `0..n` into consecutive chunks of `m` (the last may be shorter),
/// after a seeded shuffle when `shuffle` is given.
pub fn batch_plan(n: usize, m: usize, shuffle: Option<&mut ChaCha8Rng>) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::domain("cannot batch an empty dataset"));
    }
    if m == 0 {
        return Err(Error::domain("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    Ok(order.chunks(m).map(<[usize]>::to_vec).collect())
}

/// One of the four canonical files.
#[derive(Clone, Copy, Debug)]
pub struct CanonicalFile {
    /// Base name without the `.gz` suffix.
    pub name: &'static str,
    pub kind: IdxKind,
    pub count: u32,
    /// SHA-256 of the uncompressed file.
    pub sha256: &'static str,
}

pub const CANONICAL_FILES: [CanonicalFile; 4] = [
    CanonicalFile {
        name: "train-images-idx3-ubyte",
        kind: IdxKind::Images,
        count: 60_000,
        sha256: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    },
    CanonicalFile {
        name: "train-labels-idx1-ubyte",
        kind: IdxKind::Labels,
        count: 60_000,
        sha256: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    },
    CanonicalFile {
        name: "t10k-images-idx3-ubyte",
        kind: IdxKind::Images,
        count: 10_000,
        sha256: "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    },
    CanonicalFile {
        name: "t10k-labels-idx1-ubyte",
        kind: IdxKind::Labels,
        count: 10_000,
        sha256: "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    },
];

pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

/// Finds `<name>` or `<name>.gz` under `dir`. Also accepts the
/// `train-images.idx3-ubyte` spelling some mirrors use.
pub fn locate(dir: &Path, name: &str) -> Option<PathBuf> {
    let dotted = name.replacen("-idx", ".idx", 1);
    [name.to_string(), format!("{name}.gz"), dotted.clone(), format!("{dotted}.gz")]
        .into_iter()
        .map(|candidate| dir.join(candidate))
        .find(|p| p.is_file())
}

/// Reads a file and transparently inflates gzip.
pub fn read_idx_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    maybe_gunzip(bytes).map_err(|e| e.in_file(path))
}

fn load_file(dir: &Path, file: &CanonicalFile) -> Result<Vec<u8>> {
    let path = locate(dir, file.name).ok_or_else(|| {
        Error::from(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "{} not found in {} (run `digitnet data --fetch --dir {}`)",
                file.name,
                dir.display(),
                dir.display()
            ),
        ))
    })?;
    read_idx_file(&path)
}

/// Training and test splits.
#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    pub fn load(dir: &Path) -> Result<Self> {
        let [ti, tl, si, sl] = &CANONICAL_FILES;
        let pair = |img: &CanonicalFile, lbl: &CanonicalFile| -> Result<Dataset> {
            let images = load_file(dir, img)?;
            let labels = load_file(dir, lbl)?;
            Dataset::from_idx(&images, &labels).map_err(|e| e.in_file(dir.join(img.name)))
        };
        Ok(Self {
            train: pair(ti, tl)?,
            test: pair(si, sl)?,
        })
    }
}

/// Checks header and SHA-256 of each canonical file in `dir`.
pub fn verify_dir(dir: &Path) -> Result<()> {
    for file in &CANONICAL_FILES {
        let path = locate(dir, file.name).ok_or_else(|| {
            Error::from(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} missing", file.name),
            ))
            .in_file(dir.join(file.name))
        })?;
        let bytes = read_idx_file(&path)?;
        let (header, _) = parse_idx_kind(&bytes, file.kind).map_err(|e| e.in_file(&path))?;
        if header.dims[0] != file.count {
            return Err(Error::Format(format!(
                "expected {} items, header says {}",
                file.count, header.dims[0]
            ))
            .in_file(&path));
        }
        let actual = hex::encode(Sha256::digest(&bytes));
        if actual != file.sha256 {
            return Err(Error::Checksum {
                path,
                expected: file.sha256.into(),
                actual,
            });
        }
    }
    Ok(())
}

/// Downloads the gzipped canonical files from `mirror` into `dir`, skipping
/// files already present, and verifies them.
pub fn fetch(dir: &Path, mirror: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    for file in &CANONICAL_FILES {
        if locate(dir, file.name).is_some() {
            continue;
        }
        let url = format!("{}/{}.gz", mirror.trim_end_matches('/'), file.name);
        let bytes = ureq::get(&url)
            .call()
            .map_err(|e| Error::Fetch(format!("{url}: {e}")))?
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        fs::write(dir.join(format!("{}.gz", file.name)), bytes)?;
    }
    verify_dir(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn parses_header_big_endian() {
        let bytes = idx(IMAGE_MAGIC, &[2, 2, 3], &[7; 12]);
        let (h, payload) = parse_idx(&bytes).unwrap();
        assert_eq!(h.magic, 2051);
        assert_eq!(h.dims, vec![2, 2, 3]);
        assert_eq!(payload.len(), 12);
    }

    #[test]
    fn empty_payload_is_truncation() {
        let bytes = idx(LABEL_MAGIC, &[10], &[]);
        assert_eq!(bytes.len(), 8);
        match parse_idx(&bytes) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, 18);
                assert_eq!(actual, 8);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn short_header_is_truncation() {
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Truncated { .. })));
        assert!(matches!(
            parse_idx(&idx(IMAGE_MAGIC, &[1], &[])[..8]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_names_both() {
        let bytes = idx(LABEL_MAGIC, &[1], &[3]);
        match parse_idx_kind(&bytes, IdxKind::Images) {
            Err(Error::Magic { expected, actual }) => {
                assert_eq!(expected, 2051);
                assert_eq!(actual, 2049);
            }
            other => panic!("expected magic error, got {other:?}"),
        }
        assert!(matches!(
            parse_idx(&idx(0x0000_0d01, &[1], &[0; 8])),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn gzip_is_detected() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let raw = idx(LABEL_MAGIC, &[3], &[1, 2, 3]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&raw).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(maybe_gunzip(gz).unwrap(), raw);
        assert_eq!(maybe_gunzip(raw.clone()).unwrap(), raw);
    }

    #[test]
    fn pixel_normalization() {
        assert_eq!(normalize_pixel(0), 0.0);
        assert_eq!(normalize_pixel(255), 1.0);
        assert!((normalize_pixel(51) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn one_hot_vectors() {
        assert_eq!(one_hot(0).unwrap().data(), &[1.0, 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
        let nine = one_hot(9).unwrap();
        assert_eq!(nine.data()[9], 1.0);
        assert_eq!(nine.sum(), 1.0);
        assert!(matches!(one_hot(10), Err(Error::Domain(_))));
    }

    #[test]
    fn batch_plan_sizes() {
        let plan = batch_plan(10_000, 100, None).unwrap();
        assert_eq!(plan.len(), 100);
        assert!(plan.iter().all(|b| b.len() == 100));

        let plan = batch_plan(7, 3, None).unwrap();
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 1]);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());

        assert!(batch_plan(0, 3, None).is_err());
        assert!(batch_plan(3, 0, None).is_err());
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let pa = batch_plan(60_000, 100, Some(&mut a)).unwrap();
        let pb = batch_plan(60_000, 100, Some(&mut b)).unwrap();
        assert_eq!(pa, pb);
        let mut c = ChaCha8Rng::seed_from_u64(43);
        assert_ne!(pa, batch_plan(60_000, 100, Some(&mut c)).unwrap());
    }

    #[test]
    fn dataset_from_idx() {
        let images = idx(IMAGE_MAGIC, &[2, 2, 2], &[0, 255, 51, 0, 1, 2, 3, 4]);
        let labels = idx(LABEL_MAGIC, &[2], &[3, 9]);
        let ds = Dataset::from_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images().data()[1], 1.0);
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.targets().row(0)[3], 1.0);
        assert_eq!(ds.targets().row(1)[9], 1.0);

        let bad = idx(LABEL_MAGIC, &[2], &[3, 10]);
        assert!(matches!(Dataset::from_idx(&images, &bad), Err(Error::Domain(_))));
        let short = idx(LABEL_MAGIC, &[1], &[3]);
        assert!(Dataset::from_idx(&images, &short).is_err());
    }
}
