mod common;

use std::fs;
use std::io::Write;
use std::path::Path;

use common::{data_dir, load_mnist};
use digitnet::experiments::{build_case, run_case, CaseWidths};
use digitnet::mnist::{locate, parse_idx, read_idx_file, CANONICAL_FILES, IMAGE_MAGIC, LABEL_MAGIC};
use digitnet::training::evaluate;
use digitnet::{Error, LossKind, Mnist, TrainConfig};
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

/// Writes a tiny split: `n` 28x28 images whose pixels are `label * 25`.
fn write_split(dir: &Path, images: &str, labels: &str, n: u32, gz: bool) {
    let lbl: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let px: Vec<u8> = lbl.iter().flat_map(|&l| std::iter::repeat_n(l * 25, 784)).collect();
    let files = [
        (images, idx(IMAGE_MAGIC, &[n, 28, 28], &px)),
        (labels, idx(LABEL_MAGIC, &[n], &lbl)),
    ];
    for (name, bytes) in files {
        if gz {
            fs::write(dir.join(format!("{name}.gz")), gzip(&bytes)).unwrap();
        } else {
            fs::write(dir.join(name), bytes).unwrap();
        }
    }
}

#[test]
fn loads_raw_and_gzipped_files() {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 12, true);
    write_split(dir.path(), "t10k-images.idx3-ubyte", "t10k-labels.idx1-ubyte", 5, false);
    let mnist = Mnist::load(dir.path()).unwrap();
    assert_eq!(mnist.train.len(), 12);
    assert_eq!(mnist.test.len(), 5);
    assert_eq!(mnist.train.sample_shape(), &[1, 28, 28]);
    assert_eq!(mnist.train.labels()[..3], [0, 1, 2]);
    assert!((mnist.train.images().at(&[3, 0, 10, 10]) - 75.0 / 255.0).abs() < 1e-15);
    assert_eq!(mnist.test.targets().row(4)[4], 1.0);
}

#[test]
fn missing_and_damaged_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = Mnist::load(dir.path()).unwrap_err();
    assert!(matches!(err.root(), Error::Io(_)), "{err}");

    write_split(dir.path(), "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 4, false);
    write_split(dir.path(), "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 4, false);
    let labels = dir.path().join("t10k-labels-idx1-ubyte");
    let mut bytes = fs::read(&labels).unwrap();
    bytes.truncate(bytes.len() - 1);
    fs::write(&labels, &bytes).unwrap();
    let err = Mnist::load(dir.path()).unwrap_err();
    assert!(matches!(err.root(), Error::Truncated { .. }), "{err}");

    bytes[3] = 0x03;
    bytes.push(0);
    fs::write(&labels, &bytes).unwrap();
    assert!(matches!(Mnist::load(dir.path()).unwrap_err().root(), Error::Magic { .. }));
}

#[test]
fn label_out_of_range_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    write_split(dir.path(), "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 3, false);
    write_split(dir.path(), "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 3, false);
    fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx(LABEL_MAGIC, &[3], &[1, 10, 2])).unwrap();
    assert!(matches!(Mnist::load(dir.path()).unwrap_err().root(), Error::Domain(_)));
}

#[test]
fn canonical_headers() {
    let dir = data_dir();
    for file in &CANONICAL_FILES {
        let path = locate(&dir, file.name)
            .unwrap_or_else(|| panic!("{} missing from {}", file.name, dir.display()));
        let bytes = read_idx_file(&path).unwrap();
        let (header, payload) = parse_idx(&bytes).unwrap();
        assert_eq!(header.magic, file.kind.magic());
        assert_eq!(header.dims[0], file.count);
        if header.magic == IMAGE_MAGIC {
            assert_eq!(&header.dims[1..], &[28, 28]);
        }
        assert_eq!(payload.len(), header.payload_len());
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let mnist = load_mnist();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = build_case(2, &CaseWidths::default(), &mut rng).unwrap();
    let (acc, _) = evaluate(&mut model, &mnist.test, LossKind::CrossEntropy).unwrap();
    assert!((0.03..=0.25).contains(&acc), "untrained accuracy {acc}");
}

#[test]
fn zero_epoch_run_reports_initial_loss() {
    let mnist = load_mnist();
    let test = mnist.test.head(1000).unwrap();
    let config = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let run = run_case(3, &config, &CaseWidths::default(), &mnist.train.head(10).unwrap(), &test, |_| {}).unwrap();
    assert!(run.metrics.is_empty());
    // near-uniform predictions from a fresh network
    assert!((run.test_loss - 10f64.ln()).abs() < 0.5, "initial loss {}", run.test_loss);
}
