#![allow(dead_code)]

use std::path::PathBuf;

use digitnet::{Mnist, Tensor};
use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;

/// Where the four IDX files live: `DIGITNET_DATA_DIR`, else `<workspace>/data/mnist`.
pub fn data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("DIGITNET_DATA_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn load_mnist() -> Mnist {
    let dir = data_dir();
    Mnist::load(&dir).unwrap_or_else(|e| {
        panic!(
            "MNIST not available in {} ({e}).\n\
             Run `cargo run --release -- data --fetch` or point DIGITNET_DATA_DIR at a directory \
             holding the four IDX files.",
            dir.display()
        )
    })
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new(-1.0, 1.0);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| dist.sample(rng)).collect()).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
