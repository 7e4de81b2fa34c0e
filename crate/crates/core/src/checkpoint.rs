//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`, floats as raw little-endian `f64`
//! bits, so values round-trip exactly):
//!
//! ```text
//! "DGNTCKPT" version
//! input_rank dims...
//! layer_count
//! per layer: tag:u8 hyperparameters... tensor_count (rank dims... values...)*
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Activation, Conv2d, Dense, Dropout, Flatten, Layer, LayerSpec, MaxPool};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DGNTCKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("extent fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_bits(u64::from_le_bytes(b.try_into().expect("8 bytes"))))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| self.u32()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.dims()?;
        let len: usize = shape.iter().product();
        if len * 8 > self.bytes.len().saturating_sub(self.pos) {
            return Err(Error::Truncated {
                expected: self.pos + len * 8,
                actual: self.bytes.len(),
            });
        }
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(&shape, data)
    }
}

const TAG_CONV: u8 = 1;
const TAG_POOL: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_DENSE: u8 = 4;
const TAG_DROPOUT: u8 = 5;
const TAG_RELU: u8 = 6;
const TAG_SOFTMAX: u8 = 7;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION as usize);
    w.u32(model.input_shape().len());
    for &d in model.input_shape() {
        w.u32(d);
    }
    w.u32(model.layers().len());
    for layer in model.layers() {
        match layer.spec() {
            LayerSpec::Conv2d { filters, kernel } => {
                w.u8(TAG_CONV);
                w.u32(filters);
                w.u32(kernel.0);
                w.u32(kernel.1);
            }
            LayerSpec::MaxPool { size } => {
                w.u8(TAG_POOL);
                w.u32(size);
            }
            LayerSpec::Flatten => w.u8(TAG_FLATTEN),
            LayerSpec::Dense { units, activation } => {
                w.u8(TAG_DENSE);
                w.u32(units);
                w.u8(match activation {
                    Activation::Identity => 0,
                    Activation::Relu => 1,
                });
            }
            LayerSpec::Dropout { rate } => {
                w.u8(TAG_DROPOUT);
                w.f64(rate);
            }
            LayerSpec::Relu => w.u8(TAG_RELU),
            LayerSpec::Softmax => w.u8(TAG_SOFTMAX),
        }
        let params = layer.params();
        w.u32(params.len());
        for p in params {
            w.tensor(p);
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a digitnet checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let input_shape = r.dims()?;
    let count = r.u32()?;
    let mut shape = input_shape.clone();
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        let layer = match tag {
            TAG_CONV => {
                let filters = r.u32()?;
                let kernel = (r.u32()?, r.u32()?);
                let (w, b) = read_params(&mut r)?;
                Layer::Conv2d(Conv2d::new(&shape, filters, kernel, w, b)?)
            }
            TAG_POOL => {
                let size = r.u32()?;
                no_params(&mut r)?;
                Layer::MaxPool(MaxPool::new(&shape, size)?)
            }
            TAG_FLATTEN => {
                no_params(&mut r)?;
                Layer::Flatten(Flatten::new(&shape))
            }
            TAG_DENSE => {
                let units = r.u32()?;
                let activation = match r.u8()? {
                    0 => Activation::Identity,
                    1 => Activation::Relu,
                    other => return Err(Error::Format(format!("unknown activation {other}"))),
                };
                let (w, b) = read_params(&mut r)?;
                if w.shape()[0] != units {
                    return Err(Error::Format(format!(
                        "dense layer declares {units} units but stores {:?}",
                        w.shape()
                    )));
                }
                Layer::Dense(Dense::new(w, b, activation)?)
            }
            TAG_DROPOUT => {
                let rate = r.f64()?;
                no_params(&mut r)?;
                Layer::Dropout(Dropout::new(rate)?)
            }
            TAG_RELU => {
                no_params(&mut r)?;
                Layer::Relu(Default::default())
            }
            TAG_SOFTMAX => {
                no_params(&mut r)?;
                Layer::Softmax(Default::default())
            }
            other => return Err(Error::Format(format!("unknown layer tag {other}"))),
        };
        shape = layer.output_shape(&shape);
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Model::from_layers(&input_shape, layers)
}

fn read_params(r: &mut Reader) -> Result<(Tensor, Tensor)> {
    let n = r.u32()?;
    if n != 2 {
        return Err(Error::Format(format!("expected 2 parameter tensors, found {n}")));
    }
    Ok((r.tensor()?, r.tensor()?))
}

fn no_params(r: &mut Reader) -> Result<()> {
    match r.u32()? {
        0 => Ok(()),
        n => Err(Error::Format(format!("parameterless layer carries {n} tensors"))),
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::from(e).in_file(path))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}
