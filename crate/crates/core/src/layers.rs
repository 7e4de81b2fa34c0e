//! Layer forward and backward passes.
//!
//! Every layer takes and returns batched tensors (`[N, C, H, W]` for image
//! layers, `[N, D]` after flattening). A training-mode forward caches what the
//! matching backward needs; an eval-mode forward clears that cache, so a
//! backward without a preceding training forward is a state error.
//!
//! Backward passes are exact adjoints of their forwards: they receive
//! `dC/d(output)` and return `dC/d(input)` plus parameter gradients, with no
//! batch averaging of their own.

use std::hash::{Hash, Hasher};

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{col2im_add, gemm, im2col_into, ConvGeometry, Layout, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Description of one layer, independent of its learned parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Valid-padding, stride-1 cross-correlation.
    Conv2d { filters: usize, kernel: (usize, usize) },
    /// Non-overlapping `size x size` max pooling; leftover rows/cols are dropped.
    MaxPool { size: usize },
    Flatten,
    Dense { units: usize, activation: Activation },
    /// Inverted dropout with drop probability `rate`.
    Dropout { rate: f64 },
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn conv(filters: usize, k: usize) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel: (k, k),
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d { filters, kernel } => filters >= 1 && kernel.0 >= 1 && kernel.1 >= 1,
            LayerSpec::MaxPool { size } => size >= 1,
            LayerSpec::Dense { units, .. } => units >= 1,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::Flatten | LayerSpec::Relu | LayerSpec::Softmax => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid layer {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Forward mode. Training draws dropout masks from the run generator.
pub enum Pass<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    HeUniform,
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
}

impl Init {
    fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
            Init::GlorotUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }

    fn sample(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let b = self.bound(fan_in, fan_out);
        let dist = Uniform::new_inclusive(-b, b);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| dist.sample(rng)).collect())
    }
}

/// Result of a backward pass. Parameterless layers leave `weights` and `bias` empty.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub input: Tensor,
}

impl Gradients {
    fn input_only(input: Tensor) -> Self {
        Self {
            weights: None,
            bias: None,
            input,
        }
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::State(format!(
        "{layer} backward called without a cached training-mode forward"
    ))
}

fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

fn batched(n: usize, sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(sample.len() + 1);
    s.push(n);
    s.extend_from_slice(sample);
    s
}

fn batch_size(input: &Tensor, sample: &[usize], what: &str) -> Result<usize> {
    let n = *input.shape().first().unwrap_or(&0);
    expect_shape(what, input.shape(), &batched(n, sample))?;
    Ok(n)
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug)]
pub struct Conv2d {
    geom: ConvGeometry,
    filters: usize,
    /// `[F, C, kh, kw]`
    pub weights: Tensor,
    /// `[F]`
    pub bias: Tensor,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(input_shape: &[usize], filters: usize, kernel: (usize, usize), weights: Tensor, bias: Tensor) -> Result<Self> {
        let geom = ConvGeometry::new(input_shape, kernel.0, kernel.1, 1)?;
        expect_shape(
            "conv weights",
            weights.shape(),
            &[filters, geom.channels, kernel.0, kernel.1],
        )?;
        expect_shape("conv bias", bias.shape(), &[filters])?;
        Ok(Self {
            geom,
            filters,
            weights,
            bias,
            input: None,
        })
    }

    fn init(input_shape: &[usize], filters: usize, kernel: (usize, usize), init: Init, rng: &mut ChaCha8Rng) -> Result<Self> {
        let geom = ConvGeometry::new(input_shape, kernel.0, kernel.1, 1)?;
        let fan_in = geom.patch_len();
        let fan_out = filters * kernel.0 * kernel.1;
        let weights = init.sample(&[filters, geom.channels, kernel.0, kernel.1], fan_in, fan_out, rng)?;
        Self::new(input_shape, filters, kernel, weights, Tensor::zeros(&[filters])?)
    }

    fn in_shape(&self) -> [usize; 3] {
        [self.geom.channels, self.geom.height, self.geom.width]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.filters, self.geom.out_h, self.geom.out_w]
    }

    pub fn forward(&mut self, input: &Tensor, pass: &Pass) -> Result<Tensor> {
        let n = batch_size(input, &self.in_shape(), "conv2d input")?;
        let g = self.geom;
        let (k, p, f) = (g.patch_len(), g.positions(), self.filters);
        let in_len = g.channels * g.height * g.width;
        let mut out = vec![0.0; n * f * p];
        let mut cols = vec![0.0; k * p];
        for (sample, out_n) in input.data().chunks(in_len).zip(out.chunks_mut(f * p)) {
            im2col_into(sample, &g, &mut cols);
            gemm(f, k, p, self.weights.data(), Layout::Normal, &cols, Layout::Normal, out_n, false);
            for (plane, &b) in out_n.chunks_mut(p).zip(self.bias.data()) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        self.input = pass.is_train().then(|| input.clone());
        Tensor::from_vec(&[n, f, g.out_h, g.out_w], out)
    }

    /// `dW[f,c]` correlates input channel `c` with `dOut[f]`; `dB[f]` sums
    /// `dOut[f]`; `dInput` is the full correlation of `dOut` with the
    /// 180°-rotated filters, computed as `col2im(Wᵀ · dOut)`.
    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        let input = self.input.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let g = self.geom;
        let n = input.shape()[0];
        let (k, p, f) = (g.patch_len(), g.positions(), self.filters);
        expect_shape("conv2d dOut", d_out.shape(), &[n, f, g.out_h, g.out_w])?;
        let in_len = g.channels * g.height * g.width;

        let mut d_w = vec![0.0; f * k];
        let mut d_b = vec![0.0; f];
        let mut d_in = vec![0.0; n * in_len];
        let mut cols = vec![0.0; k * p];
        let mut d_cols = vec![0.0; k * p];
        for ((sample, d_out_n), d_in_n) in input
            .data()
            .chunks(in_len)
            .zip(d_out.data().chunks(f * p))
            .zip(d_in.chunks_mut(in_len))
        {
            im2col_into(sample, &g, &mut cols);
            gemm(f, p, k, d_out_n, Layout::Normal, &cols, Layout::Transposed, &mut d_w, true);
            for (db, plane) in d_b.iter_mut().zip(d_out_n.chunks(p)) {
                *db += plane.iter().sum::<f64>();
            }
            gemm(k, f, p, self.weights.data(), Layout::Transposed, d_out_n, Layout::Normal, &mut d_cols, false);
            col2im_add(&d_cols, &g, d_in_n);
        }
        Ok(Gradients {
            weights: Some(Tensor::from_vec(self.weights.shape(), d_w)?),
            bias: Some(Tensor::from_vec(&[f], d_b)?),
            input: Tensor::from_vec(input.shape(), d_in)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Max pooling

#[derive(Clone, Debug)]
pub struct MaxPool {
    size: usize,
    in_shape: [usize; 3],
    /// For every output element, the flat input index of its window maximum.
    argmax: Option<Vec<usize>>,
}

impl MaxPool {
    pub fn new(input_shape: &[usize], size: usize) -> Result<Self> {
        let &[c, h, w] = input_shape else {
            return Err(Error::shape(format!("maxpool expects [C, H, W], got {input_shape:?}")));
        };
        if size == 0 || size > h || size > w {
            return Err(Error::shape(format!("pool size {size} does not fit {h}x{w}")));
        }
        Ok(Self {
            size,
            in_shape: [c, h, w],
            argmax: None,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.in_shape;
        [c, h / self.size, w / self.size]
    }

    pub fn forward(&mut self, input: &Tensor, pass: &Pass) -> Result<Tensor> {
        let n = batch_size(input, &self.in_shape, "maxpool input")?;
        let [c, h, w] = self.in_shape;
        let [_, oh, ow] = self.output_shape();
        let p = self.size;
        let x = input.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * p * w + oj * p;
                    for di in 0..p {
                        for dj in 0..p {
                            let idx = base + (oi * p + di) * w + oj * p + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
        self.argmax = pass.is_train().then_some(arg);
        Tensor::from_vec(&[n, c, oh, ow], out)
    }

    /// Routes each upstream gradient to the cached window maximum.
    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        let arg = self.argmax.as_ref().ok_or_else(|| missing_cache("maxpool"))?;
        let [_, oh, ow] = self.output_shape();
        let n = arg.len() / (self.in_shape[0] * oh * ow);
        expect_shape("maxpool dOut", d_out.shape(), &batched(n, &self.output_shape()))?;
        let mut d_in = vec![0.0; n * self.in_shape.iter().product::<usize>()];
        for (&i, &g) in arg.iter().zip(d_out.data()) {
            d_in[i] += g;
        }
        Ok(Gradients::input_only(Tensor::from_vec(
            &batched(n, &self.in_shape),
            d_in,
        )?))
    }
}

// ---------------------------------------------------------------------------
// Flatten

#[derive(Clone, Debug)]
pub struct Flatten {
    in_shape: Vec<usize>,
    batch: Option<usize>,
}

impl Flatten {
    pub fn new(input_shape: &[usize]) -> Self {
        Self {
            in_shape: input_shape.to_vec(),
            batch: None,
        }
    }

    pub fn width(&self) -> usize {
        self.in_shape.iter().product()
    }

    pub fn forward(&mut self, input: &Tensor, pass: &Pass) -> Result<Tensor> {
        let n = batch_size(input, &self.in_shape, "flatten input")?;
        self.batch = pass.is_train().then_some(n);
        input.clone().reshape(&[n, self.width()])
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        let n = self.batch.ok_or_else(|| missing_cache("flatten"))?;
        expect_shape("flatten dOut", d_out.shape(), &[n, self.width()])?;
        Ok(Gradients::input_only(
            d_out.clone().reshape(&batched(n, &self.in_shape))?,
        ))
    }
}

// ---------------------------------------------------------------------------
// Fully connected

#[derive(Clone, Debug)]
pub struct Dense {
    /// `[out, in]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
    cache: Option<DenseCache>,
}

#[derive(Clone, Debug)]
struct DenseCache {
    input: Tensor,
    z: Tensor,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let &[out, _] = weights.shape() else {
            return Err(Error::shape(format!(
                "dense weights must be [out, in], got {:?}",
                weights.shape()
            )));
        };
        expect_shape("dense bias", bias.shape(), &[out])?;
        Ok(Self {
            weights,
            bias,
            activation,
            cache: None,
        })
    }

    fn init(input: usize, units: usize, activation: Activation, init: Init, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weights = init.sample(&[units, input], input, units, rng)?;
        Self::new(weights, Tensor::zeros(&[units])?, activation)
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn units(&self) -> usize {
        self.weights.shape()[0]
    }

    /// `z = a_prev · wᵀ + b`, `a = f(z)`; returns `(z, a)`.
    pub fn forward_full(&mut self, input: &Tensor, pass: &Pass) -> Result<(Tensor, Tensor)> {
        let n = batch_size(input, &[self.inputs()], "dense input")?;
        let (i, o) = (self.inputs(), self.units());
        let mut z = vec![0.0; n * o];
        for row in z.chunks_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(n, i, o, input.data(), Layout::Normal, self.weights.data(), Layout::Transposed, &mut z, true);
        let z = Tensor::from_vec(&[n, o], z)?;
        let a = match self.activation {
            Activation::Identity => z.clone(),
            Activation::Relu => relu(&z),
        };
        self.cache = pass.is_train().then(|| DenseCache {
            input: input.clone(),
            z: z.clone(),
        });
        Ok((z, a))
    }

    pub fn forward(&mut self, input: &Tensor, pass: &Pass) -> Result<Tensor> {
        self.forward_full(input, pass).map(|(_, a)| a)
    }

    /// `δ = dOut ⊙ f'(z)`; `dW = δᵀ · a_prev`; `dB` = column sums of `δ`; `dInput = δ · w`.
    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("dense"))?;
        expect_shape("dense dOut", d_out.shape(), cache.z.shape())?;
        let delta = match self.activation {
            Activation::Identity => d_out.clone(),
            Activation::Relu => relu_backward(&cache.z, d_out)?,
        };
        let n = delta.shape()[0];
        let (i, o) = (self.inputs(), self.units());
        let mut d_w = vec![0.0; o * i];
        gemm(o, n, i, delta.data(), Layout::Transposed, cache.input.data(), Layout::Normal, &mut d_w, false);
        let mut d_b = vec![0.0; o];
        for row in delta.data().chunks(o) {
            d_b.iter_mut().zip(row).for_each(|(b, d)| *b += d);
        }
        let mut d_in = vec![0.0; n * i];
        gemm(n, o, i, delta.data(), Layout::Normal, self.weights.data(), Layout::Normal, &mut d_in, false);
        Ok(Gradients {
            weights: Some(Tensor::from_vec(&[o, i], d_w)?),
            bias: Some(Tensor::from_vec(&[o], d_b)?),
            input: Tensor::from_vec(&[n, i], d_in)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Elementwise activations

pub fn relu(z: &Tensor) -> Tensor {
    z.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `d_out` where `z > 0`; the subgradient at exactly zero is 0.
pub fn relu_backward(z: &Tensor, d_out: &Tensor) -> Result<Tensor> {
    z.zip_with(d_out, "relu_backward", |z, d| if z > 0.0 { d } else { 0.0 })
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    z: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, input: &Tensor, pass: &Pass) -> Result<Tensor> {
        self.z = pass.is_train().then(|| input.clone());
        Ok(relu(input))
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        let z = self.z.as_ref().ok_or_else(|| missing_cache("relu"))?;
        Ok(Gradients::input_only(relu_backward(z, d_out)?))
    }
}

/// Row-wise softmax of a `[N, K]` (or `[K]`) tensor, stabilized by
/// subtracting each row's maximum.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    let k = *z.shape().last().expect("tensors have rank >= 1");
    if z.rank() > 2 {
        return Err(Error::shape(format!("softmax expects [N, K], got {:?}", z.shape())));
    }
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::from_vec(z.shape(), out)
}

#[derive(Clone, Debug, Default)]
pub struct Softmax {
    output: Option<Tensor>,
}

impl Softmax {
    pub fn forward(&mut self, input: &Tensor, pass: &Pass) -> Result<Tensor> {
        let p = softmax(input)?;
        self.output = pass.is_train().then(|| p.clone());
        Ok(p)
    }

    /// Jacobian-vector product `dz = p ⊙ (dOut − ⟨dOut, p⟩)` per row.
    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        let p = self.output.as_ref().ok_or_else(|| missing_cache("softmax"))?;
        expect_shape("softmax dOut", d_out.shape(), p.shape())?;
        let k = p.shape()[p.rank() - 1];
        let mut d_in = Vec::with_capacity(p.len());
        for (pr, dr) in p.data().chunks(k).zip(d_out.data().chunks(k)) {
            let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
            d_in.extend(pr.iter().zip(dr).map(|(pi, di)| pi * (di - inner)));
        }
        Ok(Gradients::input_only(Tensor::from_vec(p.shape(), d_in)?))
    }
}

// ---------------------------------------------------------------------------
// Dropout

#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    /// Per-element multiplier: 0 for dropped, `1/(1-rate)` for kept.
    mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, mask: None })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward(&mut self, input: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        match pass {
            Pass::Eval => {
                self.mask = None;
                Ok(input.clone())
            }
            Pass::Train(rng) => {
                let keep = 1.0 / (1.0 - self.rate);
                let draws: Vec<f64> = (0..input.len())
                    .map(|_| if rng.gen::<f64>() < self.rate { 0.0 } else { keep })
                    .collect();
                let mask = Tensor::from_vec(input.shape(), draws)?;
                let out = input.mul(&mask)?;
                self.mask = Some(mask);
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache("dropout"))?;
        Ok(Gradients::input_only(d_out.mul(mask)?))
    }
}

// ---------------------------------------------------------------------------
// Layer enum

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool(MaxPool),
    Flatten(Flatten),
    Dense(Dense),
    Dropout(Dropout),
    Relu(Relu),
    Softmax(Softmax),
}

impl Layer {
    /// Builds a freshly initialized layer for per-sample `input_shape`.
    pub fn build(spec: &LayerSpec, input_shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Conv2d { filters, kernel } => {
                Layer::Conv2d(Conv2d::init(input_shape, filters, kernel, init, rng)?)
            }
            LayerSpec::MaxPool { size } => Layer::MaxPool(MaxPool::new(input_shape, size)?),
            LayerSpec::Flatten => Layer::Flatten(Flatten::new(input_shape)),
            LayerSpec::Dense { units, activation } => {
                let &[inputs] = input_shape else {
                    return Err(Error::shape(format!(
                        "dense layer needs a flat input, got {input_shape:?}"
                    )));
                };
                Layer::Dense(Dense::init(inputs, units, activation, init, rng)?)
            }
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)?),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::Softmax => {
                if input_shape.len() != 1 {
                    return Err(Error::shape(format!(
                        "softmax needs a flat input, got {input_shape:?}"
                    )));
                }
                Layer::Softmax(Softmax::default())
            }
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                filters: c.filters,
                kernel: (c.geom.kh, c.geom.kw),
            },
            Layer::MaxPool(p) => LayerSpec::MaxPool { size: p.size },
            Layer::Flatten(_) => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense {
                units: d.units(),
                activation: d.activation,
            },
            Layer::Dropout(d) => LayerSpec::Dropout { rate: d.rate },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Softmax(_) => LayerSpec::Softmax,
        }
    }

    /// Per-sample output shape given per-sample `input_shape`.
    pub fn output_shape(&self, input_shape: &[usize]) -> Vec<usize> {
        match self {
            Layer::Conv2d(c) => c.output_shape().to_vec(),
            Layer::MaxPool(p) => p.output_shape().to_vec(),
            Layer::Flatten(f) => vec![f.width()],
            Layer::Dense(d) => vec![d.units()],
            Layer::Dropout(_) | Layer::Relu(_) | Layer::Softmax(_) => input_shape.to_vec(),
        }
    }

    pub fn forward(&mut self, input: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.forward(input, pass),
            Layer::MaxPool(l) => l.forward(input, pass),
            Layer::Flatten(l) => l.forward(input, pass),
            Layer::Dense(l) => l.forward(input, pass),
            Layer::Dropout(l) => l.forward(input, pass),
            Layer::Relu(l) => l.forward(input, pass),
            Layer::Softmax(l) => l.forward(input, pass),
        }
    }

    pub fn backward(&mut self, d_out: &Tensor) -> Result<Gradients> {
        match self {
            Layer::Conv2d(l) => l.backward(d_out),
            Layer::MaxPool(l) => l.backward(d_out),
            Layer::Flatten(l) => l.backward(d_out),
            Layer::Dense(l) => l.backward(d_out),
            Layer::Dropout(l) => l.backward(d_out),
            Layer::Relu(l) => l.backward(d_out),
            Layer::Softmax(l) => l.backward(d_out),
        }
    }

    /// Learned tensors, weights before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weights, &c.bias],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weights, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Feeds the discrete choices of the last training forward (ReLU signs,
    /// pooling winners) into `state`. Two forwards with equal fingerprints
    /// lie on the same smooth piece of the network function.
    pub fn hash_branches<H: Hasher>(&self, state: &mut H) {
        let signs = |z: &Tensor, state: &mut H| {
            for v in z.data() {
                (*v > 0.0).hash(state);
            }
        };
        match self {
            Layer::Relu(Relu { z: Some(z) }) => signs(z, state),
            Layer::Dense(Dense {
                activation: Activation::Relu,
                cache: Some(c),
                ..
            }) => signs(&c.z, state),
            Layer::MaxPool(MaxPool { argmax: Some(a), .. }) => a.hash(state),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn train_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    #[test]
    fn conv_hand_example() {
        let w = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut conv = Conv2d::new(&[1, 2, 2], 1, (2, 2), w, t(&[1], &[0.0])).unwrap();
        let out = conv.forward(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), &Pass::Eval).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv_mnist_geometry() {
        let mut rng = train_rng();
        let mut conv = Conv2d::init(&[1, 28, 28], 32, (3, 3), Init::HeUniform, &mut rng).unwrap();
        let out = conv.forward(&Tensor::zeros(&[1, 1, 28, 28]).unwrap(), &Pass::Eval).unwrap();
        assert_eq!(out.shape(), &[1, 32, 26, 26]);
    }

    #[test]
    fn conv_backward_needs_cache() {
        let mut rng = train_rng();
        let mut conv = Conv2d::init(&[1, 4, 4], 2, (3, 3), Init::HeUniform, &mut rng).unwrap();
        let x = Tensor::new(&[1, 1, 4, 4], 0.5).unwrap();
        let d = Tensor::zeros(&[1, 2, 2, 2]).unwrap();
        assert!(matches!(conv.backward(&d), Err(Error::State(_))));
        conv.forward(&x, &Pass::Eval).unwrap();
        assert!(matches!(conv.backward(&d), Err(Error::State(_))));
        conv.forward(&x, &Pass::Train(&mut rng)).unwrap();
        let g = conv.backward(&d).unwrap();
        assert!(g.weights.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_single_pixel_upstream_gives_top_left_patch() {
        let mut rng = train_rng();
        let mut conv = Conv2d::init(&[2, 4, 4], 1, (2, 2), Init::HeUniform, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(f64::from).collect()).unwrap();
        conv.forward(&x, &Pass::Train(&mut rng)).unwrap();
        let mut d = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        d.data_mut()[0] = 1.0;
        let g = conv.backward(&d).unwrap();
        assert_eq!(g.weights.unwrap().data(), &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
        assert_eq!(g.bias.unwrap().data(), &[1.0]);
    }

    #[test]
    fn maxpool_examples() {
        let mut pool = MaxPool::new(&[1, 2, 2], 2).unwrap();
        let mut rng = train_rng();
        let out = pool
            .forward(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), &Pass::Train(&mut rng))
            .unwrap();
        assert_eq!(out.data(), &[4.0]);
        let g = pool.backward(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.input.data(), &[0.0, 0.0, 0.0, 1.0]);

        pool.forward(&Tensor::new(&[1, 1, 2, 2], 3.0).unwrap(), &Pass::Train(&mut rng))
            .unwrap();
        let g = pool.backward(&t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.input.data(), &[1.0, 0.0, 0.0, 0.0]);

        assert_eq!(MaxPool::new(&[32, 26, 26], 2).unwrap().output_shape(), [32, 13, 13]);
        assert_eq!(MaxPool::new(&[64, 11, 11], 2).unwrap().output_shape(), [64, 5, 5]);
    }

    #[test]
    fn maxpool_drops_remainder() {
        let mut pool = MaxPool::new(&[1, 3, 3], 2).unwrap();
        let x = t(&[1, 1, 3, 3], &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        assert_eq!(pool.forward(&x, &Pass::Eval).unwrap().data(), &[4.0]);
    }

    #[test]
    fn relu_examples() {
        let z = Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&z).data(), &[0.0, 0.0, 2.0]);
        let d = Tensor::vector(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(relu_backward(&z, &d).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::zeros(&[10]).unwrap()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));

        let p = softmax(&Tensor::vector(&[1000.0, 0.0]).unwrap()).unwrap();
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(p.data()[1] >= 0.0 && p.data()[1] < 1e-300);
    }

    #[test]
    fn dense_examples() {
        let mut id = Dense::new(
            Tensor::identity(2).unwrap(),
            Tensor::zeros(&[2]).unwrap(),
            Activation::Identity,
        )
        .unwrap();
        let x = t(&[1, 2], &[1.0, 2.0]);
        assert_eq!(id.forward(&x, &Pass::Eval).unwrap(), x);

        let mut d = Dense::new(
            t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]),
            t(&[2], &[1.0, 0.0]),
            Activation::Identity,
        )
        .unwrap();
        let mut rng = train_rng();
        let (z, _) = d.forward_full(&x, &Pass::Train(&mut rng)).unwrap();
        assert_eq!(z.data(), &[4.0, 2.0]);

        d.forward(&t(&[1, 2], &[3.0, 4.0]), &Pass::Train(&mut rng)).unwrap();
        let g = d.backward(&t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert_eq!(g.weights.unwrap().data(), &[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(g.bias.unwrap().data(), &[1.0, 0.0]);

        let g = d.backward(&Tensor::zeros(&[1, 2]).unwrap()).unwrap();
        assert!(g.weights.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_geometry() {
        let mut f = Flatten::new(&[64, 12, 12]);
        let mut rng = train_rng();
        let out = f.forward(&Tensor::zeros(&[1, 64, 12, 12]).unwrap(), &Pass::Train(&mut rng)).unwrap();
        assert_eq!(out.shape(), &[1, 9216]);
        assert_eq!(Flatten::new(&[64, 5, 5]).width(), 1600);
        let back = f.backward(&out).unwrap();
        assert_eq!(back.input.shape(), &[1, 64, 12, 12]);
    }

    #[test]
    fn dropout_identities() {
        let x = Tensor::from_vec(&[2, 5], (0..10).map(f64::from).collect()).unwrap();
        let mut d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(&x, &mut Pass::Eval).unwrap(), x);
        let mut rng = train_rng();
        let mut d0 = Dropout::new(0.0).unwrap();
        assert_eq!(d0.forward(&x, &mut Pass::Train(&mut rng)).unwrap(), x);
        assert!(matches!(Dropout::new(1.0), Err(Error::Domain(_))));
        assert!(Dropout::new(-0.1).is_err());
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let x = Tensor::new(&[1, 1000], 1.0).unwrap();
        let mut d = Dropout::new(0.25).unwrap();
        let mut rng = train_rng();
        let y = d.forward(&x, &mut Pass::Train(&mut rng)).unwrap();
        let g = d.backward(&x).unwrap();
        assert_eq!(g.input, y);
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn invalid_specs() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::conv(0, 3).validate().is_err());
        assert!(LayerSpec::dense(0, Activation::Relu).validate().is_err());
        assert!(LayerSpec::MaxPool { size: 0 }.validate().is_err());
    }
}
