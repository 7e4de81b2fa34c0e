//! An ordered stack of layers with learned parameters.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Activation, Init, Layer, LayerSpec, Pass};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Layers whose output feeds a ReLU get He-uniform weights, everything else
/// (in practice the softmax output layer) Glorot-uniform.
fn init_for(specs: &[LayerSpec], i: usize) -> Init {
    let relu_next = matches!(specs.get(i + 1), Some(LayerSpec::Relu));
    let fused = matches!(
        specs[i],
        LayerSpec::Dense {
            activation: Activation::Relu,
            ..
        }
    );
    if relu_next || fused {
        Init::HeUniform
    } else {
        Init::GlorotUniform
    }
}

impl Model {
    /// Builds and initializes `specs` for per-sample input `input_shape`.
    /// Parameters are drawn from `rng` in layer order.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::build(spec, &shape, init_for(specs, i), rng)?;
            shape = layer.output_shape(&shape);
            layers.push(layer);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    /// Assembles already-built layers, checking that shapes chain.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            // Building a scratch copy validates the spec against the running shape.
            let mut rng = rand::SeedableRng::seed_from_u64(0);
            let probe = Layer::build(&layer.spec(), &shape, Init::GlorotUniform, &mut rng)?;
            let (a, b) = (probe.params(), layer.params());
            if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.shape() != y.shape()) {
                return Err(Error::shape(format!(
                    "{} layer parameters do not fit input {shape:?}",
                    layer.spec().name()
                )));
            }
            shape = layer.output_shape(&shape);
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Per-sample shape after each layer.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(&shape);
                shape.clone()
            })
            .collect()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes().pop().unwrap_or_else(|| self.input_shape.clone())
    }

    /// Width of the first flatten layer's output, if there is one.
    pub fn flatten_width(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Flatten(f) => Some(f.width()),
            _ => None,
        })
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax(_)))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn forward(&mut self, input: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, pass)?;
        }
        Ok(x)
    }

    /// Eval-mode forward in chunks of at most `chunk` samples.
    pub fn predict(&mut self, input: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = input.shape()[0];
        let mut out = Vec::new();
        let mut out_shape = Vec::new();
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let y = self.forward(&input.gather_rows(&idx)?, &mut Pass::Eval)?;
            out_shape = y.shape().to_vec();
            out.extend_from_slice(y.data());
        }
        out_shape[0] = n;
        Tensor::from_vec(&out_shape, out)
    }

    /// Backpropagates `delta` and returns one gradient per tensor of
    /// [`Model::params`], in the same order.
    ///
    /// With `skip_softmax`, `delta` is taken to be the gradient with respect to
    /// the logits feeding a trailing softmax layer, which is then bypassed.
    pub fn backward(&mut self, delta: &Tensor, skip_softmax: bool) -> Result<Vec<Tensor>> {
        let mut layers: &mut [Layer] = &mut self.layers;
        if skip_softmax {
            match layers.split_last_mut() {
                Some((Layer::Softmax(_), rest)) => layers = rest,
                _ => {
                    return Err(Error::State(
                        "logit gradient given but the model has no trailing softmax".into(),
                    ))
                }
            }
        }
        let mut grads = Vec::new();
        let mut d = delta.clone();
        for layer in layers.iter_mut().rev() {
            let g = layer.backward(&d)?;
            if let Some(b) = g.bias {
                grads.push(b);
            }
            if let Some(w) = g.weights {
                grads.push(w);
            }
            d = g.input;
        }
        grads.reverse();
        Ok(grads)
    }

    /// Fingerprint of the ReLU and pooling branches taken by the last training forward.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            layer.hash_branches(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(2, 3),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(4, Activation::Relu),
            LayerSpec::dense(10, Activation::Identity),
            LayerSpec::Softmax,
        ]
    }

    #[test]
    fn shapes_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::build(&[1, 8, 8], &tiny(), &mut rng).unwrap();
        assert_eq!(m.flatten_width(), Some(2 * 3 * 3));
        assert_eq!(m.output_shape(), vec![10]);
        assert_eq!(m.parameter_count(), 2 * 9 + 2 + 18 * 4 + 4 + 4 * 10 + 10);
        assert!(m.ends_in_softmax());
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::build(&[1, 8, 8], &tiny(), &mut rng).unwrap();
        let p = m.params();
        let he_conv = (6.0f64 / 9.0).sqrt();
        assert!(p[0].data().iter().all(|v| v.abs() <= he_conv));
        assert!(p[1].data().iter().all(|&v| v == 0.0));
        let glorot_out = (6.0f64 / 14.0).sqrt();
        assert!(p[4].data().iter().all(|v| v.abs() <= glorot_out));
        assert!(p[4].data().iter().any(|v| v.abs() > (6.0f64 / 4.0).sqrt() * 0.5));
    }

    #[test]
    fn gradient_order_matches_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::build(&[1, 8, 8], &tiny(), &mut rng).unwrap();
        let x = Tensor::new(&[3, 1, 8, 8], 0.3).unwrap();
        let y = m.forward(&x, &mut Pass::Train(&mut rng)).unwrap();
        let grads = m.backward(&y, true).unwrap();
        let shapes: Vec<_> = m.params().iter().map(|p| p.shape().to_vec()).collect();
        let gshapes: Vec<_> = grads.iter().map(|g| g.shape().to_vec()).collect();
        assert_eq!(shapes, gshapes);
    }

    #[test]
    fn skip_softmax_requires_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = vec![LayerSpec::Flatten, LayerSpec::dense(10, Activation::Identity)];
        let mut m = Model::build(&[1, 2, 2], &specs, &mut rng).unwrap();
        let y = m
            .forward(&Tensor::zeros(&[1, 1, 2, 2]).unwrap(), &mut Pass::Train(&mut rng))
            .unwrap();
        assert!(matches!(m.backward(&y, true), Err(Error::State(_))));
    }

    #[test]
    fn predict_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = Model::build(&[1, 8, 8], &tiny(), &mut rng).unwrap();
        let x = Tensor::from_vec(&[5, 1, 8, 8], (0..320).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let full = m.forward(&x, &mut Pass::Eval).unwrap();
        assert_eq!(m.predict(&x, 2).unwrap(), full);
    }
}
