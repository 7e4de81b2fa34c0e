//! Central finite-difference checks of the analytic backward passes.
//!
//! A coordinate is perturbed by `±step`; the scalar loss is re-evaluated with
//! the same dropout masks (the generator is re-seeded for every forward). If
//! either perturbed forward takes a different ReLU or max-pool branch than the
//! unperturbed one, the difference quotient straddles a kink and the
//! coordinate is skipped rather than compared.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::experiments::{case_specs, CaseWidths};
use crate::layers::{Activation, LayerSpec, Pass};
use crate::mnist::Dataset;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::{cost, output_delta, LossKind};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Fraction of compared coordinates that must fall under `tolerance`.
    pub required_fraction: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            required_fraction: 0.999,
            seed: 1,
        }
    }
}

/// `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Outcome for one gradient tensor.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub target: String,
    pub compared: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU or pooling tie.
    pub skipped: usize,
    pub over_tolerance: usize,
    pub max_rel_error: f64,
    /// `(flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
    tolerance: f64,
    required_fraction: f64,
}

impl CheckReport {
    fn new(target: impl Into<String>, cfg: &CheckConfig) -> Self {
        Self {
            target: target.into(),
            compared: 0,
            skipped: 0,
            over_tolerance: 0,
            max_rel_error: 0.0,
            worst: None,
            tolerance: cfg.tolerance,
            required_fraction: cfg.required_fraction,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.compared += 1;
        // NaN errors count as failures
        if err.is_nan() || err >= self.tolerance {
            self.over_tolerance += 1;
        }
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = err;
            self.worst = Some((index, analytic, numeric));
        }
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.compared == 0 {
            return 0.0;
        }
        (self.compared - self.over_tolerance) as f64 / self.compared as f64
    }

    pub fn passed(&self) -> bool {
        self.compared > 0 && self.pass_fraction() >= self.required_fraction
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:.3e} compared={} skipped={} over_tol={} [{}]",
            self.target,
            self.max_rel_error,
            self.compared,
            self.skipped,
            self.over_tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// What a finite-difference probe perturbs.
enum Slot {
    Param(usize),
    Input,
}

/// Scalar objective over a model: forward with re-seeded dropout, then loss.
struct Objective<'a> {
    model: &'a mut Model,
    input: Tensor,
    mask_seed: u64,
    loss: Loss,
}

enum Loss {
    /// `⟨r, output⟩` for a fixed random `r`: isolates one layer's adjoint.
    Projection(Tensor),
    Cost(LossKind, Tensor),
}

impl Objective<'_> {
    fn eval(&mut self) -> Result<(f64, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let out = self.model.forward(&self.input, &mut Pass::Train(&mut rng))?;
        let value = match &self.loss {
            Loss::Projection(r) => r.dot(&out)?,
            Loss::Cost(kind, y) => cost(*kind, &out, y)?,
        };
        Ok((value, self.model.branch_fingerprint()))
    }

    /// Analytic gradients: one per parameter tensor, then the input gradient.
    fn analytic(&mut self) -> Result<(Vec<Tensor>, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mask_seed);
        let out = self.model.forward(&self.input, &mut Pass::Train(&mut rng))?;
        let (delta, from_logits) = match &self.loss {
            Loss::Projection(r) => (r.clone(), false),
            Loss::Cost(kind, y) => (
                output_delta(&out, y, *kind)?,
                *kind == LossKind::CrossEntropy,
            ),
        };
        let grads = self.model.backward(&delta, from_logits)?;
        let d_input = input_gradient(self.model, &delta, from_logits)?;
        Ok((grads, d_input))
    }

    fn slot(&mut self, slot: &Slot) -> &mut Tensor {
        match *slot {
            Slot::Param(i) => self.model.params_mut().into_iter().nth(i).expect("param index"),
            Slot::Input => &mut self.input,
        }
    }

    fn probe(&mut self, slot: &Slot, analytic: &Tensor, mut report: CheckReport, cfg: &CheckConfig) -> Result<CheckReport> {
        let (_, base) = self.eval()?;
        for i in 0..analytic.len() {
            let original = self.slot(slot).data()[i];
            self.slot(slot).data_mut()[i] = original + cfg.step;
            let (plus, fp_plus) = self.eval()?;
            self.slot(slot).data_mut()[i] = original - cfg.step;
            let (minus, fp_minus) = self.eval()?;
            self.slot(slot).data_mut()[i] = original;
            if fp_plus != base || fp_minus != base {
                report.skipped += 1;
                continue;
            }
            report.record(i, analytic.data()[i], (plus - minus) / (2.0 * cfg.step));
        }
        Ok(report)
    }
}

/// Backward pass that also returns `dC/d(input)`, by re-running the layer
/// adjoints (parameter gradients are discarded).
fn input_gradient(model: &mut Model, delta: &Tensor, skip_softmax: bool) -> Result<Tensor> {
    let layers = model.layers_mut();
    let end = if skip_softmax { layers.len() - 1 } else { layers.len() };
    let mut d = delta.clone();
    for layer in layers[..end].iter_mut().rev() {
        d = layer.backward(&d)?.input;
    }
    Ok(d)
}

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let dist = Uniform::new(lo, hi);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| dist.sample(rng)).collect())
}

fn param_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let kind = layer.spec().name();
        if !layer.params().is_empty() {
            names.push(format!("layer{i}.{kind}.dW"));
            names.push(format!("layer{i}.{kind}.dB"));
        }
    }
    names
}

/// Checks every parameter of `model` (and optionally the input gradient)
/// against finite differences of the training cost on `data`.
pub fn check_model(model: &mut Model, data: &Dataset, loss: LossKind, with_input: bool, cfg: &CheckConfig) -> Result<Vec<CheckReport>> {
    let names = param_names(model);
    let mut objective = Objective {
        model,
        input: data.images().clone(),
        mask_seed: cfg.seed ^ 0x5eed,
        loss: Loss::Cost(loss, data.targets().clone()),
    };
    run(&mut objective, names, with_input, cfg)
}

fn run(objective: &mut Objective, names: Vec<String>, with_input: bool, cfg: &CheckConfig) -> Result<Vec<CheckReport>> {
    let (grads, d_input) = objective.analytic()?;
    let mut reports = Vec::new();
    for (i, (g, name)) in grads.iter().zip(names).enumerate() {
        let report = CheckReport::new(name, cfg);
        reports.push(objective.probe(&Slot::Param(i), g, report, cfg)?);
    }
    if with_input {
        let report = CheckReport::new("dInput", cfg);
        reports.push(objective.probe(&Slot::Input, &d_input, report, cfg)?);
    }
    Ok(reports)
}

/// Single-layer targets exercised by `check_layer`.
pub const LAYER_TARGETS: [&str; 7] = ["conv2d", "maxpool", "dense", "relu", "softmax", "dropout", "flatten"];

/// Checks one layer type on a small random input with loss `⟨r, layer(x)⟩`.
pub fn check_layer(name: &str, cfg: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (input_shape, spec): (Vec<usize>, LayerSpec) = match name {
        "conv2d" => (vec![2, 5, 5], LayerSpec::conv(3, 3)),
        "maxpool" => (vec![1, 6, 6], LayerSpec::MaxPool { size: 2 }),
        "dense" => (vec![7], LayerSpec::dense(5, Activation::Relu)),
        "relu" => (vec![3, 4, 4], LayerSpec::Relu),
        "softmax" => (vec![10], LayerSpec::Softmax),
        "dropout" => (vec![3, 4, 4], LayerSpec::Dropout { rate: 0.25 }),
        "flatten" => (vec![2, 3, 3], LayerSpec::Flatten),
        other => {
            return Err(Error::domain(format!(
                "unknown layer {other:?}; expected one of {LAYER_TARGETS:?}"
            )))
        }
    };
    let mut model = Model::build(&input_shape, std::slice::from_ref(&spec), &mut rng)?;
    // Random, nonzero biases so the bias gradient is not trivially tested at 0.
    for p in model.params_mut().into_iter().skip(1).step_by(2) {
        *p = uniform_tensor(p.shape(), -0.5, 0.5, &mut rng)?;
    }
    let n = 3;
    let mut batch_shape = vec![n];
    batch_shape.extend_from_slice(&input_shape);
    let input = uniform_tensor(&batch_shape, -1.0, 1.0, &mut rng)?;
    let mut out_shape = vec![n];
    out_shape.extend(model.output_shape());
    let projection = uniform_tensor(&out_shape, -1.0, 1.0, &mut rng)?;
    let names: Vec<String> = param_names(&model)
        .into_iter()
        .map(|s| s.replacen("layer0.", "", 1))
        .collect();
    let mut objective = Objective {
        model: &mut model,
        input,
        mask_seed: rng.gen(),
        loss: Loss::Projection(projection),
    };
    let mut reports = run(&mut objective, names, true, cfg)?;
    for r in &mut reports {
        r.target = format!("{name}.{}", r.target);
    }
    Ok(reports)
}

/// Channel and unit counts used for whole-case checks; small enough that
/// probing every parameter finishes in seconds.
pub const DESK_WIDTHS: CaseWidths = CaseWidths {
    conv1: 2,
    conv2: 3,
    dense: 8,
};

/// Random `n`-sample MNIST-shaped dataset.
pub fn synthetic_digits(n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let images = uniform_tensor(&[n, 1, 28, 28], 0.0, 1.0, rng)?;
    let labels = (0..n).map(|_| rng.gen_range(0..10)).collect();
    Dataset::new(images, labels)
}

/// Whole-model check of one of the six cases at desk scale.
pub fn check_case(id: usize, loss: LossKind, samples: usize, cfg: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specs = case_specs(id, &DESK_WIDTHS)?;
    let mut model = Model::build(&[1, 28, 28], &specs, &mut rng)?;
    let data = synthetic_digits(samples, &mut rng)?;
    let mut reports = check_model(&mut model, &data, loss, false, cfg)?;
    for r in &mut reports {
        r.target = format!("case{id}.{loss}.{}", r.target);
    }
    Ok(reports)
}
