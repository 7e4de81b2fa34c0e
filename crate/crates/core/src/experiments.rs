//! The six hidden-layer arrangements, the 15-epoch protocol and its report.
//!
//! | case | stack after the input                                     |
//! |------|-----------------------------------------------------------|
//! | 1    | conv, conv, pool, dropout .25, flatten, fc128, dropout .5  |
//! | 2    | conv, pool, conv, pool, dropout .25, flatten, fc128, dropout .5 |
//! | 3    | conv, conv, pool, flatten, fc128                           |
//! | 4    | conv, pool, conv, pool, flatten, fc128                     |
//! | 5    | conv, conv, pool, flatten, fc128, dropout .5               |
//! | 6    | conv, pool, conv, pool, flatten, fc128, dropout .5         |
//!
//! Every case ends in fc10 + softmax. Convolutions are 3x3 with ReLU (32 then
//! 64 filters), pools 2x2, fc128 uses ReLU.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerSpec};
use crate::mnist::{Dataset, IMAGE_SIDE, NUM_CLASSES};
use crate::model::Model;
use crate::training::{evaluate, fit, EpochMetrics, TrainConfig};

pub const CASE_IDS: std::ops::RangeInclusive<usize> = 1..=6;

/// Filter and unit counts of the variable-width layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub dense: usize,
}

impl Default for CaseWidths {
    fn default() -> Self {
        Self {
            conv1: 32,
            conv2: 64,
            dense: 128,
        }
    }
}

/// Dropout in front of the flatten layer.
pub const FEATURE_DROPOUT: f64 = 0.25;
/// Dropout in front of the output layer.
pub const HIDDEN_DROPOUT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseDefinition {
    pub id: usize,
    pub layers: Vec<LayerSpec>,
    /// Conventional hidden-layer count for the case (descriptive only).
    pub hidden_layers: usize,
}

impl CaseDefinition {
    pub fn dropout_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dropout { .. }))
            .count()
    }
}

pub fn case_definition(id: usize, widths: &CaseWidths) -> Result<CaseDefinition> {
    let conv1 = [LayerSpec::conv(widths.conv1, 3), LayerSpec::Relu];
    let conv2 = [LayerSpec::conv(widths.conv2, 3), LayerSpec::Relu];
    let pool = LayerSpec::MaxPool { size: 2 };
    let feature_dropout = LayerSpec::Dropout {
        rate: FEATURE_DROPOUT,
    };
    let hidden_dropout = LayerSpec::Dropout {
        rate: HIDDEN_DROPOUT,
    };
    let fc1 = LayerSpec::dense(widths.dense, Activation::Relu);

    // (alternating conv/pool?, dropout after features?, dropout before output?)
    let (alternating, features, hidden, hidden_layers) = match id {
        1 => (false, true, true, 3),
        2 => (true, true, true, 4),
        3 => (false, false, false, 3),
        4 => (true, false, false, 4),
        5 => (false, false, true, 3),
        6 => (true, false, true, 4),
        other => {
            return Err(Error::domain(format!(
                "unknown case {other}; cases are numbered 1 to 6"
            )))
        }
    };

    let mut layers = Vec::new();
    layers.extend(conv1);
    if alternating {
        layers.push(pool.clone());
    }
    layers.extend(conv2);
    layers.push(pool);
    if features {
        layers.push(feature_dropout);
    }
    layers.push(LayerSpec::Flatten);
    layers.push(fc1);
    if hidden {
        layers.push(hidden_dropout);
    }
    layers.push(LayerSpec::dense(NUM_CLASSES, Activation::Identity));
    layers.push(LayerSpec::Softmax);
    Ok(CaseDefinition {
        id,
        layers,
        hidden_layers,
    })
}

pub fn case_specs(id: usize, widths: &CaseWidths) -> Result<Vec<LayerSpec>> {
    Ok(case_definition(id, widths)?.layers)
}

/// Builds case `id` for 1x28x28 input, drawing weights from `rng`.
pub fn build_case(id: usize, widths: &CaseWidths, rng: &mut ChaCha8Rng) -> Result<Model> {
    Model::build(&[1, IMAGE_SIDE, IMAGE_SIDE], &case_specs(id, widths)?, rng)
}

#[derive(Clone, Debug)]
pub struct CaseRun {
    pub case: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Cost on the test set after the final epoch.
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub model: Model,
}

/// Trains case `id` under `config`, with the test set as per-epoch validation.
///
/// All randomness (initialization, shuffling, dropout) comes from one
/// generator seeded with `config.seed`.
pub fn run_case(
    id: usize,
    config: &TrainConfig,
    widths: &CaseWidths,
    train: &Dataset,
    test: &Dataset,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<CaseRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = build_case(id, widths, &mut rng)?;
    let metrics = fit(&mut model, train, test, config, &mut rng, on_epoch)?;
    let (test_accuracy, test_loss) = evaluate(&mut model, test, config.loss)?;
    Ok(CaseRun {
        case: id,
        metrics,
        test_loss,
        test_accuracy,
        model,
    })
}

/// An extreme value of a metric series and the 1-based epoch where it first occurs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extremum {
    pub epoch: usize,
    pub value: f64,
}

/// Earliest minimum and earliest maximum of `values` (epochs numbered from 1).
pub fn extrema(values: &[f64]) -> Option<(Extremum, Extremum)> {
    let first = *values.first()?;
    let mut lo = Extremum { epoch: 1, value: first };
    let mut hi = lo;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < lo.value {
            lo = Extremum { epoch: i + 1, value: v };
        }
        if v > hi.value {
            hi = Extremum { epoch: i + 1, value: v };
        }
    }
    Some((lo, hi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub case: usize,
    pub hidden_layers: usize,
    pub batch_size: usize,
    pub min_train: Extremum,
    pub min_val: Extremum,
    pub max_train: Extremum,
    pub max_val: Extremum,
    /// Validation accuracy after the final epoch.
    pub overall_val: f64,
    pub test_loss: f64,
}

impl ReportRow {
    pub fn from_run(case: usize, batch_size: usize, metrics: &[EpochMetrics], test_loss: f64) -> Result<Self> {
        let train: Vec<f64> = metrics.iter().map(|m| m.train_accuracy).collect();
        let val: Vec<f64> = metrics.iter().map(|m| m.val_accuracy).collect();
        let (min_train, max_train) =
            extrema(&train).ok_or_else(|| Error::domain("cannot summarize an empty metric series"))?;
        let (min_val, max_val) = extrema(&val).expect("same length as train series");
        Ok(Self {
            case,
            hidden_layers: case_definition(case, &CaseWidths::default())?.hidden_layers,
            batch_size,
            min_train,
            min_val,
            max_train,
            max_val,
            overall_val: *val.last().expect("non-empty"),
            test_loss,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table1Report {
    pub rows: Vec<ReportRow>,
}

impl Table1Report {
    /// Markdown table with accuracies in percent to two decimals.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str(
            "| Case | Hidden layers | Batch | Min train (epoch) | Min val (epoch) | Max train (epoch) | Max val (epoch) | Overall val | Test loss |\n",
        );
        s.push_str("|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n");
        let pct = |e: &Extremum| format!("{:.2}% ({})", 100.0 * e.value, e.epoch);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {:.2}% | {:.6} |",
                r.case,
                r.hidden_layers,
                r.batch_size,
                pct(&r.min_train),
                pct(&r.min_val),
                pct(&r.max_train),
                pct(&r.max_val),
                100.0 * r.overall_val,
                r.test_loss
            );
        }
        s
    }
}

pub const CSV_HEADER: &str = "case,epoch,train_acc,train_loss,val_acc,val_loss";

/// CSV text for one case's metric series, full precision.
pub fn metrics_csv(case: usize, metrics: &[EpochMetrics]) -> Result<String> {
    if metrics.is_empty() {
        return Err(Error::domain("no epochs to write"));
    }
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for m in metrics {
        // `{:?}` on f64 is the shortest representation that round-trips.
        let _ = writeln!(
            s,
            "{case},{},{:?},{:?},{:?},{:?}",
            m.epoch, m.train_accuracy, m.train_loss, m.val_accuracy, m.val_loss
        );
    }
    Ok(s)
}

pub fn write_metrics_csv(case: usize, metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let text = metrics_csv(case, metrics)?;
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::from(e).in_file(path))?;
    Ok(())
}

/// Runs the requested cases, `jobs` at a time, and collects their report rows.
/// Each case gets its own generator seeded with `config.seed`.
pub fn run_table1(
    cases: &[usize],
    config: &TrainConfig,
    widths: &CaseWidths,
    train: &Dataset,
    test: &Dataset,
    jobs: usize,
    on_done: impl Fn(&CaseRun) + Sync,
) -> Result<(Table1Report, Vec<CaseRun>)> {
    let jobs = jobs.max(1);
    let mut runs: Vec<CaseRun> = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(jobs) {
        let results: Vec<Result<CaseRun>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&id| {
                    let on_done = &on_done;
                    scope.spawn(move || {
                        let run = run_case(id, config, widths, train, test, |_| {})?;
                        on_done(&run);
                        Ok(run)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("case worker panicked"))
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    let rows = runs
        .iter()
        .map(|r| ReportRow::from_run(r.case, config.batch_size, &r.metrics, r.test_loss))
        .collect::<Result<Vec<_>>>()?;
    Ok((Table1Report { rows }, runs))
}
