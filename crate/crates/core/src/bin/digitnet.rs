use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use digitnet::checkpoint;
use digitnet::experiments::{self, CaseWidths, CASE_IDS};
use digitnet::gradcheck::{self, CheckConfig, CheckReport, LAYER_TARGETS};
use digitnet::mnist::{self, Mnist};
use digitnet::training::{evaluate, LossKind, TrainConfig};
use digitnet::{Dataset, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "digitnet", version, about = "CNN digit classifier and six-case MNIST experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check (and optionally download) the MNIST files
    Data(DataArgs),
    /// Train one case and write its metrics and checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test set
    Evaluate(EvaluateArgs),
    /// Run all six cases and write the summary table
    Table1(Table1Args),
    /// Finite-difference check of the backward passes (no dataset needed)
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct DataDir {
    /// Directory holding the four IDX files (raw or .gz)
    #[arg(long = "data-dir", env = "DIGITNET_DATA_DIR", default_value = "data/mnist")]
    dir: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, env = "DIGITNET_DATA_DIR", default_value = "data/mnist")]
    dir: PathBuf,
    /// Download missing files
    #[arg(long)]
    fetch: bool,
    /// Check SHA-256 digests and IDX headers
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value = mnist::DEFAULT_MIRROR)]
    mirror: String,
}

#[derive(Args, Debug, Clone)]
struct Protocol {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long = "batch-size", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    /// Learning rate
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// quadratic | cross_entropy
    #[arg(long, default_value = "cross_entropy")]
    loss: LossKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Train on only the first N training images
    #[arg(long = "train-limit")]
    train_limit: Option<usize>,
    /// Validate on only the first N test images
    #[arg(long = "test-limit")]
    test_limit: Option<usize>,
}

impl Protocol {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size as usize,
            eta: self.lr,
            loss: self.loss,
            seed: self.seed,
            shuffle: true,
        }
    }

    fn describe(&self) -> String {
        let limit = |l: Option<usize>| l.map_or("all".to_string(), |n| n.to_string());
        format!(
            "epochs={} batch_size={} lr={} loss={} seed={} train_limit={} test_limit={}",
            self.epochs,
            self.batch_size,
            self.lr,
            self.loss,
            self.seed,
            limit(self.train_limit),
            limit(self.test_limit)
        )
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=6))]
    case: u64,
    #[command(flatten)]
    protocol: Protocol,
    #[command(flatten)]
    data: DataDir,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "cross_entropy")]
    loss: LossKind,
    #[command(flatten)]
    data: DataDir,
}

#[derive(Args, Debug)]
struct Table1Args {
    #[command(flatten)]
    protocol: Protocol,
    #[command(flatten)]
    data: DataDir,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Cases trained concurrently
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=6))]
    jobs: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check a single layer type
    #[arg(long, conflicts_with = "case", value_parser = clap::builder::PossibleValuesParser::new(LAYER_TARGETS))]
    layer: Option<String>,
    /// Check a whole case model at desk scale
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=6))]
    case: Option<u64>,
    /// Restrict whole-model checks to one loss (default: both)
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Samples per whole-model check
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Domain(_) => EXIT_USAGE,
            Error::Divergence { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Data(a) => data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Table1(a) => table1(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn data(args: DataArgs) -> Result<(), Failure> {
    println!(
        "config: dir={} fetch={} verify={} mirror={}",
        args.dir.display(),
        args.fetch,
        args.verify,
        args.mirror
    );
    if args.fetch {
        mnist::fetch(&args.dir, &args.mirror)?;
    } else if !args.dir.is_dir() {
        return Err(fail(
            EXIT_DATA,
            format!(
                "data directory {} does not exist; rerun with --fetch to download MNIST",
                args.dir.display()
            ),
        ));
    }
    if args.verify {
        mnist::verify_dir(&args.dir)?;
        println!("checksums and headers ok");
    }
    let m = Mnist::load(&args.dir)?;
    println!("train: {}, test: {}", m.train.len(), m.test.len());
    Ok(())
}

fn load_data(dir: &Path, p: &Protocol) -> Result<(Dataset, Dataset), Failure> {
    if !dir.is_dir() {
        return Err(fail(
            EXIT_DATA,
            format!(
                "data directory {} does not exist; run `digitnet data --fetch --dir {}`",
                dir.display(),
                dir.display()
            ),
        ));
    }
    let m = Mnist::load(dir)?;
    let train = match p.train_limit {
        Some(n) => m.train.head(n)?,
        None => m.train,
    };
    let test = match p.test_limit {
        Some(n) => m.test.head(n)?,
        None => m.test,
    };
    Ok((train, test))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| fail(EXIT_DATA, format!("cannot create {}: {e}", dir.display())))
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let case = args.case as usize;
    println!(
        "config: command=train case={case} {} data_dir={} out={}",
        args.protocol.describe(),
        args.data.dir.display(),
        args.out.display()
    );
    let config = args.protocol.config();
    let (train_set, test_set) = load_data(&args.data.dir, &args.protocol)?;
    create_dir(&args.out)?;
    let started = Instant::now();
    let run = experiments::run_case(case, &config, &CaseWidths::default(), &train_set, &test_set, |m| {
        println!(
            "epoch {}: train_acc={:.4}, train_loss={:.6}, val_acc={:.4}, val_loss={:.6} ({:.0?})",
            m.epoch,
            m.train_accuracy,
            m.train_loss,
            m.val_accuracy,
            m.val_loss,
            started.elapsed()
        );
    })?;
    if run.metrics.is_empty() {
        println!(
            "epoch 0 (untrained): val_acc={:.4}, test_loss={:.6}",
            run.test_accuracy, run.test_loss
        );
    } else {
        let csv = args.out.join(format!("case{case}_metrics.csv"));
        experiments::write_metrics_csv(case, &run.metrics, &csv)?;
        println!("metrics: {}", csv.display());
        println!(
            "final: val_acc={:.4}, test_loss={:.6}",
            run.test_accuracy, run.test_loss
        );
    }
    let ckpt = args.out.join(format!("case{case}.ckpt"));
    checkpoint::save(&run.model, &ckpt)?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<(), Failure> {
    println!(
        "config: command=evaluate checkpoint={} loss={} data_dir={}",
        args.checkpoint.display(),
        args.loss,
        args.data.dir.display()
    );
    let mut model = checkpoint::load(&args.checkpoint)?;
    let protocol = Protocol {
        epochs: 0,
        batch_size: 1,
        lr: 0.0,
        loss: args.loss,
        seed: 0,
        train_limit: Some(1),
        test_limit: None,
    };
    let (_, test) = load_data(&args.data.dir, &protocol)?;
    let (accuracy, loss) = evaluate(&mut model, &test, args.loss)?;
    println!("test: accuracy={accuracy:.4}, loss={loss:.6}, samples={}", test.len());
    Ok(())
}

fn table1(args: Table1Args) -> Result<(), Failure> {
    println!(
        "config: command=table1 cases=1..6 {} jobs={} data_dir={} out={}",
        args.protocol.describe(),
        args.jobs,
        args.data.dir.display(),
        args.out.display()
    );
    if args.protocol.epochs == 0 {
        return Err(fail(EXIT_USAGE, "table1 needs at least one epoch"));
    }
    let config = args.protocol.config();
    let (train_set, test_set) = load_data(&args.data.dir, &args.protocol)?;
    create_dir(&args.out)?;
    let cases: Vec<usize> = CASE_IDS.collect();
    let io_errors = Mutex::new(Vec::new());
    let (report, _) = experiments::run_table1(
        &cases,
        &config,
        &CaseWidths::default(),
        &train_set,
        &test_set,
        args.jobs as usize,
        |run| {
            let path = args.out.join(format!("case{}_metrics.csv", run.case));
            if let Err(e) = experiments::write_metrics_csv(run.case, &run.metrics, &path) {
                io_errors.lock().expect("not poisoned").push(e);
            }
            let last = run.metrics.last().expect("epochs >= 1");
            println!(
                "case {}: final val_acc={:.4}, test_loss={:.6}",
                run.case, last.val_accuracy, run.test_loss
            );
        },
    )?;
    if let Some(e) = io_errors.into_inner().expect("not poisoned").pop() {
        return Err(e.into());
    }
    let table = report.to_markdown();
    let path = args.out.join("table1.md");
    fs::write(&path, &table).map_err(|e| Failure::from(Error::from(e).in_file(&path)))?;
    print!("{table}");
    println!("report: {}", path.display());
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<(), Failure> {
    let losses = match args.loss {
        Some(l) => vec![l],
        None => vec![LossKind::CrossEntropy, LossKind::Quadratic],
    };
    println!(
        "config: command=gradcheck layer={} case={} loss={} seed={} tolerance={:e} samples={} step=1e-6",
        args.layer.as_deref().unwrap_or("-"),
        args.case.map_or("-".to_string(), |c| c.to_string()),
        losses.iter().map(|l| l.name()).collect::<Vec<_>>().join(","),
        args.seed,
        args.tolerance,
        args.samples
    );
    let cfg = CheckConfig {
        tolerance: args.tolerance,
        seed: args.seed,
        ..CheckConfig::default()
    };
    let mut reports: Vec<CheckReport> = Vec::new();
    let layers: Vec<&str> = match (&args.layer, args.case) {
        (Some(l), _) => vec![l.as_str()],
        (None, Some(_)) => vec![],
        (None, None) => LAYER_TARGETS.to_vec(),
    };
    for layer in layers {
        reports.extend(gradcheck::check_layer(layer, &cfg)?);
    }
    let cases: Vec<usize> = match (&args.layer, args.case) {
        (_, Some(c)) => vec![c as usize],
        (Some(_), None) => vec![],
        (None, None) => CASE_IDS.collect(),
    };
    for case in cases {
        for &loss in &losses {
            reports.extend(gradcheck::check_case(case, loss, args.samples, &cfg)?);
        }
    }
    for r in &reports {
        println!("{r}");
    }
    let offenders: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.target.as_str())
        .collect();
    if offenders.is_empty() {
        println!("all {} gradient checks passed", reports.len());
        Ok(())
    } else {
        Err(fail(
            EXIT_NUMERIC,
            format!("gradient check over tolerance: {}", offenders.join(", ")),
        ))
    }
}
