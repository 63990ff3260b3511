//! Command-line entry point: training, evaluation, compilation,
//! benchmarking, and model inspection with reproducible seeds.
//!
//! Data directory resolution: `--data` flag, else `BITSPLIT_DATA_DIR`,
//! else the config file's `data` entry. A config file may supply any
//! training option; explicit flags win on conflict.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::bench;
use crate::data;
use crate::error::{Error, Result};
use crate::model_io::{self, ModelFile};
use crate::net::train::{self, lr_at_epoch, Optimizer, OptimizerKind};
use crate::net::{compile, topology};

#[derive(Parser)]
#[command(name = "bitsplit", version, about = "Bit-serial quantized neural network engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Report packed-inference top-1 accuracy of a model on a dataset.
    Eval(EvalArgs),
    /// Fold and pack a trained model for packed inference.
    Compile(CompileArgs),
    /// Timing benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Print a model file's manifest.
    Inspect(InspectArgs),
    /// Materialize the synthetic digit corpus as IDX files.
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Topology: lenet5 | mlp | mlp-bnn.
    #[arg(long, default_value = "lenet5")]
    net: String,
    /// Activation bits (1-4).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Weight bits (1-4).
    #[arg(long, default_value_t = 1)]
    wbits: usize,
    /// Directory holding MNIST-layout IDX files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// RNG seed (mandatory: training is reproducible by contract).
    #[arg(long)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log (JSON lines, one record per epoch). Default: <out>.metrics.jsonl
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Config file supplying any of the training options (flags win).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// sgd | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Evaluate on the test split after every epoch (reference mode).
    #[arg(long, default_value_t = false)]
    eval_each_epoch: bool,
    /// Train the merge-layer bit weights (10x smaller learning rate).
    #[arg(long, default_value_t = false)]
    trainable_beta: bool,
    /// Worker threads for row-partitioned kernels (1 = pinned).
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate the train split instead of the test split.
    #[arg(long, default_value_t = false)]
    train_split: bool,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Large matrix-vector multiplication: packed kernels vs dense FP32.
    Matvec(BenchMatvecArgs),
    /// End-to-end MLP inference: compiled model vs conventional FP32.
    Mlp(BenchMlpArgs),
}

#[derive(Args)]
struct BenchMatvecArgs {
    #[arg(long, default_value_t = 8192)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    wbits: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Append machine-readable records (JSON lines) to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchMlpArgs {
    /// Compiled model file (run `compile` first).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60000)]
    train: usize,
    #[arg(long, default_value_t = 10000)]
    test: usize,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
}

/// Optional config-file fields mirroring the train flags.
#[derive(Deserialize, Default)]
struct FileConfig {
    data: Option<PathBuf>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f32>,
    optimizer: Option<String>,
    weight_decay: Option<f32>,
    lr_decay_epochs: Option<Vec<usize>>,
    lr_decay: Option<f32>,
}

fn resolve_data_dir(flag: &Option<PathBuf>, cfg: &FileConfig) -> Result<PathBuf> {
    if let Some(d) = flag {
        return Ok(d.clone());
    }
    if let Ok(env) = std::env::var("BITSPLIT_DATA_DIR") {
        return Ok(PathBuf::from(env));
    }
    if let Some(d) = &cfg.data {
        return Ok(d.clone());
    }
    Err(Error::InvalidArgument(
        "no data directory: pass --data, set BITSPLIT_DATA_DIR, or put `data` in the config file"
            .into(),
    ))
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: config parse: {e}", p.display())))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let data_dir = resolve_data_dir(&args.data, &cfg)?;
    let train_ds = data::load_mnist_layout(&data_dir, true)?;
    let test_ds = data::load_mnist_layout(&data_dir, false).ok();

    let mut model = topology::by_name(&args.net, args.k, args.wbits, args.seed)?;
    if args.trainable_beta {
        model.enable_trainable_beta();
    }
    // precedence: flag > config file > topology defaults
    let h = &mut model.hyper;
    if let Some(v) = cfg.epochs { h.epochs = v; }
    if let Some(v) = cfg.batch { h.batch_size = v; }
    if let Some(v) = cfg.lr { h.lr = v; }
    if let Some(v) = &cfg.optimizer { h.optimizer = v.clone(); }
    if let Some(v) = cfg.weight_decay { h.weight_decay = v; }
    if let Some(v) = cfg.lr_decay_epochs { h.lr_decay_epochs = v; }
    if let Some(v) = cfg.lr_decay { h.lr_decay = v; }
    if let Some(v) = args.epochs { h.epochs = v; }
    if let Some(v) = args.batch { h.batch_size = v; }
    if let Some(v) = args.lr { h.lr = v; }
    if let Some(v) = &args.optimizer { h.optimizer = v.clone(); }
    if let Some(v) = args.weight_decay { h.weight_decay = v; }

    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", args.out.display())));
    let mut metrics_file = BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?,
    );

    let kind = OptimizerKind::from_name(&model.hyper.optimizer, model.hyper.momentum)?;
    let mut opt = Optimizer::new(kind, model.hyper.lr, model.hyper.weight_decay);
    let hyper = model.hyper.clone();
    eprintln!(
        "training {} k={} n={} on {} samples ({} epochs, batch {}, {} lr {})",
        args.net,
        args.k,
        args.wbits,
        train_ds.len(),
        hyper.epochs,
        hyper.batch_size,
        hyper.optimizer,
        hyper.lr
    );
    for epoch in 0..hyper.epochs {
        opt.lr = lr_at_epoch(hyper.lr, &hyper.lr_decay_epochs, hyper.lr_decay, epoch);
        let mut m = train::train_epoch(&mut model, &train_ds, &mut opt, args.seed, epoch)?;
        if args.eval_each_epoch {
            if let Some(test) = &test_ds {
                m.test_accuracy = Some(train::evaluate_reference(&mut model, test)?);
            }
        }
        let line = serde_json::to_string(&m)
            .map_err(|e| Error::Format(format!("metrics encode: {e}")))?;
        writeln!(metrics_file, "{line}")?;
        metrics_file.flush()?;
        match m.test_accuracy {
            Some(t) => eprintln!(
                "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {:.4}  lr {}",
                m.epoch, m.loss, m.train_accuracy, t, m.lr
            ),
            None => eprintln!(
                "epoch {:>3}  loss {:.4}  train_acc {:.4}  lr {}",
                m.epoch, m.loss, m.train_accuracy, m.lr
            ),
        }
    }
    model_io::save_model(&model, &args.out)?;
    if let Some(test) = &test_ds {
        let top1 = train::evaluate(&model, test)?;
        println!("top1={top1}");
        writeln!(metrics_file, "{{\"final_packed_top1\":{top1}}}")?;
    }
    eprintln!("model written to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let data_dir = resolve_data_dir(&args.data, &FileConfig::default())?;
    let ds = data::load_mnist_layout(&data_dir, args.train_split)?;
    let top1 = match model_io::load_any(&args.model)? {
        ModelFile::Trainable(model) => train::evaluate(&model, &ds)?,
        ModelFile::Compiled(compiled) => train::evaluate_compiled(&compiled, &ds)?,
    };
    println!("top1={top1}");
    Ok(())
}

fn cmd_compile(args: CompileArgs) -> Result<()> {
    let model = model_io::load_model(&args.model)?;
    let compiled = compile::compile(&model)?;
    model_io::save_compiled(&compiled, &args.out)?;
    eprintln!(
        "compiled model written to {} ({} ops, no bn in packed path: {})",
        args.out.display(),
        compiled.ops.len(),
        compiled.packed_path_has_no_bn()
    );
    Ok(())
}

fn write_bench_records(report: &bench::BenchReport, out: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = out {
        let mut f = BufWriter::new(File::create(path)?);
        report.write_records(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn cmd_bench_matvec(args: BenchMatvecArgs) -> Result<()> {
    let report = bench::bench_matvec(args.dim, args.k, args.wbits, args.reps, args.workers)?;
    print!("{}", report.render_table());
    write_bench_records(&report, &args.out)
}

fn cmd_bench_mlp(args: BenchMlpArgs) -> Result<()> {
    let compiled = match model_io::load_any(&args.model)? {
        ModelFile::Compiled(c) => c,
        ModelFile::Trainable(_) => {
            return Err(Error::InvalidState(format!(
                "{}: model is not compiled for inference (run `bitsplit compile` first)",
                args.model.display()
            )))
        }
    };
    let data_dir = resolve_data_dir(&args.data, &FileConfig::default())?;
    let ds = data::load_mnist_layout(&data_dir, false)?;
    let report = bench::bench_mlp(&compiled, &ds, args.reps, args.workers)?;
    print!("{}", report.render_table());
    write_bench_records(&report, &args.out)
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    println!("{}", model_io::inspect(&args.model)?);
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    data::ensure_synth_digit_dir(&args.out, args.train, args.test, args.seed)?;
    eprintln!(
        "synthetic digit corpus at {} ({} train / {} test)",
        args.out.display(),
        args.train,
        args.test
    );
    Ok(())
}

/// Run the CLI; returns the process exit code (0 success, 1 runtime error,
/// 2 usage error via clap).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with exit 0, usage errors on
            // stderr with exit 2
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compile(args) => cmd_compile(args),
        Command::Bench(BenchCommand::Matvec(args)) => cmd_bench_matvec(args),
        Command::Bench(BenchCommand::Mlp(args)) => cmd_bench_mlp(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::SynthData(args) => cmd_synth_data(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}


