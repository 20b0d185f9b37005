use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use veinattn::data::{
    generate_synthetic, load_dataset, load_dataset_sized, read_image, resize_bilinear,
    write_dataset, Dataset, SynthConfig,
};
use veinattn::gradcheck::{run_suite, CheckConfig, Fault, Precision, SuiteConfig};
use veinattn::model::{load_checkpoint, save_checkpoint, CheckpointInfo, Model};
use veinattn::train::{
    evaluate, stratified_split, train_loop, MetricsWriter, TrainConfig, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS,
};
use veinattn::{Error, Shape4, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Finger-vein identification with a small attention CNN.
#[derive(Parser, Debug)]
#[command(name = "veinattn", version)]
struct Cli {
    /// Worker threads for the convolution kernels (1 = reproducibility mode).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Report test-split accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Print the five most probable classes for one image.
    Infer(InferArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset as a PGM directory tree.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory, or `synthN` for N generated classes.
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "model.vatn")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
    #[arg(long, alias = "lr", default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 36)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channel reduction ratio of the attention block.
    #[arg(long, default_value_t = 16)]
    reduction: usize,
    /// Train the plain CNN without the attention block.
    #[arg(long)]
    no_cbam: bool,
    /// Write 0 in the seconds column so repeated runs give identical files.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: String,
    #[arg(long, default_value = "model.vatn")]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 36)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long, default_value = "model.vatn")]
    checkpoint: PathBuf,
    /// A `.pgm` or `.vten` image.
    #[arg(long)]
    image: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    Batchnorm,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 12)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(_) => Failure::usage(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

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
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `synthN` or `synthNxM` (N classes, M images each).
fn parse_synth(spec: &str) -> Option<(usize, usize)> {
    let rest = spec.strip_prefix("synth")?;
    let (classes, per_class) = match rest.split_once('x') {
        Some((c, m)) => (c.parse().ok()?, m.parse().ok()?),
        None => (rest.parse().ok()?, SynthConfig::default().images_per_class),
    };
    Some((classes, per_class))
}

fn open_dataset(spec: &str, size: Option<(usize, usize)>) -> Result<Dataset, Failure> {
    if let Some((num_classes, images_per_class)) = parse_synth(spec) {
        let mut cfg = SynthConfig {
            num_classes,
            images_per_class,
            ..SynthConfig::default()
        };
        if let Some((h, w)) = size {
            cfg.height = h;
            cfg.width = w;
        }
        return Ok(generate_synthetic(&cfg)?);
    }
    let path = Path::new(spec);
    if !path.is_dir() {
        return Err(Failure::data(format!("{spec}: not a dataset directory")));
    }
    Ok(match size {
        Some((h, w)) => load_dataset_sized(path, h, w)?,
        None => load_dataset(path)?,
    })
}

fn ensure_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Failure::usage(format!(
            "{}: parent directory does not exist",
            path.display()
        ))),
        _ => Ok(()),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        train_fraction: a.train_fraction,
        seed: a.seed,
        reduction: a.reduction,
        use_cbam: !a.no_cbam,
        record_seconds: !a.no_timing,
    };
    cfg.validate()?;
    ensure_parent(&a.checkpoint)?;
    ensure_parent(&a.metrics)?;
    let ds = open_dataset(&a.data, None)?;
    let spec = cfg.model_spec(ds.num_classes(), ds.image_size());
    let mut model = Model::<f32>::build(&spec, cfg.seed)?;
    println!(
        "{} images, {} classes; {} model with {} parameters",
        ds.len(),
        ds.num_classes(),
        if cfg.use_cbam { "attention" } else { "basic" },
        model.num_parameters()
    );
    println!(
        "adam lr={} beta1={ADAM_BETA1} beta2={ADAM_BETA2} eps={ADAM_EPS:e}; batch {} for {} epochs; seed {}",
        cfg.learning_rate, cfg.batch_size, cfg.epochs, cfg.seed
    );
    let file = File::create(&a.metrics).map_err(|e| Failure::data(format!("{}: {e}", a.metrics.display())))?;
    let mut sink = MetricsWriter::new(BufWriter::new(file))?;
    let epochs = cfg.epochs;
    let report = train_loop(&mut model, &ds, &cfg, |m| {
        println!(
            "epoch {:>3}/{epochs}  loss {:.4}  train {:.4}  test {:.4}",
            m.epoch, m.train_loss, m.train_acc, m.test_acc
        );
        sink.write(m)
    })?;
    save_checkpoint(
        &a.checkpoint,
        &model,
        CheckpointInfo {
            train_fraction: cfg.train_fraction,
        },
    )?;
    println!("final test accuracy: {}", report.final_test_acc);
    println!(
        "best test accuracy: {} (epoch {})",
        report.best_test_acc, report.best_epoch
    );
    println!("checkpoint: {}", a.checkpoint.display());
    println!("metrics: {}", a.metrics.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if a.batch_size == 0 {
        return Err(Failure::usage("batch size must be at least 1"));
    }
    let (mut model, info) = load_checkpoint(&a.checkpoint)?;
    let spec = model.spec().clone();
    let ds = open_dataset(&a.data, Some((spec.input_h, spec.input_w)))?;
    if ds.num_classes() != spec.num_classes {
        return Err(Failure::data(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            spec.num_classes,
            ds.num_classes()
        )));
    }
    let split = stratified_split(&ds, info.train_fraction, model.seed())?;
    assert!(!split.test.is_empty(), "stratified split always leaves test images");
    let result = evaluate(&mut model, &ds, &split.test, a.batch_size)?;
    println!("test images: {}", split.test.len());
    println!("test accuracy: {}", result.accuracy);
    let wrong: Vec<_> = result
        .errors_per_class
        .iter()
        .enumerate()
        .filter(|(_, &k)| k > 0)
        .collect();
    if wrong.is_empty() {
        println!("errors per class: none");
    } else {
        println!("errors per class:");
        for (c, k) in wrong {
            println!("  {} {}", ds.class_names()[c], k);
        }
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let (mut model, _) = load_checkpoint(&a.checkpoint)?;
    let spec = model.spec().clone();
    let img = read_image(&a.image).map_err(|e| Failure::data(format!("{}: {e}", a.image.display())))?;
    let img = resize_bilinear(&img, spec.input_h, spec.input_w)?;
    let x = Tensor::from_vec(Shape4::new(1, 1, spec.input_h, spec.input_w)?, img.data)?;
    let probs = model.forward(&x)?;
    let mut ranked: Vec<(usize, f32)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (rank, (class, p)) in ranked.iter().take(5).enumerate() {
        println!("{}\t{}\t{:.6}", rank + 1, class, p);
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let precision = match a.precision {
        PrecisionArg::F64 => Precision::F64,
        PrecisionArg::F32 => Precision::F32,
    };
    let cfg = SuiteConfig {
        seeds: (0..a.seeds).collect(),
        check: CheckConfig {
            precision,
            ..CheckConfig::default()
        },
        fault: a.inject_fault.map(|FaultArg::Batchnorm| Fault::BatchNormBackward),
    };
    let report = run_suite(&cfg)?;
    println!(
        "{:<24} {:>12} {:>8} {:>8}  result",
        "op", "max rel err", "checked", "skipped"
    );
    for op in &report.ops {
        println!(
            "{:<24} {:>12.3e} {:>8} {:>8}  {}",
            op.name,
            op.max_rel_error,
            op.checked,
            op.skipped,
            if op.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "tolerance {:e} over {} seed(s): {}",
        report.tolerance,
        a.seeds,
        if report.passed() { "passed" } else { "FAILED" }
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: "gradient check failed".into(),
        })
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        num_classes: a.classes,
        images_per_class: a.per_class,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let ds = generate_synthetic(&cfg)?;
    let n = write_dataset(&ds, &a.out).map_err(|e| Failure::data(format!("{}: {e}", a.out.display())))?;
    println!("wrote {n} images in {} classes to {}", ds.num_classes(), a.out.display());
    Ok(())
}
