use std::{path::PathBuf, process::ExitCode, time::Instant};

use clap::{Args, Parser, Subcommand};
use ffce::{
    checkpoint::Checkpoint,
    error::{Error, Result},
    infer::{emit_report, evaluate_dice, read_report, segment_volume, ReportFormat},
    manifest::{Dataset, Manifest},
    synth::{write_dataset, SynthConfig},
    train::{TrainConfig, Trainer},
    volume::{LabelVolume, Volume},
};
use ffce_core::{gradcheck::run_suite, LossWeights, NetworkConfig};

#[derive(Parser)]
#[command(name = "ffce", version, about = "Feature-fused context-encoding segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        volumes: usize,
        /// Extents D,H,W.
        #[arg(long, value_parser = parse_dims, default_value = "32,32,32")]
        dims: [usize; 3],
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a manifest, optionally resuming a checkpoint.
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a segmentation against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// json or csv; defaults to the report's extension.
        #[arg(long)]
        format: Option<String>,
        /// Class count; defaults to one more than the largest label.
        #[arg(long)]
        classes: Option<usize>,
        /// Segmentation runtime to record in the report.
        #[arg(long)]
        runtime: Option<f64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Re-render a JSON metrics report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        format: Option<String>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint up to `--epochs` in total.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: u64,
    /// Stop (and checkpoint) once this many epochs are complete.
    #[arg(long)]
    until: Option<u64>,
    #[arg(long, default_value_t = 0.01)]
    base_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    poly_power: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    stack: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    codewords: usize,
    #[arg(long, default_value_t = 5)]
    kernel: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Train the 2D-only ablation without the depth-as-channel encoder.
    #[arg(long)]
    no_fuse: bool,
    /// Median-frequency class weights in the cross-entropy term.
    #[arg(long)]
    class_weights: bool,
    #[arg(long, default_value_t = 1.0)]
    lambda_dice: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_sec: f64,
    /// Min-max normalize volumes to [0, 1].
    #[arg(long)]
    normalize: bool,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("expected 3 extents, got {}", p.len()))
}

fn report_format(explicit: Option<&str>, path: &std::path::Path) -> Result<ReportFormat> {
    match explicit {
        Some(f) => f.parse(),
        None => ReportFormat::from_path(path),
    }
}

fn load_dataset(manifest: &std::path::Path, classes: usize, stack: usize, normalize: bool) -> Result<Dataset> {
    let mut data = Dataset::load(&Manifest::read(manifest)?, classes, stack)?;
    if normalize {
        data.volumes.iter_mut().for_each(|(v, _)| v.normalize_min_max());
    }
    Ok(data)
}

fn train(a: TrainArgs) -> Result<()> {
    let network = NetworkConfig {
        num_classes: a.classes,
        stack_depth: a.stack,
        channels: a.channels,
        num_enc_blocks: a.blocks,
        num_dec_blocks: a.blocks,
        codewords: a.codewords,
        dropout_rate: a.dropout,
        kernel_size: a.kernel,
        fuse_spatial: !a.no_fuse,
        ..NetworkConfig::default()
    };
    let config = TrainConfig {
        base_lr: a.base_lr,
        poly_power: a.poly_power,
        weight_decay: a.weight_decay,
        momentum: a.momentum,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        class_weights: a.class_weights,
        loss_weights: LossWeights {
            ce: 1.0,
            dice: a.lambda_dice,
            sec: a.lambda_sec,
        },
        normalize: a.normalize,
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            ckpt.check_network(&network)?;
            if ckpt.train != config {
                return Err(Error::Invalid(format!(
                    "training options {config:?} differ from the checkpoint's {:?}",
                    ckpt.train
                )));
            }
            ckpt.into_trainer()?
        }
        None => Trainer::new(network, config)?,
    };
    let data = load_dataset(&a.manifest, a.classes, a.stack, a.normalize)?;
    let stop = a.until.unwrap_or(a.epochs).min(a.epochs);
    while trainer.epoch < stop {
        let start = Instant::now();
        let r = trainer.train_epoch(&data)?;
        eprintln!(
            "epoch {}/{}: loss {:.6} (ce {:.6}, dice {:.6}, sec {:.6}) {:.1}s",
            trainer.epoch,
            trainer.config.epochs,
            r.total,
            r.ce,
            r.dice,
            r.sec,
            start.elapsed().as_secs_f64()
        );
    }
    Checkpoint::from_trainer(&trainer).write(&a.out)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            seed,
            volumes,
            dims,
            classes,
            out,
        } => {
            let manifest = write_dataset(
                &SynthConfig {
                    seed,
                    volumes,
                    dims,
                    classes,
                },
                &out,
            )?;
            println!("{}", manifest.display());
        }
        Command::Train(args) => train(args)?,
        Command::Infer { ckpt, input, out } => {
            let ckpt = Checkpoint::read(&ckpt)?;
            let net = ckpt.network()?;
            let mut vol = Volume::read(&input)?;
            if ckpt.train.normalize {
                vol.normalize_min_max();
            }
            let seg = segment_volume(&net, &vol)?;
            seg.labels.write(&out)?;
            println!("segmented {} slices in {:.3}s", vol.dims[0], seg.seconds);
        }
        Command::Eval {
            pred,
            gt,
            report,
            format,
            classes,
            runtime,
        } => {
            let format = report_format(format.as_deref(), &report)?;
            let (p, g) = (LabelVolume::read(&pred)?, LabelVolume::read(&gt)?);
            let classes = match classes {
                Some(c) => c,
                None => 1 + p.data.iter().chain(&g.data).copied().max().unwrap_or(0) as usize,
            };
            let mut metrics = evaluate_dice(&p, &g, classes)?;
            metrics.runtime_seconds = runtime;
            emit_report(&metrics, format, &report)?;
            println!("mean dice {:.6}", metrics.mean_dice);
        }
        Command::Gradcheck { seeds } => {
            let entries = run_suite(seeds)?;
            let mut failed = 0;
            for e in &entries {
                let status = if e.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {:<24} max rel err {:.3e} < {:.0e} ({} probes, {} skipped, {} seeds)",
                    e.name, e.max_error, e.threshold, e.probes, e.skipped, e.seeds
                );
                failed += usize::from(!e.passed());
            }
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} gradient checks failed")));
            }
        }
        Command::Report { input, out, format } => {
            let format = report_format(format.as_deref(), &out)?;
            emit_report(&read_report(&input)?, format, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
