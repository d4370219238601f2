use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scap_core::io;
use scap_core::network::bundled;
use scap_core::pipeline::{self, Run, DEFAULT_POOL_SIZE};
use scap_core::{
    synthetic_dataset, CapturePoint, FusionKind, FusionRule, KMin, NetworkSpec, OptimizerKind, ScapError, ScoreConfig,
    TrainConfig, TrainSchedule,
};

#[derive(Parser, Debug)]
#[command(name = "scap", version, about = "Spectral complex autoencoder channel pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled image set.
    GenData(GenDataArgs),
    /// Print FLOPs and parameter counts of a network spec.
    Count(CountArgs),
    /// Train the baseline network.
    Pretrain(PretrainArgs),
    /// Cache per-layer activations from a seeded pool of training images.
    Capture(CaptureArgs),
    /// Train the per-layer spectral autoencoders.
    TrainAe(TrainAeArgs),
    /// Score every conv channel.
    Score(ScoreArgs),
    /// Threshold the scores and write masks, pruned checkpoints and reports.
    Prune(PruneArgs),
    /// Retrain pruned models.
    Finetune(FinetuneArgs),
    /// Summarize every pruned threshold of a run.
    Report(ReportArgs),
    /// Run the randomized identity and bound checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct RunDir {
    /// Run directory holding every stage's artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CountArgs {
    /// Spec file, or `bundled:NAME` with NAME one of vgg16, resnet56, densenet40, toy.
    #[arg(long)]
    spec: String,
    /// Also list every layer.
    #[arg(long)]
    layers: bool,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Epochs at which the learning rate drops 10x (default: half and 80% of the run).
    #[arg(long, value_delimiter = ',')]
    decay_epochs: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScheduleArgs {
    fn schedule(&self) -> TrainSchedule {
        let decay = self.decay_epochs.clone().unwrap_or_else(|| vec![self.epochs / 2, self.epochs * 4 / 5]);
        TrainSchedule {
            epochs: self.epochs,
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            decay_epochs: decay,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunDir,
    /// Spec file, or `bundled:NAME`.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
struct CaptureArgs {
    #[command(flatten)]
    run: RunDir,
    #[arg(long)]
    dataset: PathBuf,
    /// Spec the stored model must match.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
    pool_size: usize,
    #[arg(long, default_value = "post")]
    capture_point: CapturePoint,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainAeArgs {
    #[command(flatten)]
    run: RunDir,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    accum_steps: usize,
    /// Plain gradient descent instead of Adam.
    #[arg(long)]
    sgd: bool,
    /// One parameter set for both spectral components.
    #[arg(long)]
    share_branches: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    run: RunDir,
    #[arg(long, default_value = "add")]
    fusion: FusionKind,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[command(flatten)]
    run: RunDir,
    /// Thresholds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = pipeline::DEFAULT_TAUS)]
    tau: Vec<f64>,
    /// Re-fuse with another rule instead of the one used when scoring.
    #[arg(long)]
    fusion: Option<FusionKind>,
    #[arg(long, requires = "fusion")]
    alpha: Option<f64>,
    /// Per-layer channel floor: `default` or a number.
    #[arg(long, default_value = "default")]
    kmin: KMin,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunDir,
    #[arg(long)]
    dataset: PathBuf,
    /// Thresholds to fine-tune (default: every pruned one).
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    run: RunDir,
    /// Print the full report file of one threshold.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also audit the pruned thresholds of this run directory.
    #[arg(long)]
    run: Option<PathBuf>,
}

fn load_spec(arg: &str) -> scap_core::Result<NetworkSpec> {
    match arg.strip_prefix("bundled:") {
        Some("vgg16") => NetworkSpec::parse(bundled::VGG16_CIFAR),
        Some("resnet56") => NetworkSpec::parse(bundled::RESNET56_CIFAR),
        Some("densenet40") => NetworkSpec::parse(bundled::DENSENET40_CIFAR),
        Some("toy") => NetworkSpec::parse(bundled::TOY),
        Some(other) => Err(ScapError::InvalidArgument(format!(
            "unknown bundled spec '{other}' (expected vgg16, resnet56, densenet40 or toy)"
        ))),
        None => NetworkSpec::parse(&io::read_text(Path::new(arg), "network spec")?),
    }
}

fn millions(n: u64) -> String {
    format!("{:.3}M", n as f64 / 1e6)
}

fn count(args: &CountArgs) -> anyhow::Result<()> {
    let spec = load_spec(&args.spec)?;
    if args.layers {
        let shapes = spec.shapes()?;
        println!("{:>4} {:<14} {:>12} {:>12} {:>10}  output", "idx", "layer", "macs", "elementwise", "params");
        for (i, (layer, cost)) in spec.layers.iter().zip(spec.layer_costs()?).enumerate() {
            let s = shapes[i];
            let kind = layer.keyword();
            println!("{i:>4} {kind:<14} {:>12} {:>12} {:>10}  {}x{}x{}", cost.macs, cost.elementwise, cost.params, s.c, s.h, s.w);
        }
    }
    let c = spec.cost()?;
    println!("macs {} ({})", c.macs, millions(c.macs));
    println!("elementwise {} ({})", c.elementwise, millions(c.elementwise));
    println!("profiler_flops {} ({})", c.profiler_flops(), millions(c.profiler_flops()));
    println!("params {} ({})", c.params, millions(c.params));
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => {
            let data = synthetic_dataset::<f64>(a.samples, a.classes, a.channels, a.size, a.seed)?;
            io::write_dataset(&a.out, &data.images, &data.labels)?;
            println!("wrote {} samples to {}", data.len(), a.out.display());
        }
        Command::Count(a) => count(&a)?,
        Command::Pretrain(a) => {
            let spec = load_spec(&a.spec)?;
            let data = pipeline::load_dataset(&a.dataset, &spec)?;
            let s = Run::new(&a.run.out).pretrain(&spec, &data, &a.schedule.schedule())?;
            println!("train_accuracy {:.4}", s.train_accuracy);
            if let Some(loss) = s.final_loss {
                println!("final_loss {loss:.6}");
            }
            println!("flops {} params {}", s.flops, s.params);
        }
        Command::Capture(a) => {
            let run = Run::new(&a.run.out);
            let model = run.load_model()?;
            if let Some(spec) = &a.spec {
                if load_spec(spec)? != model.spec {
                    return Err(ScapError::Validation("stored model does not match the given spec".into()).into());
                }
            }
            let data = pipeline::load_dataset(&a.dataset, &model.spec)?;
            let n = run.capture(&data, a.pool_size, a.capture_point, a.seed)?;
            println!("captured {n} samples at {} for {} conv layers", a.capture_point, model.spec.conv_layers().len());
        }
        Command::TrainAe(a) => {
            let cfg = TrainConfig {
                epochs: a.epochs,
                learning_rate: a.lr,
                weight_decay: a.weight_decay,
                batch_size: a.batch_size,
                accum_steps: a.accum_steps,
                seed: a.seed,
                optimizer: if a.sgd { OptimizerKind::Sgd } else { OptimizerKind::default() },
                share_branches: a.share_branches,
                ..TrainConfig::default()
            };
            for (i, loss) in Run::new(&a.run.out).train_autoencoders(&cfg)?.iter().enumerate() {
                println!("autoencoder {i}: final loss {loss:.6}");
            }
        }
        Command::Score(a) => {
            let cfg = ScoreConfig { fusion: FusionRule::new(a.fusion, a.alpha)?, batch_size: a.batch_size, ..ScoreConfig::default() };
            for iv in Run::new(&a.run.out).score(&cfg)? {
                let mean = iv.fid.iter().sum::<f64>() / iv.len() as f64;
                println!("layer {}: {} channels, mean fidelity {mean:.4}", iv.layer_id, iv.len());
            }
        }
        Command::Prune(a) => {
            let fusion = a.fusion.map(|k| FusionRule::new(k, a.alpha.unwrap_or(0.5))).transpose()?;
            for r in Run::new(&a.run.out).prune(&a.tau, fusion, a.kmin)? {
                let kept: Vec<String> = r.layers.iter().map(|l| format!("{}/{}", l.kept, l.total)).collect();
                println!(
                    "tau {:.2}: FR {:.2}% PR {:.2}% kept [{}]{}",
                    r.tau,
                    r.fr,
                    r.pr,
                    kept.join(" "),
                    if r.any_safeguard() { " (safeguard)" } else { "" }
                );
            }
        }
        Command::Finetune(a) => {
            let run = Run::new(&a.run.out);
            let spec = run.load_model()?.spec;
            let data = pipeline::load_dataset(&a.dataset, &spec)?;
            let taus = if a.tau.is_empty() { run.pruned_taus()? } else { a.tau.clone() };
            if taus.is_empty() {
                return Err(ScapError::MissingInput { path: a.run.out.clone(), what: "pruned models (run prune first)".into() }.into());
            }
            for tau in taus {
                let s = run.finetune(tau, &data, &a.schedule.schedule())?;
                println!("tau {:.2}: accuracy {:.4} -> {:.4}", s.tau, s.accuracy_before, s.accuracy_after);
            }
        }
        Command::Report(a) => {
            let run = Run::new(&a.run.out);
            match a.tau {
                Some(tau) => {
                    let path = io::layout::tau_dir(run.dir(), tau).join("report.txt");
                    print!("{}", io::emit_report(&io::read_report(&path)?));
                }
                None => print!("{}", run.summary()?),
            }
        }
        Command::Verify(a) => {
            let outcomes = scap_core::theory::run_all(a.seed)?;
            for o in &outcomes {
                println!("{o}");
            }
            if let Some(dir) = &a.run {
                for line in Run::new(dir).audit()? {
                    println!("{line}");
                }
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 2 for bad inputs, 3 for a broken pipeline contract, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ScapError>() {
        Some(ScapError::Contract(_)) => 3,
        Some(ScapError::Io(_)) | None => 1,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
