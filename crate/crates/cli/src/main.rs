mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epose_core::eval::{evaluate, DecodeMode};
use epose_core::net::read_checkpoint;
use epose_core::routing::{generate_dataset, read_instances, write_instances, ProblemKind};
use epose_core::trainer::train;
use epose_core::Error;

use settings::TrainSettings;

/// Thread count for parallel evaluation.
const THREADS_VAR: &str = "EPOSE_THREADS";

#[derive(Parser)]
#[command(name = "epose", version, about = "Entropy-regularized reinforcement learning for routing problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write random instances as JSON lines.
    Generate(GenerateArgs),
    /// Train a policy and write a checkpoint plus per-step metrics.
    Train(Box<TrainArgs>),
    /// Decode instances with a trained policy and compare with references.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    kind: ProblemKind,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Settings file of `key = value` lines; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<ProblemKind>,
    #[arg(long)]
    n: Option<usize>,
    /// Total steps, split evenly over the epochs.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    q_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha_lr: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    entropy_target_coef: Option<f64>,
    #[arg(long)]
    fixed_alpha: Option<f64>,
    /// epose, offpolicy-fixed or onpolicy-fixed.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replay_capacity: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    val_seed: Option<u64>,
    #[arg(long)]
    bn_momentum: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    clip_c: Option<f64>,
    #[arg(long)]
    critic_layers: Option<usize>,
    #[arg(long)]
    critic_hidden: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        fn put<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
            if let Some(v) = v {
                out.push((key, v.to_string()));
            }
        }
        let mut out = Vec::new();
        put(&mut out, "kind", &self.kind);
        put(&mut out, "n", &self.n);
        put(&mut out, "epochs", &self.epochs);
        put(&mut out, "steps_per_epoch", &self.steps_per_epoch);
        put(&mut out, "steps", &self.steps);
        put(&mut out, "batch_size", &self.batch);
        put(&mut out, "q_batch_size", &self.q_batch);
        put(&mut out, "lr", &self.lr);
        put(&mut out, "alpha_lr", &self.alpha_lr);
        put(&mut out, "eta", &self.eta);
        put(&mut out, "entropy_target_coef", &self.entropy_target_coef);
        put(&mut out, "fixed_alpha", &self.fixed_alpha);
        put(&mut out, "mode", &self.mode);
        put(&mut out, "seed", &self.seed);
        put(&mut out, "replay_capacity", &self.replay_capacity);
        put(&mut out, "val_size", &self.val_size);
        put(&mut out, "val_seed", &self.val_seed);
        put(&mut out, "bn_momentum", &self.bn_momentum);
        put(&mut out, "embed_dim", &self.embed_dim);
        put(&mut out, "encoder_layers", &self.encoder_layers);
        put(&mut out, "heads", &self.heads);
        put(&mut out, "ff_dim", &self.ff_dim);
        put(&mut out, "clip_c", &self.clip_c);
        put(&mut out, "critic_layers", &self.critic_layers);
        put(&mut out, "critic_hidden", &self.critic_hidden);
        put(&mut out, "checkpoint", &self.checkpoint.as_ref().map(|p| p.display()));
        put(&mut out, "metrics", &self.metrics.as_ref().map(|p| p.display()));
        out
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeChoice {
    Greedy,
    Sample,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    decode: DecodeChoice,
    /// Samples per instance for sampling decoding.
    #[arg(long, default_value_t = 1280)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report path; rows of every decoding mode are appended in order.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Failure classes with their exit codes.
enum Failure {
    Io(String),
    Usage(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Usage(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) => Failure::Io(msg),
            Error::Diverged { .. } => Failure::Numeric(msg),
            _ => Failure::Usage(msg),
        }
    }
}

fn io_context(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| match e {
        Error::Io(io) => Failure::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), Failure> {
    let instances = generate_dataset(args.kind, args.n, args.count, args.seed)?;
    write_instances(&args.out, &instances).map_err(io_context(&args.out))?;
    println!("wrote {} {} instances to {}", instances.len(), args.kind, args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut settings = TrainSettings::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        settings.apply_text(&text, path).map_err(Failure::Usage)?;
    }
    for (key, value) in args.overrides() {
        settings.set(key, &value).map_err(Failure::Usage)?;
    }
    let settings = settings.finish().map_err(Failure::Usage)?;
    let cfg = &settings.train;
    eprintln!(
        "training {} n={} mode={} for {} epochs x {} steps, batch {}",
        cfg.kind, cfg.n, cfg.mode, cfg.epochs, cfg.steps_per_epoch, cfg.batch_size
    );
    let summary = train(cfg, Some(&settings.metrics), Some(&settings.checkpoint))?;
    let last = summary.history.last().expect("at least one step");
    println!(
        "trained {} steps ({} trajectories): validation greedy length {:.4} -> {:.4}, alpha {:.5}",
        last.step,
        last.trajectories,
        summary.initial_val,
        last.val_greedy_len.unwrap_or(f64::NAN),
        summary.model.alpha()
    );
    println!(
        "checkpoint {}, metrics {}",
        settings.checkpoint.display(),
        settings.metrics.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    if !args.ckpt.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", args.ckpt.display())));
    }
    if !args.instances.is_file() {
        return Err(Failure::Usage(format!("instance file {} does not exist", args.instances.display())));
    }
    let model = read_checkpoint(&args.ckpt)?;
    let instances = read_instances(&args.instances)?;
    if args.k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let modes = match args.decode {
        DecodeChoice::Greedy => vec![DecodeMode::Greedy],
        DecodeChoice::Sample => vec![DecodeMode::Sample(args.k)],
        DecodeChoice::Both => vec![DecodeMode::Greedy, DecodeMode::Sample(args.k)],
    };
    let mut csv = Vec::new();
    for (i, mode) in modes.into_iter().enumerate() {
        let report = evaluate(&model, &instances, mode, args.seed)?;
        println!("{}", report.summary());
        let mut buf = Vec::new();
        report.write_csv_to(&mut buf).map_err(|e| Failure::Io(e.to_string()))?;
        let text = String::from_utf8(buf).expect("report is UTF-8");
        // Keep a single header when several modes share one file.
        let body = if i == 0 { text.as_str() } else { text.split_once('\n').map_or("", |(_, b)| b) };
        csv.extend_from_slice(body.as_bytes());
    }
    if let Some(path) = &args.report {
        std::fs::write(path, csv).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
