//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};

use fedhead::data::{load_dataset, partition, save_dataset};
use fedhead::gradcheck::{run_gradcheck, REL_TOLERANCE};
use fedhead::runtime::{run_agent, serve, AgentConfig, RoundPolicy, ServerConfig};
use fedhead::simulator::{emit_csv, preset, run_sweep, to_csv, ExperimentConfig, SyntheticSpec};
use fedhead::wire::{decode_model, encode_model, frame_bytes, unframe_bytes};
use fedhead::{evaluate, DenseHead, Error, HeadShape, InitMode, ModelBlob, Result};

const LOG_ENV: &str = "FTL_LOG_LEVEL";

#[derive(Debug, Parser)]
#[command(
    name = "fedhead",
    version,
    about = "Federated training of a dense classification head"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic embedding dataset file.
    GenData(GenDataArgs),
    /// Run one configuration (no sweep) and write per-epoch CSV.
    Simulate(RunArgs),
    /// Run a preset or configured parameter sweep and write per-epoch CSV.
    Sweep(SweepArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the global server.
    Serve(ServeArgs),
    /// Run a device agent.
    Agent(AgentArgs),
    /// Convert a text blob (`E C v1 v2 ...`) to encoded model bytes.
    Encode(ConvertArgs),
    /// Convert encoded model bytes to a text blob.
    Decode(ConvertArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 16_000)]
    train: usize,
    #[arg(long, default_value_t = 1_000)]
    validation: usize,
    #[arg(long, default_value_t = fedhead::data::DEFAULT_MARGIN)]
    margin: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Put all signal in this many dimensions; the rest are zero.
    #[arg(long)]
    active_dims: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Number of devices N.
    #[arg(long)]
    devices: Option<usize>,
    /// Samples per local batch B.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Gradient steps per batch L.
    #[arg(long)]
    local_episodes: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Federated rounds per repetition.
    #[arg(long)]
    epochs: Option<usize>,
    /// Independent repetitions per sweep point.
    #[arg(long)]
    repetitions: Option<usize>,
    /// Base seed for partitioning and init.
    #[arg(long)]
    seed: Option<u64>,
    /// `random` or `pretrained`.
    #[arg(long)]
    init: Option<String>,
    /// Dataset file; synthetic data is used when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// fig1, fig2, fig3 or fig4.
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random heads and batches to check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Zeros,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    endpoint: String,
    #[arg(long, default_value_t = 256)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Random)]
    init: InitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from this encoded model file instead of `--init`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Milliseconds between aggregation rounds.
    #[arg(long, default_value_t = 5_000)]
    interval_ms: u64,
    /// Per-device I/O timeout; a device that misses it is dropped.
    #[arg(long, default_value_t = 5_000)]
    timeout_ms: u64,
    /// Stop after this many aggregated rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Dataset whose validation split is used to score the final global.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Write the final global as an encoded model file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AgentArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    endpoint: String,
    /// Shard index in 0..devices, also sent in every message.
    #[arg(long)]
    device_id: u8,
    /// Dataset file; the agent trains on its shard of the training split.
    #[arg(long)]
    data: PathBuf,
    /// Number of shards the training split is cut into.
    #[arg(long, default_value_t = 1)]
    devices: usize,
    /// Seed of the shuffle before sharding; must match across agents.
    #[arg(long, default_value_t = 0)]
    partition_seed: u64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    local_episodes: usize,
    #[arg(long, default_value_t = fedhead::nn::DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Train at most this many batches per received model (synchronized mode).
    #[arg(long)]
    sync_batches: Option<usize>,
    /// Consecutive failed reconnects before giving up.
    #[arg(long, default_value_t = 5)]
    reconnect_attempts: usize,
    /// First reconnect delay; doubles on each failure.
    #[arg(long, default_value_t = 100)]
    backoff_ms: u64,
    /// Stop after this many seconds; runs until the server goes away otherwise.
    #[arg(long)]
    duration_secs: Option<u64>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Model bytes are 8-byte frames rather than a bare encoded model.
    #[arg(long)]
    framed: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Usage(_) | Error::Parse { .. })) => {
            eprintln!("error: {e}");
            eprintln!("run `fedhead --help` for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn init_logging() -> std::result::Result<(), String> {
    let level = match std::env::var(LOG_ENV).as_deref() {
        Err(_) | Ok("") | Ok("info") => LevelFilter::Info,
        Ok("error") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => return Err(format!("{LOG_ENV} must be error, info or debug, got '{other}'")),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp_millis()
        .init();
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Serve(a) => run_server(a),
        Command::Agent(a) => agent(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    info!("gen-data config: {a:?}");
    let spec = SyntheticSpec {
        embedding_dim: a.embedding_dim,
        num_classes: a.classes,
        train: a.train,
        validation: a.validation,
        margin: a.margin,
        seed: a.seed,
        active_dims: a.active_dims,
    };
    let ds = spec.generate()?;
    save_dataset(&ds, &a.out)?;
    info!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn resolve(mut cfg: ExperimentConfig, a: &RunArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &a.config {
        cfg.apply_kv_str(&fs::read_to_string(path)?, &format!("{} line", path.display()))?;
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
        cfg.set(k, v)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("devices", a.devices.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("local_episodes", a.local_episodes.map(|v| v.to_string())),
        ("learning_rate", a.lr.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("repetitions", a.repetitions.map(|v| v.to_string())),
        ("base_seed", a.seed.map(|v| v.to_string())),
        ("init", a.init.clone()),
        ("dataset", a.data.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_results(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    info!("resolved configuration:\n{cfg}");
    let result = run_sweep(cfg)?;
    match out {
        Some(path) => {
            emit_csv(&result, path)?;
            info!("wrote {}", path.display());
        }
        None => print!("{}", to_csv(&result)),
    }
    Ok(())
}

fn simulate(a: RunArgs) -> Result<()> {
    let mut cfg = resolve(ExperimentConfig::default(), &a)?;
    // A single point: the axis collapses to the resolved base value.
    let axis = cfg.sweep.param_name();
    cfg.set("sweep", axis)?;
    write_results(&cfg, a.out.as_deref())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = match &a.preset {
        Some(name) => preset(name)?,
        None if a.run.config.is_some() => ExperimentConfig::default(),
        None => return Err(Error::Usage("sweep needs --preset or --config".into())),
    };
    let cfg = resolve(base, &a.run)?;
    write_results(&cfg, a.run.out.as_deref())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    info!("gradcheck config: {a:?}");
    let report = run_gradcheck(a.instances, a.seed)?;
    println!(
        "gradcheck: {} instances, {} coordinates, max relative error {:.3e} (tolerance {:.0e})",
        report.instances, report.coordinates, report.max_relative_error, REL_TOLERANCE
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "max relative error {:.3e} exceeds {REL_TOLERANCE:.0e}",
            report.max_relative_error
        )))
    }
}

fn run_server(a: ServeArgs) -> Result<()> {
    info!("serve config: {a:?}");
    let initial = match &a.model {
        Some(path) => decode_model(&fs::read(path)?)?,
        None => {
            let mode = match a.init {
                InitArg::Random => InitMode::Random { seed: a.seed },
                InitArg::Zeros => InitMode::Zeros,
            };
            ModelBlob::from_head(&DenseHead::init(a.embedding_dim, a.classes, &mode)?)
        }
    };
    let val = match &a.validation {
        Some(path) => {
            let v = load_dataset(path)?.validation();
            if v.is_empty() {
                return Err(Error::Usage(format!("{} has no validation split", path.display())));
            }
            Some(v)
        }
        None => None,
    };
    if a.interval_ms == 0 || a.timeout_ms == 0 {
        return Err(Error::Usage("--interval-ms and --timeout-ms must be positive".into()));
    }
    let cfg = ServerConfig {
        policy: RoundPolicy::Interval(Duration::from_millis(a.interval_ms)),
        device_timeout: Duration::from_millis(a.timeout_ms),
        max_rounds: a.rounds,
    };
    let stop = Arc::new(AtomicBool::new(false));
    let final_global = serve(&a.endpoint, initial, cfg, stop, |report| {
        info!(
            "round {} contributors {:?} stale {:?} rejected {:?} exhausted {:?} bytes in {} out {}",
            report.round,
            report.contributors,
            report.stale,
            report.rejected,
            report.exhausted,
            report.bytes_received,
            report.bytes_sent
        );
    })?;
    if let Some(v) = &val {
        info!("final validation accuracy {:.4}", evaluate(&final_global, v)?);
    }
    if let Some(path) = &a.out {
        fs::write(path, encode_model(&final_global)?)?;
        info!("wrote final global to {}", path.display());
    }
    Ok(())
}

fn agent(a: AgentArgs) -> Result<()> {
    info!("agent config: {a:?}");
    let ds = load_dataset(&a.data)?;
    let shape = ds.shape();
    let streams = partition(&ds, a.devices, a.partition_seed)?;
    let stream = streams
        .get(a.device_id as usize)
        .ok_or_else(|| Error::Usage(format!("device id {} outside 0..{}", a.device_id, a.devices)))?;
    let train = ds.train();
    let samples: Vec<_> = stream.indices().iter().map(|&i| train[i].clone()).collect();
    drop(ds);
    let cfg = AgentConfig {
        device_id: a.device_id,
        batch_size: a.batch_size,
        local_episodes: a.local_episodes,
        learning_rate: a.lr,
        batches_per_contact: a.sync_batches,
        reconnect_attempts: a.reconnect_attempts,
        reconnect_backoff: Duration::from_millis(a.backoff_ms),
        ..AgentConfig::default()
    };
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(secs) = a.duration_secs {
        let stop = Arc::clone(&stop);
        thread::spawn(move || {
            thread::sleep(Duration::from_secs(secs));
            stop.store(true, Ordering::SeqCst);
        });
    }
    let head = DenseHead::zeros(shape.embedding_dim, shape.num_classes)?;
    let report = run_agent(&a.endpoint, &cfg, head, samples.into_iter(), stop)?;
    info!(
        "agent {} done: {} samples in {} batches, {} pulls answered, {} models installed, {} refused, exhausted {}",
        a.device_id,
        report.samples_trained,
        report.batches_trained,
        report.pulls_answered,
        report.installs,
        report.refused,
        report.exhausted
    );
    Ok(())
}

/// Parses `E C v1 v2 ...` (any whitespace).
fn parse_blob_text(text: &str, origin: &Path) -> Result<ModelBlob> {
    let mut tokens = text.split_whitespace().enumerate();
    let mut dim = |what: &str| -> Result<usize> {
        let (i, tok) = tokens.next().ok_or_else(|| Error::Parse {
            location: origin.display().to_string(),
            message: format!("missing {what}"),
        })?;
        tok.parse().map_err(|_| Error::Parse {
            location: format!("{} token {}", origin.display(), i + 1),
            message: format!("invalid {what} '{tok}'"),
        })
    };
    let e = dim("embedding dim")?;
    let c = dim("class count")?;
    let values = tokens
        .map(|(i, tok)| {
            tok.parse::<f64>().map_err(|_| Error::Parse {
                location: format!("{} token {}", origin.display(), i + 1),
                message: format!("invalid value '{tok}'"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    ModelBlob::new(HeadShape::new(e, c), values)
}

fn format_blob_text(blob: &ModelBlob) -> String {
    let shape = blob.shape();
    let mut out = format!("{} {}\n", shape.embedding_dim, shape.num_classes);
    for v in blob.values() {
        // Shortest representation that reads back to the same f32.
        let _ = writeln!(out, "{}", *v as f32);
    }
    out
}

fn encode(a: ConvertArgs) -> Result<()> {
    info!("encode config: {a:?}");
    let blob = parse_blob_text(&fs::read_to_string(&a.input)?, &a.input)?;
    let mut bytes = encode_model(&blob)?;
    if a.framed {
        bytes = frame_bytes(&bytes)?;
    }
    fs::write(&a.output, &bytes)?;
    info!("wrote {} bytes to {}", bytes.len(), a.output.display());
    Ok(())
}

fn decode(a: ConvertArgs) -> Result<()> {
    info!("decode config: {a:?}");
    let mut bytes = fs::read(&a.input)?;
    if a.framed {
        bytes = unframe_bytes(&bytes)?;
    }
    let blob = decode_model(&bytes)?;
    fs::write(&a.output, format_blob_text(&blob))?;
    info!("wrote {}", a.output.display());
    Ok(())
}
