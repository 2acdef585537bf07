//! `primek`: analysis, verification, training and enhancement from the
//! command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error, 3 I/O
//! error, 4 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use primek::blocks::Model;
use primek::complexity::{self, Geometry};
use primek::config::RunConfig;
use primek::spectral::{wav_read, wav_write, Stft};
use primek::trainer::{evaluate_heldout, train_toy, Checkpoint, CHECKPOINT_FILE};
use primek::verify::{gradcheck, memory, selftest};
use primek::Error;

#[derive(Parser, Debug)]
#[command(name = "primek", version, about = "Prime-kernel speech enhancement toolkit")]
struct Cli {
    /// Run configuration file; the built-in full-size configuration if absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides one configuration key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic and measured MACs and parameter counts.
    Analyze {
        #[arg(long)]
        json: bool,
        /// Skip the instrumented forward pass and report closed forms only.
        #[arg(long)]
        analytic_only: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::Block)]
        scope: ScopeArg,
        #[arg(long, default_value_t = gradcheck::DEFAULT_DRAWS)]
        draws: usize,
        /// Corrupt convolution weight gradients to confirm failures are caught.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        json: bool,
    },
    /// Peak activation memory of GPFCA against self-attention.
    BenchMemory {
        #[arg(long, value_delimiter = ',', default_values_t = memory::DEFAULT_LENGTHS)]
        lengths: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Trains on the synthetic tone task and reports held-out SI-SNR.
    Train {
        /// Directory for the checkpoint, loss log and config dump.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Enhances a 16-bit PCM WAV file.
    Enhance {
        /// Trained checkpoint; its stored configuration replaces `--config`.
        #[arg(long, value_name = "PATH", conflicts_with = "identity", required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Use an untrained model whose heads pass the input through unchanged.
        #[arg(long)]
        identity: bool,
        input: PathBuf,
        output: PathBuf,
    },
    /// Runs every verification check.
    Selftest {
        #[arg(long)]
        json: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScopeArg {
    Block,
    Model,
    All,
}

impl From<ScopeArg> for gradcheck::Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Block => gradcheck::Scope::Block,
            ScopeArg::Model => gradcheck::Scope::Model,
            ScopeArg::All => gradcheck::Scope::All,
        }
    }
}

enum Failure {
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigParse { .. } => 2,
        Error::Io(_) | Error::Wav(_) | Error::Format(_) => 3,
        Error::Diverged { .. } | Error::NonFiniteGradient { .. } => 4,
        _ => 1,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::full(),
    };
    for item in &cli.overrides {
        if !item.contains('=') {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got `{item}`")));
        }
        cfg = RunConfig::parse_with_base(item, cfg)?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn print_hash(cfg: &RunConfig) {
    println!("config hash {}", cfg.hash());
}

fn emit_json(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("plain data"));
}

fn verdict(passed: bool, what: &str) -> Result<(), Failure> {
    if passed {
        Ok(())
    } else {
        Err(Failure::Verification(format!("{what} failed")))
    }
}

fn analyze(cfg: &RunConfig, json: bool, analytic_only: bool) -> Result<(), Failure> {
    let geometry = Geometry::clip(&cfg.stft)?;
    let report = if analytic_only {
        complexity::analyze(&cfg.model, geometry)?
    } else {
        complexity::measure(&Model::new(&cfg.model, cfg.seed)?, geometry)?
    };
    if json {
        emit_json(json!({ "config_hash": cfg.hash(), "report": report }));
    } else {
        print_hash(cfg);
        print!("{}", report.to_text());
    }
    Ok(())
}

fn run_gradcheck(cfg: &RunConfig, scope: ScopeArg, draws: usize, fault: bool, json: bool) -> Result<(), Failure> {
    let report = gradcheck::run(scope.into(), draws, cfg.seed, fault)?;
    if json {
        emit_json(json!({ "config_hash": cfg.hash(), "report": report }));
    } else {
        print_hash(cfg);
        print!("{}", report.to_text());
    }
    verdict(report.passed(), "gradient check")
}

fn bench_memory(cfg: &RunConfig, lengths: &[usize], json: bool) -> Result<(), Failure> {
    let report = memory::run(&cfg.model.gpfca, lengths, cfg.seed)?;
    if json {
        emit_json(json!({ "config_hash": cfg.hash(), "report": report }));
    } else {
        print_hash(cfg);
        print!("{}", report.to_text());
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    print_hash(cfg);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.cfg"), cfg.dump())?;
    let report = train_toy(cfg, Some(out))?;
    let (noisy, enhanced) = evaluate_heldout(&report.model, cfg)?;
    if let Some(last) = report.losses.last() {
        println!("final loss {last}");
    }
    println!("held-out si-snr noisy {noisy:.3} dB, enhanced {enhanced:.3} dB, gain {:.3} dB", enhanced - noisy);
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn enhance(cfg: &RunConfig, checkpoint: Option<&Path>, input: &Path, output: &Path) -> Result<(), Failure> {
    let (cfg, model) = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(|e| match e {
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
                e => e,
            })?;
            let model = ck.to_model()?;
            (ck.config, model)
        }
        None => {
            let mut model = Model::new(&cfg.model, cfg.seed)?;
            model.set_identity_heads()?;
            (cfg.clone(), model)
        }
    };
    print_hash(&cfg);
    let (wave, rate) = wav_read(input)?;
    if rate != cfg.stft.sample_rate {
        return Err(Error::Config(format!(
            "{} is sampled at {rate} Hz, the model expects {} Hz",
            input.display(),
            cfg.stft.sample_rate
        ))
        .into());
    }
    let enhanced = model.enhance(&Stft::new(&cfg.stft)?, &wave)?;
    wav_write(output, &enhanced, rate)?;
    println!("wrote {} samples to {}", enhanced.numel(), output.display());
    Ok(())
}

fn run_selftest(cfg: &RunConfig, json: bool) -> Result<(), Failure> {
    let report = selftest::run(cfg)?;
    if json {
        emit_json(json!({ "config_hash": cfg.hash(), "report": report }));
    } else {
        print_hash(cfg);
        print!("{}", report.to_text());
    }
    verdict(report.passed(), "selftest")
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Analyze { json, analytic_only } => analyze(&cfg, *json, *analytic_only),
        Command::Gradcheck { scope, draws, inject_fault, json } => run_gradcheck(&cfg, *scope, *draws, *inject_fault, *json),
        Command::BenchMemory { lengths, json } => bench_memory(&cfg, lengths, *json),
        Command::Train { out } => train(&cfg, out),
        Command::Enhance { checkpoint, input, output, .. } => enhance(&cfg, checkpoint.as_deref(), input, output),
        Command::Selftest { json } => run_selftest(&cfg, *json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
    }
}
