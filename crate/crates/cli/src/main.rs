use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msar::dsp::WpeParams;
use msar::experiment::{self, EvalOptions, ExperimentConfig, MaskSource, SeparateOptions, Split, TrainOptions};
use msar::training::DecodeParams;
use msar::{Error, Result};

/// Multi-speaker speech recognition experiments on synthetic mixtures.
///
/// MSAR_THREADS caps the number of worker threads. Exit codes: 0 ok,
/// 2 configuration error, 3 data error, 4 numeric abort.
#[derive(Parser, Debug)]
#[command(name = "msar", version)]
struct Cli {
    /// Overrides the seed in the config (data seed for gen-data, training
    /// seed for train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a corpus of multi-speaker mixtures with a JSON-lines manifest.
    GenData {
        /// Experiment config (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain (optional) and train a model, writing metrics and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
        /// Load a checkpoint even if it was written for a different config.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Decode a dataset and report per-utterance and mean token error rate.
    Eval {
        /// Checkpoint file; config.toml and stats.json are read from its directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config to use instead of the one next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Dereverberate the mixtures with WPE before recognition.
        #[arg(long)]
        wpe: bool,
        #[command(flatten)]
        wpe_params: WpeArgs,
        /// Beam width; the config value when omitted.
        #[arg(long)]
        beam: Option<usize>,
        /// Maximum hypothesis length; the config value when omitted.
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Separate speakers with an MVDR beamformer and score against references.
    Separate {
        /// Use a trained multi-channel model's masks.
        #[arg(long, conflicts_with = "oracle_masks", required_unless_present = "oracle_masks")]
        checkpoint: Option<PathBuf>,
        /// Use ideal ratio masks computed from the references.
        #[arg(long)]
        oracle_masks: bool,
        /// Per-speaker reference WAVs at microphone 0.
        #[arg(long, num_args = 1..)]
        reference: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_config_mismatch: bool,
        /// One multi-channel WAV or one mono WAV per microphone.
        #[arg(required = true)]
        mixture: Vec<PathBuf>,
    },
    /// Dereverberate a WAV file with WPE; parameters go to OUTPUT.json.
    Dereverb {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        wpe_params: WpeArgs,
    },
}

#[derive(Args, Debug)]
struct WpeArgs {
    /// Prediction filter taps.
    #[arg(long, default_value_t = WpeParams::default().taps)]
    taps: usize,
    /// Prediction delay in frames.
    #[arg(long, default_value_t = WpeParams::default().delay)]
    delay: usize,
    /// Variance re-estimation iterations.
    #[arg(long, default_value_t = WpeParams::default().iters)]
    iters: usize,
}

impl WpeArgs {
    fn params(&self) -> WpeParams {
        WpeParams { taps: self.taps, delay: self.delay, iters: self.iters }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Heldout,
    All,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MSAR_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config(format!("MSAR_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData { config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            let entries = experiment::generate(&cfg.data, &out)?;
            println!("wrote {} utterances to {}", entries.len(), out.display());
        }
        Command::Train { config, data, out, resume, allow_config_mismatch } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let summary =
                experiment::train(&cfg, &TrainOptions { data_dir: &data, out_dir: &out, resume, allow_digest_mismatch: allow_config_mismatch })?;
            match (summary.best_epoch, summary.best_ter) {
                (Some(e), Some(t)) => println!("best held-out TER {t:.4} at epoch {e}"),
                _ => println!("trained {} steps", summary.steps),
            }
        }
        Command::Eval { checkpoint, config, data, out, split, wpe, wpe_params, beam, max_len, allow_config_mismatch } => {
            let decode = match (beam, max_len) {
                (None, None) => None,
                (b, m) => {
                    let d = load_config(config.as_deref()).map(|c| c.eval).unwrap_or_default();
                    Some(DecodeParams { beam: b.unwrap_or(d.beam), max_len: m.unwrap_or(d.max_len) })
                }
            };
            let report = experiment::eval(&EvalOptions {
                checkpoint: &checkpoint,
                config: config.as_deref(),
                data_dir: &data,
                out_dir: &out,
                split: match split {
                    SplitArg::Train => Some(Split::Train),
                    SplitArg::Heldout => Some(Split::Heldout),
                    SplitArg::All => None,
                },
                wpe: wpe.then(|| wpe_params.params()),
                decode,
                allow_digest_mismatch: allow_config_mismatch,
            })?;
            println!("TER {:.4} ({} errors / {} tokens)", report.ter, report.errors, report.reference_tokens);
        }
        Command::Separate { checkpoint, oracle_masks, reference, out, allow_config_mismatch, mixture } => {
            let masks = match (&checkpoint, oracle_masks) {
                (Some(path), false) => MaskSource::Checkpoint { path, allow_digest_mismatch: allow_config_mismatch },
                _ => MaskSource::Oracle,
            };
            let report = experiment::separate(&SeparateOptions { masks, mixture: &mixture, references: &reference, out_dir: &out })?;
            for s in &report.speakers {
                match s.improvement {
                    Some(d) => println!("{}: SI-SNR improvement {d:.2} dB", s.output),
                    None => println!("{}", s.output),
                }
            }
        }
        Command::Dereverb { input, output, wpe_params } => {
            experiment::dereverb(&input, &output, wpe_params.params())?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
