//! `tcr`: synthesize data, train, generate titles and covers, refine, evaluate.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, RunConfig};

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser, Debug)]
#[command(name = "tcr", version, about = "Multimodal title and cover generation with attention-based data refinement")]
pub struct Cli {
    /// JSON run configuration; missing keys take the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value = "tiny")]
    preset: Preset,

    /// Worker threads for per-sample work. Output is reproducible only at 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train/valid/test manifests.
    Synth(SynthArgs),
    /// Train a generator and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Decode titles and select covers for a manifest.
    Generate(GenerateArgs),
    /// Train, refine the training data by attention, and retrain.
    Refine(RefineArgs),
    /// Score generations, a checkpoint, or a baseline with Rouge.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// copy-prefix or planted-cover.
    #[arg(long)]
    pub task: String,
    /// Training samples.
    #[arg(long)]
    pub n: usize,
    /// Validation samples [default: n/4, at least 1].
    #[arg(long)]
    pub valid: Option<usize>,
    /// Test samples [default: n/4, at least 1].
    #[arg(long)]
    pub test: Option<usize>,
    /// Frames per sample [default: 4 for copy-prefix, 25 for planted-cover].
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Vocabulary file; built from the training manifest when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct AblationArgs {
    /// Empty the text span.
    #[arg(long)]
    pub no_text: bool,
    /// Empty the frame span.
    #[arg(long)]
    pub no_visual: bool,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct DecodeArgs {
    /// Beam search with this width.
    #[arg(long, conflicts_with = "greedy")]
    pub beam: Option<usize>,
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Manifest to decode [default: paths.test].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generations JSONL [default: <output_dir>/generations.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for one attention CSV per sample.
    #[arg(long)]
    pub attn_report: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fraction of samples kept by Rouge-L rank.
    #[arg(long)]
    pub keep: Option<f64>,
    /// Sentences kept per sample.
    #[arg(long)]
    pub u: Option<usize>,
    /// Frames kept per sample.
    #[arg(long)]
    pub v: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Manifest with gold titles [default: paths.test].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generations JSONL to score.
    #[arg(long, conflicts_with_all = ["checkpoint", "baseline"])]
    pub generations: Option<PathBuf>,
    #[arg(long, conflicts_with = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Extractive baseline instead of a model.
    #[arg(long, value_parser = ["lead3"])]
    pub baseline: Option<String>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Count Rouge over characters instead of tokens.
    #[arg(long)]
    pub char: bool,
    /// Metrics JSON [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<tcr_core::Error>() {
            return c.exit_code() as u8;
        }
        if cause.is::<Usage>() {
            return 1;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if cli.print_config {
        print!("{}", config.to_json());
        return Ok(());
    }
    let threads = cli.threads.max(1);
    let explicit = cli.config.is_some();
    match cli.command {
        None => Err(Usage("no command given; see --help".into()).into()),
        Some(Command::Synth(a)) => commands::synth(&config, &a),
        Some(Command::Train(a)) => commands::train(&mut config, &a),
        Some(Command::Generate(a)) => commands::generate(&config, explicit, &a, threads),
        Some(Command::Refine(a)) => commands::refine(&mut config, &a, threads),
        Some(Command::Evaluate(a)) => commands::evaluate(&config, explicit, &a, threads),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
