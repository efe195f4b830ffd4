use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod context;

use context::{CliError, Context};

#[derive(Parser, Debug)]
#[command(name = "groundvid", version, about = "Grounded video conversation pipeline and benchmarks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Stage cache directory.
    #[arg(long, global = true, default_value = ".groundvid-cache")]
    pub cache_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 4)]
    pub max_workers: usize,
    /// Use the deterministic in-process backends for every model.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Output artifact path (each subcommand has a default).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct JudgeArgs {
    /// Total judge asks per item before it is marked invalid.
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Base URL of the chat server used as judge.
    #[arg(long)]
    pub judge_endpoint: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Shot boundaries of frame directories, as JSONL.
    Scenes { videos: Vec<PathBuf> },
    /// Filtered speech transcripts, as JSONL.
    Transcribe { videos: Vec<PathBuf> },
    /// Ground a response in a video and write the tracks as JSONL.
    Ground {
        video: PathBuf,
        /// Text to ground; when absent the chat backend describes the video.
        #[arg(long)]
        response: Option<String>,
        /// Instruction used to obtain a response when none is given.
        #[arg(long, default_value = "Describe what happens in the video.")]
        instruction: String,
    },
    /// Judge a conversation benchmark dataset.
    EvalConv {
        dataset: PathBuf,
        #[command(flatten)]
        judge: JudgeArgs,
    },
    /// Judge a zero-shot QA dataset.
    EvalQa {
        dataset: PathBuf,
        #[command(flatten)]
        judge: JudgeArgs,
    },
    /// Spatial grounding mean IoU over a ground-truth dataset.
    EvalGrounding {
        dataset: PathBuf,
        /// Directory holding one frame directory per video id.
        #[arg(long)]
        videos: PathBuf,
        #[command(flatten)]
        judge: JudgeArgs,
    },
    /// Render benchmark reports as tables.
    Report { reports: Vec<PathBuf> },
    /// Pool (and optionally project) a frame feature container.
    Features {
        input: PathBuf,
        /// Projector weights container; without it the pooled features are written.
        #[arg(long)]
        projector: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Context::new(&cli.global)?;
    match cli.command {
        Command::Scenes { videos } => commands::scenes(&ctx, &videos),
        Command::Transcribe { videos } => commands::transcribe(&ctx, &videos),
        Command::Ground { video, response, instruction } => {
            commands::ground(&ctx, &video, response.as_deref(), &instruction)
        }
        Command::EvalConv { dataset, judge } => commands::eval_conv(&ctx, &dataset, &judge),
        Command::EvalQa { dataset, judge } => commands::eval_qa(&ctx, &dataset, &judge),
        Command::EvalGrounding { dataset, videos, judge } => commands::eval_grounding(&ctx, &dataset, &videos, &judge),
        Command::Report { reports } => commands::report(&ctx, &reports),
        Command::Features { input, projector } => commands::features(&ctx, &input, projector.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
