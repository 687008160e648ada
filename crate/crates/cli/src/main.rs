use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod pipeline;

use config::PipelineConfig;
use pipeline::CliError;

/// Cold-start CTR pipeline: offline stages write under the output directory,
/// `serve` answers ranking requests from the calibrated models.
#[derive(Parser)]
#[command(name = "coldstart-hyper", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic world.
    Synth,
    /// Train warm logistic-regression models on retired ads.
    Train,
    /// Retrieve neighbours and generate raw weights for active ads.
    Generate,
    /// Normalize and calibrate generated weights.
    Calibrate,
    /// Serve calibrated models over HTTP until interrupted.
    Serve,
    /// Score held-out users and write report.json.
    Eval,
}

#[derive(Args)]
struct Overrides {
    /// Key-value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set temperature=0.2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    shots: Option<usize>,
    /// Leave captions and images out of prompts.
    #[arg(long, global = true)]
    no_image: bool,
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// oracle, mock or remote.
    #[arg(long, global = true)]
    client: Option<String>,
    /// Comma-separated subset of llm_hyper, lr_cold, lr_warm, cosine.
    #[arg(long, global = true)]
    methods: Option<String>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut pairs = self.set.clone();
        let quoted = |s: &str| format!("{s:?}");
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out_dir", self.out.as_ref().map(|p| quoted(&p.to_string_lossy()))),
            ("shots", self.shots.map(|v| v.to_string())),
            ("image", self.no_image.then(|| "false".to_owned())),
            ("samples", self.samples.map(|v| v.to_string())),
            ("client", self.client.as_deref().map(quoted)),
            ("methods", self.methods.as_deref().map(quoted)),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_owned(), v?))));
        pairs
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(cli.overrides.config.as_deref(), &cli.overrides.pairs())?;
    println!("config hash {}", cfg.hash());
    match cli.command {
        Command::Synth => pipeline::synth(&cfg),
        Command::Train => pipeline::train(&cfg),
        Command::Generate => pipeline::generate(&cfg),
        Command::Calibrate => pipeline::calibrate(&cfg),
        Command::Serve => pipeline::serve(&cfg),
        Command::Eval => pipeline::eval(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
