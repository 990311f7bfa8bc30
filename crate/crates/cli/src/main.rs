use std::path::PathBuf;
use std::process::ExitCode;

use adadamp_cli::config::parse_seed_list;
use adadamp_cli::{cmd_diagnose, cmd_run, cmd_sweep, DiagnoseSource, ExperimentConfig, Options, Result, TraceFormat};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adadamp", version, about = "Adaptive and passive batch-size SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config; one trace and summary per seed.
    Run(Common),
    /// Expand a config's [sweep] grid, run it and write a comparison report.
    Sweep(Common),
    /// Per-iterate diversity, variance and bound checks.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// JSON trace with weight snapshots (from `run --format json` with
        /// `snapshot_every`); replays the config when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: config output_dir, else
    /// $ADADAMP_OUTPUT_ROOT/<name>, else ./runs/<name>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds overriding the config, e.g. 1,2,5-8
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Options)> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let opts = Options {
            out: self.out.clone(),
            seeds: self.seeds.as_deref().map(parse_seed_list).transpose()?,
            jobs: self.jobs,
            format: match self.format {
                Format::Csv => TraceFormat::Csv,
                Format::Json => TraceFormat::Json,
            },
        };
        Ok((cfg, opts))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => c.load().and_then(|(cfg, o)| cmd_run(&cfg, &o)),
        Command::Sweep(c) => c.load().and_then(|(cfg, o)| cmd_sweep(&cfg, &o)),
        Command::Diagnose { common, trace } => common.load().and_then(|(cfg, o)| {
            let source = match trace {
                Some(p) => DiagnoseSource::Trace(p.clone()),
                None => DiagnoseSource::Replay,
            };
            cmd_diagnose(&cfg, &source, &o)
        }),
    };
    match result {
        Ok(w) => {
            println!("wrote {} files to {}", w.files.len(), w.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
