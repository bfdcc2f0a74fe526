//! `rtda`: train, evaluate and benchmark robust training objectives.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtda_core::config::RunConfig;
use rtda_core::harness;
use rtda_core::Error;

#[derive(Parser)]
#[command(name = "rtda", version, about = "Robust training with data augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured objective for every seed and save the models.
    Train(Common),
    /// Evaluate saved models and write the report CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameter files written by `train` or `bench`.
        #[arg(long = "params", num_args = 1.., required = true)]
        params: Vec<PathBuf>,
    },
    /// Train and evaluate all objectives across seeds, then summarize.
    Bench(Common),
    /// Export the synthetic dataset as PGM images plus a manifest.
    MakeData(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated seeds, overriding `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for independent runs.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    /// The configuration after command-line overrides, and the directory
    /// relative dataset paths are resolved against.
    fn load(&self) -> Result<(RunConfig, PathBuf), Error> {
        let (mut cfg, base) = match &self.config {
            Some(path) => {
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (RunConfig::from_file(path)?, base)
            }
            None => (RunConfig::default(), PathBuf::new()),
        };
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        cfg.validate()?;
        Ok((cfg, base))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, base) = common.load()?;
            let paths = harness::train_command(&cfg, &base)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Eval { common, params } => {
            let (cfg, base) = common.load()?;
            harness::eval_command(&cfg, &base, &params)?;
            println!("{}", cfg.output_dir.display());
        }
        Command::Bench(common) => {
            let (cfg, base) = common.load()?;
            let outcome = harness::bench_command(&cfg, &base)?;
            let failed: usize = outcome.reports.iter().map(|r| r.failures.len()).sum();
            if failed > 0 {
                log::warn!("{failed} run(s) failed; see failures.csv");
            }
            print!("{}", std::fs::read_to_string(cfg.output_dir.join("summary.md")).unwrap_or_default());
        }
        Command::MakeData(common) => {
            let (cfg, base) = common.load()?;
            let dir = harness::make_data_command(&cfg, &base)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
