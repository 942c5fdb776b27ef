use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pairdid::config::Config;
use pairdid::pipeline::{run_pipeline, run_stage, simulate, Manifest, Stage, Workspace};

/// Pair-of-pairs difference-in-differences pipeline.
#[derive(Debug, Parser)]
#[command(name = "pairdid", version)]
struct Cli {
    /// TOML configuration file, layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Named preset: primary, sa1, sa2, sa3, sa4, quickstart.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory for stage artifacts (for `simulate`, the scenario files).
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Directory with clusters.csv, prevalence.csv and births.csv.
    #[arg(long, global = true, default_value = ".")]
    input_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read and validate the input tables.
    Ingest,
    /// Pair early and late clusters within each country.
    MatchGeo,
    /// Label pairs high-high, high-low, other or excluded.
    Classify,
    /// Select balanced high-low / high-high quadruples.
    MatchCard,
    /// Fit the imputation model and draw completed data sets.
    Impute,
    /// Fit the outcome model per data set and pool.
    Fit,
    /// Run the unobserved-covariate grid.
    Sensitivity,
    /// Write a synthetic scenario.
    Simulate,
    /// Run every stage in order.
    Pipeline,
    /// Regenerate the table-format CSVs from stage artifacts.
    Report,
}

fn run(cli: Cli) -> pairdid::Result<Vec<Manifest>> {
    let mut cfg = Config::load(cli.config.as_deref(), cli.preset.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(pairdid::Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| pairdid::Error::Config(format!("thread pool: {e}")))?;
    }
    let ws = Workspace::new(cli.input_dir, cli.out_dir);
    let stage = match cli.command {
        Command::Simulate => return Ok(vec![simulate(&cfg, &ws.out_dir)?]),
        Command::Pipeline => return run_pipeline(&cfg, &ws),
        Command::Ingest => Stage::Ingest,
        Command::MatchGeo => Stage::MatchGeo,
        Command::Classify => Stage::Classify,
        Command::MatchCard => Stage::MatchCard,
        Command::Impute => Stage::Impute,
        Command::Fit => Stage::Fit,
        Command::Sensitivity => Stage::Sensitivity,
        Command::Report => Stage::Report,
    };
    Ok(vec![run_stage(stage, &cfg, &ws)?])
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out_dir = cli.out_dir.clone();
    match run(cli) {
        Ok(manifests) => {
            for m in manifests {
                let outputs: Vec<&str> = m.outputs.keys().map(String::as_str).collect();
                println!("{}: {}", m.stage, outputs.join(" "));
            }
            log::info!("artifacts in {}", out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
