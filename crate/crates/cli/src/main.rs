use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dghm::experiment::{
    cmd_ablate, cmd_compare, cmd_export_figs, cmd_gen, cmd_split, cmd_sweep_eta, cmd_train, read_runs_csv,
    summarize, ExperimentConfig, GridOutput, OutputDir,
};
use dghm::Error;

#[derive(Parser, Debug)]
#[command(name = "dghm", version, about = "Partial-annotation detection experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Corpus seed for `gen`, run seed for `train`, sole seed for grids.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for grid commands.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Write the fold assignment.
    Split,
    /// Train one model and export its log and histograms.
    Train,
    /// Compare classification losses.
    Compare,
    /// Sweep the outlier factors and threshold.
    Ablate,
    /// Sweep the missing-annotation ratio.
    SweepEta,
    /// Export figure data from a finished `train` output.
    ExportFigs {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Validate a config and, optionally, a per-run results CSV.
    Check {
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Gen => cfg.corpus.seed = seed,
            Command::Train => {}
            _ => cfg.seeds = vec![seed],
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_grid(grid: &GridOutput) {
    for (stem, records, summary) in &grid.tables {
        log::info!("{stem}: {} runs", records.len());
        for row in summary {
            let froc = row.stat("froc").map(|s| s.mean).unwrap_or(f64::NAN);
            println!("{stem}\t{}\tfroc={froc:.4}", row.key);
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let out = OutputDir::new(&cli.out, cli.force);
    let jobs = cli.jobs.max(1);
    match &cli.command {
        Command::Gen => {
            let corpus = cmd_gen(&cfg, &out)?;
            println!("{} scenes written to {}", corpus.scenes.len(), out.root.display());
        }
        Command::Split => {
            cmd_split(&cfg, &out)?;
        }
        Command::Train => {
            let seed = cli.seed.unwrap_or(cfg.seeds[0]);
            let outcome = cmd_train(&cfg, seed, &out)?;
            let r = &outcome.report;
            println!(
                "froc={:.4} recall={:.4} precision={:.4} t_recall={:.4} r_recall={:.4}",
                r.froc, r.recall, r.precision, r.t_recall, r.r_recall
            );
        }
        Command::Compare => report_grid(&cmd_compare(&cfg, jobs, &out)?),
        Command::Ablate => report_grid(&cmd_ablate(&cfg, jobs, &out)?),
        Command::SweepEta => report_grid(&cmd_sweep_eta(&cfg, jobs, &out)?),
        Command::ExportFigs { run_dir } => cmd_export_figs(&cfg, run_dir, &out)?,
        Command::Check { runs } => {
            if let Some(path) = runs {
                let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let records = read_runs_csv(std::io::BufReader::new(file), &path.display().to_string())?;
                let rows = summarize(&records)?;
                println!("{} runs in {} groups", records.len(), rows.len());
            }
            println!("config ok, hash {}", cfg.hash());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Divergence { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
