use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kfcollapse::experiment::{
    cross_check, lyapunov_spectrum, parse_config, report_from_dir, run_experiment, write_cross_check, write_report,
    write_spectrum, ExperimentConfig, Manifest, CROSS_CHECK_STEPS,
};
use kfcollapse::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "kfcollapse", version, about = "Degenerate Kalman filter covariance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a suite, run the Lyapunov passes and filter runs, write all data files.
    Run(Common),
    /// Compare Riccati, closed-form and symplectic propagation step by step.
    CrossCheck(Common),
    /// Lyapunov exponents only.
    Lyapunov(Common),
    /// Re-derive rank and decay diagnostics from a run directory.
    Report {
        /// Directory written by `run`.
        dir: PathBuf,
        /// Output directory (default: DIR/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Obs {
    Dense,
    First,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat `key = value` file, or a `manifest.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// exp1 (autonomous), exp2 (non-autonomous) or exp3 (Lorenz-95).
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Rank of the first initial covariance, or `full`.
    #[arg(long)]
    rank: Option<String>,
    /// Rank of a second initial covariance, or `full`.
    #[arg(long)]
    rank2: Option<String>,
    #[arg(long, value_enum)]
    obs: Option<Obs>,
    /// Standard deviation of random propagator entries.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("suite", self.suite.clone());
        push("n", self.n.map(|v| v.to_string()));
        push("d", self.d.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("rank", self.rank.clone());
        push("rank2", self.rank2.clone());
        push(
            "obs",
            self.obs.map(|o| match o {
                Obs::Dense => "dense".to_string(),
                Obs::First => "first".to_string(),
            }),
        );
        push("scale", self.scale.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        pairs
    }
}

fn file_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let manifest = Manifest::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(manifest.config)
    } else {
        parse_config(&text)
    }
}

/// Defaults of the command, then the config file, then flags.
fn resolve(common: &Common, defaults: &[(&str, &str)]) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    if let Some(path) = &common.config {
        pairs.extend(file_pairs(path)?);
    }
    pairs.extend(common.overrides());
    ExperimentConfig::from_pairs(&pairs)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let config = resolve(&common, &[])?;
            let (exp, manifest) = run_experiment(&config)?;
            let s = &exp.summary;
            println!(
                "{} n={} d={} K={} seed={}: n0={}, terminal rank {} from rank {}; {} files in {}",
                s.suite.name(),
                s.n,
                s.d,
                s.steps,
                s.seed,
                s.classification.n0,
                s.runs[0].terminal_rank,
                s.runs[0].rank_p0,
                manifest.files.len(),
                config.out.display()
            );
        }
        Command::CrossCheck(common) => {
            let steps = CROSS_CHECK_STEPS.to_string();
            let config = resolve(&common, &[("n", "10"), ("d", "4"), ("steps", &steps)])?;
            let report = cross_check(&config)?;
            write_cross_check(&config, &report)?;
            println!(
                "max relative deviation {:.3e} over {} steps; dense closed form degrades at {}",
                report.max_deviation,
                config.steps,
                report.degraded_at.map_or("never".to_string(), |k| format!("k = {k}"))
            );
        }
        Command::Lyapunov(common) => {
            let config = resolve(&common, &[])?;
            let report = lyapunov_spectrum(&config)?;
            write_spectrum(&config, &report)?;
            let c = &report.classification;
            println!("n0 = {} ({} neutral) over {} steps", c.n0, c.neutral.len(), report.steps);
            for (i, l) in report.exponents.iter().enumerate() {
                println!("{:>3} {l:+.6e}", i + 1);
            }
        }
        Command::Report { dir, out } => {
            let (config, report) = report_from_dir(&dir)?;
            let out = out.unwrap_or_else(|| dir.join("report"));
            write_report(&config, &report, &out)?;
            println!(
                "n0 = {}, terminal rank {} from rank {} (rank law {}); {} decay fits in {}",
                report.n0,
                report.terminal_rank,
                report.rank_p0,
                if report.rank_law { "holds" } else { "fails" },
                report.decay.fits.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
