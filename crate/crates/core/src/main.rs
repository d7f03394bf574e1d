use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bracketflow::experiment::HsStudyConfig;
use bracketflow::{hs_truncation_study, reproduce, run, ExperimentConfig, FigureId, GeneratorKind};

#[derive(Parser)]
#[command(name = "bracketflow", version, about = "Isospectral bracket flows on symmetric matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a built-in d = 5 experiment and check it.
    Reproduce {
        figure_id: FigureId,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Limit diagonals of growing truncations of beta^max(i,j).
    HsStudy {
        #[arg(long)]
        beta: f64,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        sizes: Vec<usize>,
        #[arg(long, default_value = "toda")]
        generator: GeneratorKind,
        #[arg(long, default_value_t = 400.0)]
        t_end: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(err: bracketflow::ExperimentError) -> ExitCode {
    eprintln!("error: {err}");
    let mut source = std::error::Error::source(&err);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let config = match ExperimentConfig::from_path(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run(&config, out.as_deref()) {
                Ok(m) => {
                    println!("wrote {}", m.files.manifest.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Reproduce { figure_id, out } => match reproduce(figure_id, out.as_deref()) {
            Ok(m) => {
                for c in &m.checks {
                    let status = match (c.passed, c.fatal) {
                        (true, _) => "PASS",
                        (false, true) => "FAIL",
                        (false, false) => "INFO",
                    };
                    println!("{status} {}: {}", c.name, c.detail);
                }
                println!("wrote {}", m.files.manifest.display());
                if m.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(4)
                }
            }
            Err(e) => fail(e),
        },
        Command::HsStudy {
            beta,
            sizes,
            generator,
            t_end,
            out,
        } => {
            let config = HsStudyConfig {
                t_end,
                ..HsStudyConfig::new(beta, sizes, generator)
            };
            match hs_truncation_study(&config, out.as_deref()) {
                Ok(m) => {
                    if let Some(report) = &m.hs_study {
                        for t in &report.truncations {
                            println!("N = {:>3}: {:?}", t.n, t.leading_limit);
                        }
                        println!("gap ratios: {:?}", report.gap_ratios);
                    }
                    println!("wrote {}", m.files.manifest.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
