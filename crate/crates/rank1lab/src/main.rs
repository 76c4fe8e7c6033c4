use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rank1lab::config::{check_preconditions, ExperimentConfig};
use rank1lab::runner::{list_presets, run_to_dir};

#[derive(Parser)]
#[command(
    name = "rank1lab",
    about = "Exact-arithmetic experiments on cutting-and-stacking constructions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config and write certified reports.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a config: print every precondition inequality and exit.
    Check { config: PathBuf },
    /// List the built-in schedule presets.
    Presets,
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    ExperimentConfig::from_json(&text).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out } => match load(&config) {
            Ok(cfg) => {
                let out_dir = out
                    .or_else(|| cfg.out.clone())
                    .unwrap_or_else(|| PathBuf::from("rank1lab-out"));
                run_to_dir(&cfg, &out_dir)
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Command::Check { config } => match load(&config) {
            Ok(cfg) => match check_preconditions(&cfg) {
                Ok(checks) => {
                    let mut ok = true;
                    if checks.is_empty() {
                        println!("no precondition inequalities for this experiment");
                    }
                    for c in checks {
                        println!(
                            "[{}] {}  ({})",
                            if c.passed { "PASS" } else { "FAIL" },
                            c.form,
                            c.detail
                        );
                        ok &= c.passed;
                    }
                    // Schedule shape and buildability.
                    match cfg.schedule() {
                        Ok(s) => {
                            println!("[PASS] schedule well-formed ({} stages)", s.horizon());
                        }
                        Err(e) => {
                            println!("[FAIL] schedule: {e}");
                            ok = false;
                        }
                    }
                    if ok {
                        0
                    } else {
                        2
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            },
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Command::Presets => {
            print!("{}", list_presets());
            0
        }
    };
    ExitCode::from(code as u8)
}
