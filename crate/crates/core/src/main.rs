use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adcbound::config::RunConfig;
use adcbound::output::read_values;
use adcbound::pipeline::{self, Diagnostic, EXIT_CONFIG, EXIT_OK, EXIT_OTHER};
use adcbound::Error;

/// Worker threads for the value-iteration sweeps; defaults to all cores.
const THREADS_VAR: &str = "ADCBOUND_THREADS";

#[derive(Parser)]
#[command(name = "adcbound", version, about = "Certified lower bounds on ADC performance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for the largest certified gamma and write all artifacts.
    Solve {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Play the configured adversaries against a stored input law.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        law: PathBuf,
        /// Certified gamma to check the simulated averages against.
        #[arg(long)]
        gamma: Option<f64>,
        /// Value file whose maximum sets the dissipation floor.
        #[arg(long)]
        value: Option<PathBuf>,
        /// Directory for per-step traces.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-certify a stored value function.
    Verify {
        config: PathBuf,
        #[arg(long)]
        value: PathBuf,
        #[arg(long)]
        gamma: f64,
        /// Extra slack subtracted from gamma before checking.
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
    },
}

fn diagnose(code: i32, err: &Error) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "exit_code": code, "error": Diagnostic::of(err) })
    );
    ExitCode::from(code as u8)
}

fn load(path: &std::path::Path) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| diagnose(EXIT_CONFIG, &e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var(THREADS_VAR) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the worker pool: {e}");
                }
            }
            _ => {
                eprintln!("{THREADS_VAR} must be a positive integer, got {n:?}");
                return ExitCode::from(EXIT_CONFIG as u8);
            }
        }
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { config, out } => {
            let result = pipeline::run(&config, &out);
            match &result.error {
                Some(d) => eprintln!("{}", serde_json::json!({ "exit_code": result.exit_code, "error": d })),
                None => println!(
                    "gamma_cert = {:.16e} (probe {}, eta {:e}, {} tiles); summary at {}",
                    result.gamma_cert.unwrap_or(f64::NAN),
                    result.gamma_probe.unwrap_or(f64::NAN),
                    result.eta.unwrap_or(f64::NAN),
                    result.region.as_ref().map_or(0, |r| r.tiles),
                    out.join("summary.json").display()
                ),
            }
            ExitCode::from(result.exit_code as u8)
        }
        Command::Simulate {
            config,
            law,
            gamma,
            value,
            out,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let vmax = match &value {
                Some(p) => match cfg.model.build().and_then(|m| read_values(p, m.dim())) {
                    Ok((_, v)) => v.into_iter().fold(0.0, f64::max),
                    Err(e) => return diagnose(EXIT_OTHER, &e),
                },
                None => 0.0,
            };
            match pipeline::simulate(&cfg, &law, gamma, vmax, out.as_deref()) {
                Ok(rows) => {
                    println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
                    let ok = rows.iter().all(|r| r.consistent != Some(false));
                    ExitCode::from(if ok { EXIT_OK } else { EXIT_OTHER } as u8)
                }
                Err(e @ (Error::Config(_) | Error::InvalidAlphabet(_))) => diagnose(EXIT_CONFIG, &e),
                Err(e) => diagnose(EXIT_OTHER, &e),
            }
        }
        Command::Verify {
            config,
            value,
            gamma,
            eta,
        } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match pipeline::verify(&cfg, &value, gamma, eta) {
                Ok(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                    ExitCode::from(if report.passed { EXIT_OK } else { EXIT_OTHER } as u8)
                }
                Err(e @ (Error::Config(_) | Error::InvalidAlphabet(_))) => diagnose(EXIT_CONFIG, &e),
                Err(e) => diagnose(EXIT_OTHER, &e),
            }
        }
    }
}
