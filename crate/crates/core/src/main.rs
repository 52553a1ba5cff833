//! `scbc` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scbc::cli::{self, CliError, SynthesisView};
use scbc::config::RunConfig;
use scbc::sdpsolve::SolverOptions;

#[derive(Parser)]
#[command(name = "scbc", version, about = "Data-driven stochastic control barrier certificates")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the open-loop experiment and store the trajectory batch.
    Collect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a barrier certificate and controller from a stored batch.
    Certify {
        #[arg(long)]
        config: PathBuf,
        /// Batch directory; defaults to `<out>/batch`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a certificate against the true model.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Certificate file; defaults to `<out>/certificate.json`.
        #[arg(long)]
        certificate: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plot-ready data files.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        certificate: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        trajectories: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn setup(config: &Path, out: Option<&Path>) -> Result<(RunConfig, scbc::config::Resolved, PathBuf), CliError> {
    let (cfg, base) = RunConfig::load(config)?;
    let res = cfg.resolve(&base)?;
    let dir = cli::output_dir(out, cfg.output.dir.as_deref(), &base);
    Ok((cfg, res, dir))
}

fn run(args: Args) -> Result<(), CliError> {
    match args.command {
        Command::Collect { config, out } => {
            let (_, res, dir) = setup(&config, out.as_deref())?;
            let s = cli::cmd_collect(&res, &dir.join("batch"))?;
            println!("realizations {} horizon {}", s.realizations, s.horizon);
            println!("per-step rank {:?} of {} rows, stacked rank {}", s.per_step_rank, s.regressor_rows, s.stacked_rank);
            if let Some(w) = &s.rank_warning {
                println!("warning: {w}");
            }
            if let Some(b) = s.beta2bar {
                println!("per-step confidence complement {b:.6e}");
            }
            println!("batch {}", s.batch_hash);
        }
        Command::Certify { config, data, out } => {
            let (cfg, res, dir) = setup(&config, out.as_deref())?;
            let batch = cli::read_batch(&data.unwrap_or_else(|| dir.join("batch")))?;
            let solver = SolverOptions {
                tol: cfg.synthesis.tol,
                max_iter: cfg.synthesis.max_iter,
                ..SolverOptions::default()
            };
            let view = SynthesisView::new(&res, cfg.synthesis.kappas.clone(), cfg.synthesis.rhos.clone(), solver);
            match cli::cmd_certify(&view, &batch, &dir) {
                Ok(r) => print!("{}", cli::render_certify(&r)),
                Err(e) => {
                    if let Ok(text) = std::fs::read_to_string(dir.join("certify_report.txt")) {
                        print!("{text}");
                    }
                    return Err(e);
                }
            }
        }
        Command::Verify { config, certificate, runs, out } => {
            let (cfg, res, dir) = setup(&config, out.as_deref())?;
            let cert = cli::load_certificate(&certificate.unwrap_or_else(|| dir.join("certificate.json")), &res)?;
            let runs = runs.unwrap_or(cfg.verify.runs);
            let seed = cfg.master_seed()?.wrapping_add(cfg.verify.seed);
            match cli::cmd_verify(&res, &cert, cfg.verify.grid, runs, seed, &dir) {
                Ok(r) => println!("verification passed: {}", serde_json::to_string(&r).unwrap_or_default()),
                Err(CliError::Verification(r)) => {
                    println!("verification failed: {}", serde_json::to_string(&r).unwrap_or_default());
                    return Err(CliError::Verification(r));
                }
                Err(e) => return Err(e),
            }
        }
        Command::Report { config, certificate, data, trajectories, out } => {
            let (cfg, res, dir) = setup(&config, out.as_deref())?;
            let cert_path = certificate.unwrap_or_else(|| dir.join("certificate.json"));
            let cert = if cert_path.exists() { Some(cli::load_certificate(&cert_path, &res)?) } else { None };
            let batch = match data {
                Some(d) => Some(cli::read_batch(&d)?),
                None => None,
            };
            let entries = cli::cmd_report(&res, cert.as_ref(), batch.as_ref(), trajectories, cfg.master_seed()?, &dir.join("report"))?;
            for e in entries {
                println!("{}  {}  {}", e.sha256, e.file, e.element);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
