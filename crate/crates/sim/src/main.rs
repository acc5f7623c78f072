use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use eocd_sim::config::{Scheme, SimConfig};
use eocd_sim::{metrics, oracle, runner};
use std::io::Write;
use std::path::PathBuf;

/// Chain-clustered federated learning simulator.
#[derive(Parser)]
#[command(name = "eocd-sim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured scheme and seed, writing CSVs and a summary.
    Run {
        config: PathBuf,
        /// Output directory. The EOCD_SIM_OUTDIR environment variable
        /// overrides this when set.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the number of seeds.
        #[arg(long)]
        seeds: Option<u64>,
        /// Override the scheme list (comma separated: eocd,star,hier).
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<Scheme>>,
        /// Override the number of global iterations.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Parse and validate a config file, printing the resolved values.
    Validate { config: PathBuf },
    /// Run the brute-force oracle suites against the closed-form pieces.
    Oracle {
        #[arg(long, default_value_t = 200)]
        graphs: usize,
        #[arg(long, default_value_t = 1000)]
        tuples: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn main() {
    if let Err(err) = real_main() {
        // A closed stdout (`eocd-sim ... | head`) is not an error.
        if err
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
        {
            return;
        }
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seeds,
            schemes,
            rounds,
        } => {
            let mut cfg = SimConfig::load(&config)?;
            if let Some(seeds) = seeds {
                cfg.experiment.seeds = seeds;
            }
            if let Some(schemes) = schemes {
                cfg.experiment.schemes = schemes;
            }
            if let Some(rounds) = rounds {
                cfg.trainer.max_global_iters = rounds;
            }
            cfg.validate()?;
            let out_dir = match std::env::var_os("EOCD_SIM_OUTDIR") {
                Some(dir) => PathBuf::from(dir),
                None => out,
            };
            match runner::run_experiment(&cfg, &out_dir) {
                Ok(summaries) => {
                    for (scheme, s) in &summaries {
                        writeln!(
                            stdout,
                            "{scheme}: {} seeds, final acc {:.4} ± {:.4}, energy {:.4} J, \
                             time {:.3} s, scheduled {:.1}, violations {}",
                            s.seeds,
                            s.final_acc.mean,
                            s.final_acc.std,
                            s.energy_cum_j.mean,
                            s.time_cum_s.mean,
                            s.scheduled.mean,
                            s.violations_total
                        )?;
                    }
                    writeln!(stdout, "outputs in {}", out_dir.display())?;
                    Ok(())
                }
                Err(err) => {
                    metrics::write_failure_marker(&out_dir, &format!("{err:#}"));
                    Err(err).context("batch aborted, partial outputs kept")
                }
            }
        }
        Command::Validate { config } => {
            let cfg = SimConfig::load(&config)?;
            let text = toml::to_string_pretty(&cfg).context("serializing resolved config")?;
            writeln!(stdout, "{text}")?;
            Ok(())
        }
        Command::Oracle {
            graphs,
            tuples,
            seed,
        } => {
            let mwis = oracle::mwis_oracle_suite(graphs, seed);
            writeln!(
                stdout,
                "block scheduling: {} graphs, mean weight ratio {:.4}, worst {:.4}, {} failures",
                mwis.graphs,
                mwis.mean_ratio,
                mwis.worst_ratio,
                mwis.failures.len()
            )?;
            for f in mwis.failures.iter().take(5) {
                writeln!(stdout, "  {f}")?;
            }
            let clock = oracle::clock_oracle_suite(tuples, seed);
            writeln!(
                stdout,
                "clock allocation: {} tuples, worst gap {:.3} grid steps, {} failures",
                clock.tuples,
                clock.worst_gap_steps,
                clock.failures.len()
            )?;
            for f in clock.failures.iter().take(5) {
                writeln!(stdout, "  {f}")?;
            }
            if !mwis.failures.is_empty() || !clock.failures.is_empty() {
                bail!("oracle suites found disagreements");
            }
            Ok(())
        }
    }
}
