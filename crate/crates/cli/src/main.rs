use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use satmle::dgp::{generate_dataset, Dataset, DgpConfig};
use satmle::estimators::EstimatorKind;
use satmle::harness::{self, Block, BlockOverrides};
use satmle::nuisance::NuisanceConfig;
use satmle::pipeline::{self, InferenceOptions, PipelineConfig, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "satmle", version, about = "Surrogate-assisted TMLE: simulation blocks and single-dataset estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation block and write its report as CSV.
    Run {
        #[arg(long, value_parser = parse_block)]
        block: Block,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Replicates for the sandwich metrics.
        #[arg(long)]
        r_sandwich: Option<usize>,
        /// Replicates that also run the jackknife (the first ones).
        #[arg(long)]
        r_jackknife: Option<usize>,
        /// Cluster count for blocks I, II and IV.
        #[arg(long)]
        j: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        /// 500 sandwich and 200 jackknife replicates unless overridden.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Generate one dataset and write it as CSV.
    Simulate {
        #[arg(long, allow_hyphen_values = true)]
        alpha1: f64,
        #[arg(long, allow_hyphen_values = true)]
        gamma0: f64,
        #[arg(long)]
        j: usize,
        #[arg(long, default_value_t = 20)]
        m: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the treatment effect on a dataset CSV.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_config)]
        config: NuisanceConfig,
        #[arg(long, value_parser = parse_estimator)]
        estimator: EstimatorKind,
        #[arg(long)]
        jackknife: bool,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
}

fn parse_block(s: &str) -> Result<Block, String> {
    s.parse().map_err(|e: satmle::Error| e.to_string())
}

fn parse_config(s: &str) -> Result<NuisanceConfig, String> {
    s.parse().map_err(|e: satmle::Error| e.to_string())
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    s.parse().map_err(|e: satmle::Error| e.to_string())
}

enum Outcome {
    Complete,
    Partial,
}

fn run(cli: Cli) -> satmle::Result<Outcome> {
    match cli.command {
        Command::Run {
            block,
            out,
            seed,
            r_sandwich,
            r_jackknife,
            j,
            threads,
            paper_scale,
        } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| satmle::Error::InvalidConfig(e.to_string()))?;
            }
            let mut o = BlockOverrides {
                seed,
                n_clusters: j,
                ..BlockOverrides::default()
            };
            if paper_scale {
                o = o.full_scale();
            }
            o.r_sandwich = r_sandwich.unwrap_or(o.r_sandwich);
            o.r_jackknife = r_jackknife.unwrap_or(o.r_jackknife.min(o.r_sandwich));
            let report = harness::run_block(block, &o)?;
            harness::write_report(&report, &out)?;
            print!("{}", harness::summary_table(&report));
            Ok(if report.is_partial() { Outcome::Partial } else { Outcome::Complete })
        }
        Command::Simulate {
            alpha1,
            gamma0,
            j,
            m,
            seed,
            out,
        } => {
            let cfg = DgpConfig {
                cluster_size: m,
                ..DgpConfig::new(alpha1, gamma0, j, seed)
            };
            let data = generate_dataset(&cfg)?;
            data.write_csv(&out)?;
            println!(
                "wrote {} rows in {} clusters to {} (censoring rate {:.3})",
                data.len(),
                data.n_clusters(),
                out.display(),
                data.censoring_rate()
            );
            Ok(Outcome::Complete)
        }
        Command::Estimate {
            data,
            config,
            estimator,
            jackknife,
            seed,
        } => {
            let dataset = Dataset::read_csv(&data)?;
            let est = pipeline::estimate(
                &dataset,
                &PipelineConfig::new(config, seed),
                None,
                InferenceOptions {
                    jackknife,
                    alpha: 0.05,
                },
            )?;
            let r = est.result(estimator).expect("every estimator is computed");
            println!("estimator  {}", r.estimator);
            println!("config     {config}");
            println!("clusters   {}", r.n_clusters);
            println!("psi_hat    {:.6}", r.psi_hat);
            println!("v_sand     {:.6e}", r.v_sand);
            println!("ci_sand    [{:.6}, {:.6}]", r.ci_sand.0, r.ci_sand.1);
            if let (Some(v), Some(ci)) = (r.v_jk, r.ci_jk) {
                println!("v_jk       {v:.6e}");
                println!("ci_jk      [{:.6}, {:.6}]", ci.0, ci.1);
            }
            if let Some(rho) = r.rho {
                println!("rho        {rho:.4}");
            }
            if r.flags.fallback_used {
                println!("note       a fluctuation used the one-step fallback");
            }
            if let Some(e) = &r.flags.loo_error {
                eprintln!("jackknife: {} of {} refits failed: {e}", r.flags.loo_failures, r.n_clusters);
                return Ok(Outcome::Partial);
            }
            Ok(Outcome::Complete)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
