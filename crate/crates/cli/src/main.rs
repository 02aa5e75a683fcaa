//! Command-line front end for the multi-carrier flexibility scheduling
//! simulator: single-method runs, three-way comparisons, the scaling
//! matrix, and synthetic scenario generation.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mies_core::bench::{
    manifest_entries, run_comparison, run_method, run_scaling_matrix, write_manifest,
    write_report_csv, BenchConfigs, ExperimentMatrix,
};
use mies_core::dispatch::{write_dispatch_csv, Method};
use mies_core::scenario::{load_scenario, save_scenario, synthesize_scenario, Scenario};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mies",
    about = "Flexibility scheduling in multi-carrier energy systems under \
             centralized, price-response, and market-auction coordination"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one coordination method on a scenario file.
    Run {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        scenario: PathBuf,
        /// Initial penalty parameter (admm).
        #[arg(long)]
        rho: Option<f64>,
        /// Primal and dual residual tolerance (admm).
        #[arg(long)]
        tol: Option<f64>,
        /// Iteration cap (admm).
        #[arg(long)]
        max_iters: Option<usize>,
        /// Satellite look-ahead horizon in hours (auction).
        #[arg(long)]
        lookahead: Option<usize>,
        /// Market clearing window in hours (auction; only 1 supported).
        #[arg(long)]
        clearing_window: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three methods on the identical scenario and report costs.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute the scaling matrix over synthesized scenarios.
    Scale {
        /// Agent counts, comma separated (e.g. 30,60,90).
        #[arg(long, value_delimiter = ',', default_values_t = vec![30])]
        agents: Vec<usize>,
        /// Horizons in hours, comma separated (e.g. 24,72,168).
        #[arg(long, value_delimiter = ',', default_values_t = vec![24, 72, 168])]
        horizons: Vec<usize>,
        /// Methods, comma separated subset of coopt,admm,auction.
        #[arg(long, value_delimiter = ',', default_values_t = vec![
            Method::Coopt, Method::PriceResponse, Method::MarketAuction
        ])]
        methods: Vec<Method>,
        /// Thread counts, comma separated (e.g. 1,16).
        #[arg(long, value_delimiter = ',')]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scenario file.
    Synth {
        #[arg(long)]
        agents: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            method,
            scenario,
            rho,
            tol,
            max_iters,
            lookahead,
            clearing_window,
            threads,
            out,
        } => {
            let s = load_scenario(&scenario)
                .with_context(|| format!("loading {}", scenario.display()))?;
            let mut cfg = BenchConfigs {
                threads,
                ..BenchConfigs::default()
            };
            if let Some(rho) = rho {
                cfg.admm.rho0 = rho;
            }
            if let Some(tol) = tol {
                cfg.admm.primal_tol = tol;
                cfg.admm.dual_tol = tol;
            }
            if let Some(k) = max_iters {
                cfg.admm.max_iters = k;
            }
            if let Some(h) = lookahead {
                cfg.auction.lookahead = h;
            }
            if let Some(w) = clearing_window {
                cfg.auction.clearing_window = w;
            }
            if method == Method::MarketAuction && cfg.auction.clearing_window != 1 {
                bail!(
                    "clearing windows longer than 1 h are reserved for future use \
                     (got {} h); rerun with --clearing-window 1",
                    cfg.auction.clearing_window
                );
            }
            std::fs::create_dir_all(&out)?;
            let result = run_method(&s, method, &cfg).map_err(anyhow::Error::msg)?;
            write_dispatch_csv(&result, &s, &out)?;
            write_manifest(
                &out.join("manifest.txt"),
                &manifest_entries(
                    &format!("run --method {method}"),
                    Some(&scenario),
                    &cfg,
                    &[scenario_entry(&s)],
                ),
            )?;
            println!(
                "{method}: cost {:.2} €, wall {:.1} ms, {} solves{}",
                result.total_cost,
                result.diagnostics.wall_time.as_secs_f64() * 1e3,
                result.diagnostics.solve_count,
                if result.diagnostics.converged {
                    String::new()
                } else {
                    format!(
                        ", NOT converged after {} iterations",
                        result.diagnostics.iterations
                    )
                }
            );
            println!("outputs in {}", out.display());
        }
        Command::Compare {
            scenario,
            threads,
            out,
        } => {
            let s = load_scenario(&scenario)
                .with_context(|| format!("loading {}", scenario.display()))?;
            let cfg = BenchConfigs {
                threads,
                ..BenchConfigs::default()
            };
            std::fs::create_dir_all(&out)?;
            let methods = [Method::Coopt, Method::PriceResponse, Method::MarketAuction];
            let report = run_comparison(&s, &methods, &cfg, Some(&out))?;
            write_report_csv(&report, &out.join("comparison.csv"))?;
            write_manifest(
                &out.join("manifest.txt"),
                &manifest_entries("compare", Some(&scenario), &cfg, &[scenario_entry(&s)]),
            )?;
            for cell in &report.cells {
                match cell.cost {
                    Some(cost) => println!(
                        "{:<8} cost {cost:>14.2} €  wall {:>9.1} ms  status {}",
                        cell.method.to_string(),
                        cell.wall.as_secs_f64() * 1e3,
                        cell.status
                    ),
                    None => println!("{:<8} failed: {}", cell.method.to_string(), cell.status),
                }
            }
            println!("report in {}", out.join("comparison.csv").display());
        }
        Command::Scale {
            agents,
            horizons,
            methods,
            threads,
            seed,
            out,
        } => {
            let thread_counts = if threads.is_empty() {
                vec![std::thread::available_parallelism().map_or(1, |n| n.get())]
            } else {
                threads
            };
            let matrix = ExperimentMatrix {
                methods,
                horizons,
                agent_counts: agents,
                thread_counts,
                seed,
            };
            let cfg = BenchConfigs::default();
            std::fs::create_dir_all(&out)?;
            let report = run_scaling_matrix(&matrix, &cfg)?;
            write_report_csv(&report, &out.join("scaling.csv"))?;
            write_manifest(
                &out.join("manifest.txt"),
                &manifest_entries(
                    "scale",
                    None,
                    &cfg,
                    &[
                        ("agents".into(), format!("{:?}", matrix.agent_counts)),
                        ("horizons".into(), format!("{:?}", matrix.horizons)),
                        ("threads".into(), format!("{:?}", matrix.thread_counts)),
                        ("seed".into(), matrix.seed.to_string()),
                    ],
                ),
            )?;
            let ok = report.cells.iter().filter(|c| c.status == "ok").count();
            println!(
                "{} of {} cells ok; heat-map data in {}",
                ok,
                report.cells.len(),
                out.join("scaling.csv").display()
            );
        }
        Command::Synth {
            agents,
            horizon,
            seed,
            out,
        } => {
            let s = synthesize_scenario(agents, horizon, seed)?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            save_scenario(&s, &out)?;
            println!(
                "wrote {} ({} generators, {} prosumers, {} h)",
                out.display(),
                s.generators.len(),
                s.prosumers.len(),
                s.horizon
            );
        }
    }
    Ok(())
}

fn scenario_entry(s: &Scenario) -> (String, String) {
    (
        "scenario_fingerprint".to_string(),
        format!("{:016x}", s.fingerprint()),
    )
}
