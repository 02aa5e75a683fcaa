//! Experiment harness: three-way method comparisons on one scenario and
//! the problem-size × thread-count scaling matrix, reported as
//! plot-ready CSV plus a run manifest.

use crate::admm::{run_price_response, AdmmConfig};
use crate::auction::{run_market_auction, AuctionConfig};
use crate::coopt::solve_cooptimization;
use crate::dispatch::{write_dispatch_csv, DispatchResult, Method};
use crate::runtime::Runtime;
use crate::scenario::{synthesize_scenario, Scenario, SynthError};
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

/// Axes of the scaling experiment. Every cell runs independently.
#[derive(Debug, Clone)]
pub struct ExperimentMatrix {
    pub methods: Vec<Method>,
    pub horizons: Vec<usize>,
    pub agent_counts: Vec<usize>,
    pub thread_counts: Vec<usize>,
    pub seed: u64,
}

/// Coordinator settings shared by every cell of a run.
#[derive(Debug, Clone, Default)]
pub struct BenchConfigs {
    pub admm: AdmmConfig,
    pub auction: AuctionConfig,
    pub threads: Option<usize>,
}

/// One executed cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub agents: usize,
    pub horizon: usize,
    pub threads: usize,
    pub seed: u64,
    /// "ok" or the failure message; failures never abort other cells.
    pub status: String,
    pub cost: Option<f64>,
    pub wall: Duration,
    pub iterations: usize,
    pub solve_count: usize,
    pub converged: bool,
    /// Wall time relative to the same method's smallest instance.
    pub normalized_runtime: Option<f64>,
    /// Price series CSV, when per-cell output was requested.
    pub price_file: Option<String>,
}

/// Report of a comparison or scaling run.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// Content hash of the scenario when all cells share one.
    pub scenario_fingerprint: Option<u64>,
    pub cells: Vec<CellResult>,
}

impl ComparisonReport {
    pub fn cost_of(&self, method: Method) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.status == "ok")
            .and_then(|c| c.cost)
    }

    pub fn cell(
        &self,
        method: Method,
        agents: usize,
        horizon: usize,
        threads: usize,
    ) -> Option<&CellResult> {
        self.cells.iter().find(|c| {
            c.method == method && c.agents == agents && c.horizon == horizon && c.threads == threads
        })
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no methods requested")]
    NoMethods,
    #[error("experiment matrix axis `{0}` is empty")]
    EmptyAxis(&'static str),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("failed to write `{path}`: {message}")]
    Write { path: String, message: String },
}

/// Runs one method on a scenario. Wall time covers the coordinator call
/// only.
pub fn run_method(
    scenario: &Scenario,
    method: Method,
    cfg: &BenchConfigs,
) -> Result<DispatchResult, String> {
    match method {
        Method::Coopt => solve_cooptimization(scenario).map_err(|e| e.to_string()),
        Method::PriceResponse => {
            let runtime = Runtime::new(cfg.threads);
            run_price_response(scenario, &cfg.admm, &runtime).map_err(|e| e.to_string())
        }
        Method::MarketAuction => {
            let runtime = Runtime::new(cfg.threads);
            let mut auction_cfg = cfg.auction.clone();
            auction_cfg.lookahead = auction_cfg.lookahead.min(scenario.horizon);
            run_market_auction(scenario, &auction_cfg, &runtime).map_err(|e| e.to_string())
        }
    }
}

fn record_cell(
    method: Method,
    agents: usize,
    horizon: usize,
    threads: usize,
    seed: u64,
    outcome: &Result<DispatchResult, String>,
) -> CellResult {
    match outcome {
        Ok(r) => CellResult {
            method,
            agents,
            horizon,
            threads,
            seed,
            status: "ok".into(),
            cost: Some(r.total_cost),
            wall: r.diagnostics.wall_time,
            iterations: r.diagnostics.iterations,
            solve_count: r.diagnostics.solve_count,
            converged: r.diagnostics.converged,
            normalized_runtime: None,
            price_file: None,
        },
        Err(message) => CellResult {
            method,
            agents,
            horizon,
            threads,
            seed,
            status: message.clone(),
            cost: None,
            wall: Duration::ZERO,
            iterations: 0,
            solve_count: 0,
            converged: false,
            normalized_runtime: None,
            price_file: None,
        },
    }
}

/// Runs the requested methods on one scenario and optionally writes the
/// per-method dispatch CSVs under `out`.
pub fn run_comparison(
    scenario: &Scenario,
    methods: &[Method],
    cfg: &BenchConfigs,
    out: Option<&Path>,
) -> Result<ComparisonReport, BenchError> {
    if methods.is_empty() {
        return Err(BenchError::NoMethods);
    }
    let threads = cfg
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut cells = Vec::new();
    for method in methods {
        let outcome = run_method(scenario, *method, cfg);
        let mut cell = record_cell(
            *method,
            scenario.agent_count(),
            scenario.horizon,
            threads,
            0,
            &outcome,
        );
        if let (Ok(result), Some(dir)) = (&outcome, out) {
            let cell_dir = dir.join(method.to_string());
            write_dispatch_csv(result, scenario, &cell_dir).map_err(|e| BenchError::Write {
                path: cell_dir.display().to_string(),
                message: e.to_string(),
            })?;
            cell.price_file = Some(format!("{method}/prices.csv"));
        }
        cells.push(cell);
    }
    Ok(ComparisonReport {
        scenario_fingerprint: Some(scenario.fingerprint()),
        cells,
    })
}

/// Executes every cell of the matrix, synthesizing one scenario per
/// (agents, horizon, seed) and normalizing each method's runtime by its
/// own smallest instance within the same thread count.
pub fn run_scaling_matrix(
    matrix: &ExperimentMatrix,
    cfg: &BenchConfigs,
) -> Result<ComparisonReport, BenchError> {
    if matrix.methods.is_empty() {
        return Err(BenchError::NoMethods);
    }
    if matrix.horizons.is_empty() {
        return Err(BenchError::EmptyAxis("horizons"));
    }
    if matrix.agent_counts.is_empty() {
        return Err(BenchError::EmptyAxis("agents"));
    }
    if matrix.thread_counts.is_empty() {
        return Err(BenchError::EmptyAxis("threads"));
    }

    let mut cells = Vec::new();
    for &agents in &matrix.agent_counts {
        for &horizon in &matrix.horizons {
            let scenario = synthesize_scenario(agents, horizon, matrix.seed)?;
            for &threads in &matrix.thread_counts {
                let cell_cfg = BenchConfigs {
                    threads: Some(threads),
                    ..cfg.clone()
                };
                for method in &matrix.methods {
                    let outcome = run_method(&scenario, *method, &cell_cfg);
                    cells.push(record_cell(
                        *method,
                        agents,
                        horizon,
                        threads,
                        matrix.seed,
                        &outcome,
                    ));
                }
            }
        }
    }

    // Normalize per (method, threads) against the smallest instance.
    let base_agents = *matrix.agent_counts.iter().min().unwrap();
    let base_horizon = *matrix.horizons.iter().min().unwrap();
    for i in 0..cells.len() {
        if cells[i].status != "ok" {
            continue;
        }
        let baseline = cells
            .iter()
            .find(|c| {
                c.method == cells[i].method
                    && c.threads == cells[i].threads
                    && c.agents == base_agents
                    && c.horizon == base_horizon
                    && c.status == "ok"
            })
            .map(|c| c.wall);
        if let Some(base) = baseline {
            if base > Duration::ZERO {
                cells[i].normalized_runtime =
                    Some(cells[i].wall.as_secs_f64() / base.as_secs_f64());
            }
        }
    }

    Ok(ComparisonReport {
        scenario_fingerprint: None,
        cells,
    })
}

/// Writes a report as one CSV row per cell.
pub fn write_report_csv(report: &ComparisonReport, path: &Path) -> Result<(), BenchError> {
    let to_err = |message: String| BenchError::Write {
        path: path.display().to_string(),
        message,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
    w.write_record([
        "method",
        "agents",
        "horizon",
        "threads",
        "seed",
        "status",
        "cost",
        "wall_ms",
        "iterations",
        "solve_count",
        "converged",
        "normalized_runtime",
        "price_file",
        "scenario_fingerprint",
    ])
    .map_err(|e| to_err(e.to_string()))?;
    for c in &report.cells {
        w.write_record([
            c.method.to_string(),
            c.agents.to_string(),
            c.horizon.to_string(),
            c.threads.to_string(),
            c.seed.to_string(),
            c.status.clone(),
            c.cost.map_or(String::new(), |v| format!("{v}")),
            format!("{:.3}", c.wall.as_secs_f64() * 1e3),
            c.iterations.to_string(),
            c.solve_count.to_string(),
            c.converged.to_string(),
            c.normalized_runtime
                .map_or(String::new(), |v| format!("{v:.4}")),
            c.price_file.clone().unwrap_or_default(),
            report
                .scenario_fingerprint
                .map_or(String::new(), |f| format!("{f:016x}")),
        ])
        .map_err(|e| to_err(e.to_string()))?;
    }
    w.flush().map_err(|e| to_err(e.to_string()))?;
    Ok(())
}

/// Writes the full run configuration as `key = value` lines.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<(), BenchError> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| BenchError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Standard manifest entries for a configuration.
pub fn manifest_entries(
    command: &str,
    scenario: Option<&PathBuf>,
    cfg: &BenchConfigs,
    extra: &[(String, String)],
) -> Vec<(String, String)> {
    let mut entries = vec![
        ("command".to_string(), command.to_string()),
        (
            "threads".to_string(),
            cfg.threads.map_or("auto".into(), |t| t.to_string()),
        ),
        ("admm.rho0".to_string(), cfg.admm.rho0.to_string()),
        (
            "admm.primal_tol".to_string(),
            cfg.admm.primal_tol.to_string(),
        ),
        ("admm.dual_tol".to_string(), cfg.admm.dual_tol.to_string()),
        ("admm.max_iters".to_string(), cfg.admm.max_iters.to_string()),
        (
            "auction.lookahead".to_string(),
            cfg.auction.lookahead.to_string(),
        ),
        (
            "auction.clearing_window".to_string(),
            cfg.auction.clearing_window.to_string(),
        ),
        (
            "auction.opportunity_cost_divides".to_string(),
            cfg.auction.opportunity_cost_divides.to_string(),
        ),
    ];
    if let Some(path) = scenario {
        entries.push(("scenario".to_string(), path.display().to_string()));
    }
    entries.extend_from_slice(extra);
    entries
}
