//! Iterative price-response coordinator: the coordinator broadcasts a
//! price series and the last system imbalance, every agent re-solves its
//! own dispatch in parallel, and prices and the penalty are updated from
//! the new imbalance until the primal and dual residuals both clear
//! their tolerances.
//!
//! The hourly imbalance steers the hourly price, so the imbalance is
//! kept per hour and only its mean absolute value is used for stopping
//! and penalty adaptation. After the loop, generators are re-dispatched
//! once against the prosumers' final committed consumption so the
//! returned dispatch is exactly balanced hour by hour.

use crate::agents::{
    add_generator_problem, add_prosumer_problem, build_generator_problem, merit_order_price,
    EnergyState, GeneratorObjective, ObjectiveMode, Penalty, Window,
};
use crate::coopt::system_cost;
use crate::dispatch::{Diagnostics, DispatchResult, Method, ProsumerDispatch, ResidualRow};
use crate::qp::{solve, Problem, QpError, Status};
use crate::runtime::{AgentFailure, CoupledAgent, Payload, RoundError, Runtime};
use crate::scenario::{Carrier, GeneratorSpec, ProsumerSpec, Scenario};
use std::time::Instant;
use thiserror::Error;

/// Penalty, tolerances, and iteration budget of the price-response loop.
#[derive(Debug, Clone)]
pub struct AdmmConfig {
    /// Initial penalty ρ₀ [€/MWh per MW].
    pub rho0: f64,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub max_iters: usize,
    /// Multiplier applied to ρ when the primal residual dominates.
    pub tau_incr: f64,
    /// Divisor applied to ρ when the dual residual dominates.
    pub tau_decr: f64,
    /// Dominance ratio triggering a penalty update.
    pub mu_ratio: f64,
    /// Rounds to wait before penalty adaptation starts; the first
    /// iterations carry a start-up transient in the dual residual that
    /// would otherwise shrink ρ permanently.
    pub adapt_warmup: usize,
    /// Clamp on the adapted penalty, as a multiple of ρ₀. Keeps the
    /// varying-penalty scheme inside its stable range.
    pub rho_min_factor: f64,
    pub rho_max_factor: f64,
    /// Flat initial price; defaults to the merit-order estimate at the
    /// mean inflexible electric demand.
    pub initial_price: Option<f64>,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            primal_tol: 0.1,
            dual_tol: 0.1,
            max_iters: 500,
            tau_incr: 2.0,
            tau_decr: 2.0,
            mu_ratio: 10.0,
            adapt_warmup: 5,
            rho_min_factor: 0.125,
            rho_max_factor: 2.0,
            initial_price: None,
        }
    }
}

/// Hourly system imbalance and its scalar aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct Imbalance {
    pub per_hour: Vec<f64>,
    /// Mean absolute hourly imbalance; the primal residual.
    pub mean_abs: f64,
}

/// Iteration state carried by the coordinator.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub iteration: usize,
    pub prices: Vec<f64>,
    pub rho: f64,
    pub imbalance: Imbalance,
    pub dual_residual: Option<f64>,
    pub prev_generator_dispatch: Vec<Vec<f64>>,
    pub prev_prosumer_net: Vec<Vec<f64>>,
}

/// I_t = (Σᵢ g_{i,t} + Σⱼ p_{j,t}) / (|N| + 1), per hour.
pub fn compute_imbalance(
    generator_dispatch: &[Vec<f64>],
    prosumer_net: &[Vec<f64>],
    agent_count: usize,
) -> Imbalance {
    let horizon = generator_dispatch
        .iter()
        .chain(prosumer_net.iter())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let scale = 1.0 / (agent_count as f64 + 1.0);
    let per_hour: Vec<f64> = (0..horizon)
        .map(|t| {
            let total: f64 = generator_dispatch.iter().map(|g| g[t]).sum::<f64>()
                + prosumer_net.iter().map(|p| p[t]).sum::<f64>();
            total * scale
        })
        .collect();
    let mean_abs = if per_hour.is_empty() {
        0.0
    } else {
        per_hour.iter().map(|i| i.abs()).sum::<f64>() / per_hour.len() as f64
    };
    Imbalance { per_hour, mean_abs }
}

/// λ'_t = λ_t − ρ·I_t. Excess demand (negative imbalance) raises the price.
pub fn update_price(prices: &[f64], rho: f64, imbalance: &[f64]) -> Vec<f64> {
    prices
        .iter()
        .zip(imbalance.iter())
        .map(|(l, i)| l - rho * i)
        .collect()
}

/// Dual residual: ρ-scaled 2-norms of the shift in agents' imbalance-
/// adjusted decisions between consecutive iterations, generators plus
/// prosumers.
pub fn compute_dual_residual(
    current_gen: &[Vec<f64>],
    prev_gen: &[Vec<f64>],
    current_pros: &[Vec<f64>],
    prev_pros: &[Vec<f64>],
    imbalance: &Imbalance,
    prev_imbalance: &Imbalance,
    rho: f64,
) -> f64 {
    let shift_norm = |cur: &[Vec<f64>], prev: &[Vec<f64>]| -> f64 {
        let mut sq = 0.0;
        for (c, p) in cur.iter().zip(prev.iter()) {
            for (t, (cv, pv)) in c.iter().zip(p.iter()).enumerate() {
                let d = (cv - imbalance.per_hour[t]) - (pv - prev_imbalance.per_hour[t]);
                sq += d * d;
            }
        }
        sq.sqrt()
    };
    rho * shift_norm(current_gen, prev_gen) + rho * shift_norm(current_pros, prev_pros)
}

/// Residual-balancing penalty update: grow ρ when the primal residual
/// dominates, shrink it when the dual residual dominates.
pub fn adapt_penalty(rho: f64, primal: f64, dual: f64, cfg: &AdmmConfig) -> f64 {
    if primal > cfg.mu_ratio * dual {
        rho * cfg.tau_incr
    } else if dual > cfg.mu_ratio * primal {
        rho / cfg.tau_decr
    } else {
        rho
    }
}

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error(transparent)]
    Round(#[from] RoundError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("balancing re-dispatch is {0:?}")]
    ReconciliationFailed(Status),
}

enum AgentKind<'a> {
    Generator(&'a GeneratorSpec),
    Prosumer(&'a ProsumerSpec),
}

struct AdmmAgent<'a> {
    kind: AgentKind<'a>,
    scenario: &'a Scenario,
    /// Own dispatch from the previous round (full horizon).
    prev: Option<Vec<f64>>,
    last_dispatch: Option<ProsumerDispatch>,
}

impl CoupledAgent for AdmmAgent<'_> {
    fn agent_id(&self) -> &str {
        match self.kind {
            AgentKind::Generator(g) => &g.id,
            AgentKind::Prosumer(p) => &p.id,
        }
    }
}

impl AdmmAgent<'_> {
    fn solve_round(
        &mut self,
        prices: &[f64],
        imbalance: Option<&[f64]>,
        rho: f64,
    ) -> Result<Vec<f64>, AgentFailure> {
        let window = Window::full(self.scenario);
        let penalty = match (&self.prev, imbalance) {
            (Some(prev), Some(imb)) => Some((prev.clone(), imb)),
            _ => None,
        };
        let fail = |e: &dyn std::fmt::Display| AgentFailure(e.to_string());
        let series = match self.kind {
            AgentKind::Generator(g) => {
                let pen = penalty.as_ref().map(|(prev, imb)| Penalty {
                    rho,
                    prev,
                    prev_imbalance: imb,
                });
                let (problem, vars) =
                    build_generator_problem(g, window, prices, pen).map_err(|e| fail(&e))?;
                let sol = solve(&problem).map_err(|e| fail(&e))?;
                if !sol.is_optimal() {
                    return Err(AgentFailure(format!(
                        "generator subproblem is {:?}",
                        sol.status
                    )));
                }
                vars.dispatch_series(&sol)
            }
            AgentKind::Prosumer(p) => {
                let mode = match penalty.as_ref() {
                    Some((prev, imb)) => ObjectiveMode::AdmmPenalty {
                        prices,
                        rho,
                        prev_net: prev,
                        prev_imbalance: imb,
                    },
                    None => ObjectiveMode::Forecast { prices },
                };
                let mut problem = Problem::new();
                let vars = add_prosumer_problem(
                    &mut problem,
                    self.scenario,
                    p,
                    window,
                    &EnergyState::initial(p),
                    mode,
                )
                .map_err(|e| fail(&e))?;
                let sol = solve(&problem).map_err(|e| fail(&e))?;
                if !sol.is_optimal() {
                    return Err(AgentFailure(format!(
                        "prosumer subproblem is {:?}",
                        sol.status
                    )));
                }
                self.last_dispatch = Some(ProsumerDispatch::from_solution(&sol, &vars));
                vars.net_power_series(&sol)
            }
        };
        self.prev = Some(series.clone());
        Ok(series)
    }
}

/// Runs the price-response loop on a scenario.
pub fn run_price_response(
    scenario: &Scenario,
    cfg: &AdmmConfig,
    runtime: &Runtime,
) -> Result<DispatchResult, AdmmError> {
    let started = Instant::now();
    let horizon = scenario.horizon;
    let n_gen = scenario.generators.len();
    let agent_count = scenario.agent_count();

    let initial_price = cfg.initial_price.unwrap_or_else(|| {
        let mean_demand = (0..horizon)
            .map(|t| {
                scenario
                    .prosumers
                    .iter()
                    .filter_map(|p| p.demand_for(Carrier::Electricity))
                    .map(|d| d.base.get(t))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / horizon as f64;

        merit_order_price(&scenario.generators, 0, mean_demand, scenario.ceiling_price)
    });

    let mut agents: Vec<AdmmAgent<'_>> = scenario
        .generators
        .iter()
        .map(|g| AdmmAgent {
            kind: AgentKind::Generator(g),
            scenario,
            prev: None,
            last_dispatch: None,
        })
        .chain(scenario.prosumers.iter().map(|p| AdmmAgent {
            kind: AgentKind::Prosumer(p),
            scenario,
            prev: None,
            last_dispatch: None,
        }))
        .collect();

    let mut state = AdmmState {
        iteration: 0,
        prices: vec![initial_price; horizon],
        rho: cfg.rho0,
        imbalance: Imbalance {
            per_hour: vec![0.0; horizon],
            mean_abs: 0.0,
        },
        dual_residual: None,
        prev_generator_dispatch: Vec::new(),
        prev_prosumer_net: Vec::new(),
    };
    let mut trace: Vec<ResidualRow> = Vec::new();
    let mut converged = false;
    let mut solve_count = 0;

    while state.iteration < cfg.max_iters {
        let k = state.iteration + 1;
        let payload = Payload::PriceBroadcast {
            prices: state.prices.clone(),
            imbalance: state.imbalance.per_hour.clone(),
        };
        let has_prev = k > 1;
        let rho_k = state.rho;
        let reports: Vec<Vec<f64>> =
            runtime.execute_round("subproblem", payload, &mut agents, |agent, env| {
                let Payload::PriceBroadcast { prices, imbalance } = env.payload else {
                    return Err(AgentFailure("unexpected payload".into()));
                };
                let imb = has_prev.then_some(imbalance.as_slice());
                let series = agent.solve_round(prices, imb, rho_k)?;
                let reply = Payload::DispatchReport {
                    series: series.clone(),
                };
                Ok((series, reply))
            })?;
        solve_count += agent_count;

        let (gen_reports, pros_reports) = reports.split_at(n_gen);
        let imbalance = compute_imbalance(gen_reports, pros_reports, agent_count);
        let dual = has_prev.then(|| {
            compute_dual_residual(
                gen_reports,
                &state.prev_generator_dispatch,
                pros_reports,
                &state.prev_prosumer_net,
                &imbalance,
                &state.imbalance,
                state.rho,
            )
        });

        trace.push(ResidualRow {
            iteration: k,
            prices: state.prices.clone(),
            imbalance: imbalance.per_hour.clone(),
            rho: state.rho,
            primal: imbalance.mean_abs,
            dual,
        });

        let next_prices = update_price(&state.prices, state.rho, &imbalance.per_hour);
        state.iteration = k;
        state.prev_generator_dispatch = gen_reports.to_vec();
        state.prev_prosumer_net = pros_reports.to_vec();
        state.imbalance = imbalance;
        state.dual_residual = dual;
        if state.imbalance.mean_abs <= cfg.primal_tol && dual.is_some_and(|d| d <= cfg.dual_tol) {
            converged = true;
            break;
        }
        if let Some(d) = dual {
            if k > cfg.adapt_warmup {
                // Residual balancing compares like with like: the
                // system-level imbalance 2-norm is on the same MW scale
                // as the dual residual's stacked decision-shift norms.
                // The mean-|I| aggregate stays the stopping criterion.
                let system_imbalance = (agent_count as f64 + 1.0)
                    * state
                        .imbalance
                        .per_hour
                        .iter()
                        .map(|i| i * i)
                        .sum::<f64>()
                        .sqrt();
                state.rho = adapt_penalty(state.rho, system_imbalance, d, cfg)
                    .clamp(cfg.rho_min_factor * cfg.rho0, cfg.rho_max_factor * cfg.rho0);
            }
        }
        state.prices = next_prices;
    }
    let iterations = state.iteration;
    let prices = state.prices;

    // Final balancing re-dispatch: generators meet the prosumers' final
    // committed consumption exactly, hour by hour.
    let generator_dispatch = balancing_redispatch(scenario, &state.prev_prosumer_net)?;
    solve_count += 1;

    let prosumers: Vec<ProsumerDispatch> = agents[n_gen..]
        .iter()
        .map(|a| a.last_dispatch.clone().expect("prosumer solved"))
        .collect();

    let mut result = DispatchResult {
        method: Method::PriceResponse,
        generator_dispatch,
        prosumers,
        prices,
        total_cost: 0.0,
        diagnostics: Diagnostics {
            wall_time: started.elapsed(),
            iterations,
            solve_count,
            converged,
            residual_trace: trace,
            event_trace: Some(runtime.take_trace()),
        },
        bids: Vec::new(),
    };
    result.total_cost = system_cost(&result, scenario);
    result.diagnostics.wall_time = started.elapsed();
    Ok(result)
}

/// Minimum-cost generator dispatch against a fixed prosumer net series.
/// Slack variables priced far above the ceiling keep the problem
/// feasible even when prosumer consumption exceeds available capacity.
fn balancing_redispatch(
    scenario: &Scenario,
    prosumer_net: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, AdmmError> {
    let window = Window::full(scenario);
    let big = 100.0 * scenario.ceiling_price;
    let mut problem = Problem::new();
    let gen_vars: Vec<_> = scenario
        .generators
        .iter()
        .map(|g| add_generator_problem(&mut problem, g, window, GeneratorObjective::Cost))
        .collect::<Result<_, _>>()
        .expect("full-horizon generator model");
    for t in 0..scenario.horizon {
        let shortfall = problem.add_var(format!("slack_pos.t{t}"), 0.0, f64::INFINITY);
        let surplus = problem.add_var(format!("slack_neg.t{t}"), 0.0, f64::INFINITY);
        problem.add_linear(shortfall, big);
        problem.add_linear(surplus, big);
        let mut terms: Vec<_> = gen_vars.iter().map(|gv| (gv.dispatch[t], 1.0)).collect();
        terms.push((shortfall, 1.0));
        terms.push((surplus, -1.0));
        let rhs = -prosumer_net.iter().map(|p| p[t]).sum::<f64>();
        problem.equality(format!("rebalance.t{t}"), terms, rhs);
    }
    let sol = solve(&problem)?;
    if sol.status != Status::Optimal {
        return Err(AdmmError::ReconciliationFailed(sol.status));
    }
    Ok(gen_vars.iter().map(|gv| gv.dispatch_series(&sol)).collect())
}
