//! Centralized benchmark coordinator: one monolithic QP over all agents
//! with a system-wide electric balance per hour. Electricity prices are
//! the duals of the balance constraints.

use crate::agents::{
    add_generator_problem, add_prosumer_problem, EnergyState, GeneratorObjective, ObjectiveMode,
    Window,
};
use crate::dispatch::{Diagnostics, DispatchResult, Method, ProsumerDispatch};
use crate::qp::{solve, Problem, QpError, Status};
use crate::scenario::Scenario;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CooptError {
    #[error("scenario problem is {0:?}")]
    NotOptimal(Status),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
}

/// Solves the whole system as one QP and prices hours by the balance
/// duals.
pub fn solve_cooptimization(scenario: &Scenario) -> Result<DispatchResult, CooptError> {
    let started = Instant::now();
    let window = Window::full(scenario);
    let mut problem = Problem::new();

    let gen_vars: Vec<_> = scenario
        .generators
        .iter()
        .map(|g| add_generator_problem(&mut problem, g, window, GeneratorObjective::Cost))
        .collect::<Result<_, _>>()?;
    let pros_vars: Vec<_> = scenario
        .prosumers
        .iter()
        .map(|p| {
            add_prosumer_problem(
                &mut problem,
                scenario,
                p,
                window,
                &EnergyState::initial(p),
                ObjectiveMode::Coopt,
            )
        })
        .collect::<Result<_, _>>()?;

    let balance_rows: Vec<_> = (0..scenario.horizon)
        .map(|t| {
            let mut terms = Vec::with_capacity(gen_vars.len() + pros_vars.len());
            for gv in &gen_vars {
                terms.push((gv.dispatch[t], 1.0));
            }
            for pv in &pros_vars {
                terms.push((pv.net_power[t], 1.0));
            }
            problem.equality(format!("balance.t{t}"), terms, 0.0)
        })
        .collect();

    let sol = solve(&problem)?;
    if sol.status != Status::Optimal {
        return Err(CooptError::NotOptimal(sol.status));
    }

    let generator_dispatch = gen_vars.iter().map(|gv| gv.dispatch_series(&sol)).collect();
    let prosumers = pros_vars
        .iter()
        .map(|pv| ProsumerDispatch::from_solution(&sol, pv))
        .collect();
    let prices = balance_rows.iter().map(|c| sol.dual(*c)).collect();

    let mut result = DispatchResult {
        method: Method::Coopt,
        generator_dispatch,
        prosumers,
        prices,
        total_cost: 0.0,
        diagnostics: Diagnostics {
            wall_time: started.elapsed(),
            iterations: 1,
            solve_count: 1,
            converged: true,
            residual_trace: Vec::new(),
            event_trace: None,
        },
        bids: Vec::new(),
    };
    // The reported cost is the cost function on the dispatch; solver-
    // internal regularization terms stay out of it.
    result.total_cost = system_cost(&result, scenario);
    result.diagnostics.wall_time = started.elapsed();
    Ok(result)
}

/// Total system cost of a dispatch: generation cost plus fuel purchase
/// cost, evaluated on the stored values. Pure.
pub fn system_cost(result: &DispatchResult, scenario: &Scenario) -> f64 {
    assert_eq!(
        result.generator_dispatch.len(),
        scenario.generators.len(),
        "generator dimension mismatch"
    );
    assert_eq!(
        result.prosumers.len(),
        scenario.prosumers.len(),
        "prosumer dimension mismatch"
    );
    let t_len = scenario.horizon;
    let mut cost = 0.0;
    for (gen, series) in scenario.generators.iter().zip(&result.generator_dispatch) {
        assert_eq!(series.len(), t_len, "generator series length mismatch");
        for g in series {
            cost += gen.alpha * g * g + gen.beta * g;
        }
    }
    for (spec, dispatch) in scenario.prosumers.iter().zip(&result.prosumers) {
        for conv in &spec.converters {
            if let Some(series) = dispatch.fuel_in.get(&conv.id) {
                for (t, x) in series.iter().enumerate() {
                    cost += scenario.carrier_price(conv.input, t) * x;
                }
            }
        }
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::fixtures::micro_scenario;
    use crate::scenario::{synthesize_scenario, Timeseries};

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "expected {expected}, got {actual} (tol {tol})"
        );
    }

    #[test]
    fn micro_scenario_matches_kkt_oracle() {
        let s = micro_scenario(24);
        let r = solve_cooptimization(&s).unwrap();
        for t in 0..24 {
            assert_close(r.generator_dispatch[0][t], 60.0, 1e-4);
            assert_close(r.generator_dispatch[1][t], 0.0, 1e-4);
            assert_close(r.prices[t], 11.2, 1e-4);
            assert!(r.hourly_imbalance(t).abs() <= 1e-4);
        }
        // 24 h · (0.01·60² + 10·60) = 24 · 636
        assert_close(r.total_cost, 24.0 * 636.0, 1e-3);
    }

    #[test]
    fn zero_demand_dispatches_nothing() {
        let mut s = micro_scenario(4);
        s.prosumers[0].demands[0].base = Timeseries::megawatts(vec![0.0; 4]);
        let r = solve_cooptimization(&s).unwrap();
        assert_close(r.total_cost, 0.0, 1e-6);
        for t in 0..4 {
            assert_close(r.generator_dispatch[0][t], 0.0, 1e-5);
            assert_close(r.generator_dispatch[1][t], 0.0, 1e-5);
        }
    }

    #[test]
    fn reported_cost_is_consistent_with_reevaluation() {
        let s = synthesize_scenario(30, 24, 11).unwrap();
        let r = solve_cooptimization(&s).unwrap();
        let recomputed = system_cost(&r, &s);
        let rel = (recomputed - r.total_cost).abs() / r.total_cost.abs().max(1.0);
        assert!(
            rel <= 1e-6,
            "objective {} vs re-evaluated {recomputed}",
            r.total_cost
        );
    }

    #[test]
    fn marginal_generators_track_the_price() {
        let s = synthesize_scenario(12, 24, 3).unwrap();
        let r = solve_cooptimization(&s).unwrap();
        for t in 0..s.horizon {
            assert!(r.prices[t] >= -1e-7, "negative price at t={t}");
            for (gen, series) in s.generators.iter().zip(&r.generator_dispatch) {
                let g = series[t];
                let lo = gen.g_min.get(t);
                let hi = gen.g_max.get(t);
                if g > lo + 1e-3 && g < hi - 1e-3 {
                    let marginal = 2.0 * gen.alpha * g + gen.beta;
                    assert_close(marginal, r.prices[t], 1e-4);
                }
            }
        }
    }

    #[test]
    fn cost_of_one_hour_block_by_hand() {
        // g = 60 for one hour with α = 0.01, β = 10: 36 + 600 = 636 €.
        let mut s = micro_scenario(1);
        s.prosumers[0].demands[0].base = Timeseries::megawatts(vec![60.0]);
        let r = solve_cooptimization(&s).unwrap();
        assert_close(system_cost(&r, &s), 636.0, 1e-4);
    }
}
