//! Rolling market-auction coordinator: every hour, satellites turn a
//! shared price forecast into price–quantity bid curves by re-solving
//! their look-ahead problem at a small set of probe prices, the market
//! clears all curves against truthful generator offers by maximizing
//! social welfare, and each satellite commits the cleared hour and rolls
//! its internal state forward.
//!
//! Bid curves use a marginal-quantity encoding: a base block at the
//! ceiling price (must-serve demand or must-run supply) plus one supply
//! increment per probe price carrying the response difference toward the
//! next-higher probe, so the sum of accepted block quantities
//! reconstructs the response at the cleared price.

use crate::agents::{
    add_generator_problem, add_prosumer_problem, merit_order_price, EnergyState,
    GeneratorObjective, ObjectiveMode, Window,
};
use crate::coopt::system_cost;
use crate::dispatch::{BidRecord, Diagnostics, DispatchResult, Method, ProsumerDispatch};
use crate::qp::{solve, Problem, QpError, Status};
use crate::runtime::{AgentFailure, CoupledAgent, Payload, RoundError, Runtime};
use crate::scenario::{Carrier, ProsumerSpec, Scenario};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

/// Rolling-horizon configuration.
#[derive(Debug, Clone)]
pub struct AuctionConfig {
    /// Satellite look-ahead horizon [hours].
    pub lookahead: usize,
    /// Market clearing window [hours]; only 1 is supported.
    pub clearing_window: usize,
    /// Price a fuel-based opportunity at μ/η instead of the literal μ·η.
    pub opportunity_cost_divides: bool,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        Self {
            lookahead: 24,
            clearing_window: 1,
            opportunity_cost_divides: false,
        }
    }
}

/// One price–quantity pair; negative quantity is demand.
#[derive(Debug, Clone, PartialEq)]
pub struct BidBlock {
    pub price: f64,
    pub quantity: f64,
}

/// Ordered bid blocks of one prosumer for one hour, together with the
/// probe responses they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct BidCurve {
    pub prosumer: String,
    pub hour: usize,
    pub blocks: Vec<BidBlock>,
    /// (probe price, net-power response), ascending in price and
    /// non-decreasing in response.
    pub probes: Vec<(f64, f64)>,
}

impl BidCurve {
    /// Net-power response the curve encodes at a clearing price: the
    /// response at the smallest probe at or above the price.
    pub fn response_at(&self, price: f64) -> f64 {
        for (p, r) in &self.probes {
            if *p >= price {
                return *r;
            }
        }
        self.probes.last().map_or(0.0, |(_, r)| *r)
    }
}

/// Outcome of clearing one hour.
#[derive(Debug, Clone)]
pub struct ClearingResult {
    pub hour: usize,
    pub price: f64,
    /// Dispatch per generator, scenario order.
    pub generator_dispatch: Vec<f64>,
    /// Accepted quantity per curve per block (signed like the block).
    pub accepted: Vec<Vec<f64>>,
    /// Net cleared quantity per curve (sum of its accepted blocks).
    pub cleared_net: Vec<f64>,
}

/// Private rolling state of one satellite model.
#[derive(Debug, Clone)]
pub struct SatelliteState {
    pub prosumer: String,
    pub hour: usize,
    pub storage_energy: BTreeMap<Carrier, f64>,
    pub flex_energy: BTreeMap<Carrier, f64>,
    /// Latest forecast received, window-relative.
    pub forecast: Vec<f64>,
}

impl SatelliteState {
    pub fn initial(prosumer: &ProsumerSpec) -> Self {
        let energy = EnergyState::initial(prosumer);
        Self {
            prosumer: prosumer.id.clone(),
            hour: 0,
            storage_energy: energy.storage,
            flex_energy: energy.flex,
            forecast: Vec::new(),
        }
    }

    fn energy_state(&self) -> EnergyState {
        EnergyState {
            storage: self.storage_energy.clone(),
            flex: self.flex_energy.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AuctionError {
    #[error("look-ahead of {lookahead} h exceeds the scenario horizon of {horizon} h")]
    LookaheadExceedsHorizon { lookahead: usize, horizon: usize },
    #[error("clearing windows longer than 1 h are reserved for future use, got {0} h")]
    UnsupportedClearingWindow(usize),
    #[error("market clearing infeasible at hour {hour}: inflexible demand exceeds capacity")]
    ClearingInfeasible { hour: usize },
    #[error("market clearing at hour {hour} ended {status:?}")]
    ClearingFailed { hour: usize, status: Status },
    #[error("satellite `{prosumer}` infeasible at hour {hour}: state outside its envelope")]
    SatelliteInfeasible { prosumer: String, hour: usize },
    #[error("committing hour {hour} would breach an energy envelope of `{prosumer}`: {detail}")]
    EnvelopeBreach {
        prosumer: String,
        hour: usize,
        detail: String,
    },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Round(#[from] RoundError),
}

/// Deterministic price forecast for hours `[t, t+lookahead)`: persist
/// the same-hour price of the most recent cleared day where available,
/// otherwise fall back to a merit-order estimate against the expected
/// inflexible demand.
pub fn make_price_forecast(
    history: &[f64],
    scenario: &Scenario,
    t: usize,
    lookahead: usize,
) -> Vec<f64> {
    (t..t + lookahead)
        .map(|h| {
            let mut lookback = h;
            while lookback >= 24 {
                lookback -= 24;
                if lookback < history.len() {
                    return history[lookback];
                }
            }
            let hour = h.min(scenario.horizon - 1);
            let demand: f64 = scenario
                .prosumers
                .iter()
                .filter_map(|p| p.demand_for(Carrier::Electricity))
                .map(|d| d.base.get(hour))
                .sum();
            merit_order_price(&scenario.generators, hour, demand, scenario.ceiling_price)
        })
        .collect()
}

/// Gathers the relevant bid prices for one prosumer and hour: the
/// ceiling price, the minimum forecast price per flexibility look-ahead
/// range, and one fuel opportunity cost per carrier–converter pair.
/// Sorted ascending, deduplicated, clamped to the ceiling.
pub fn gather_bid_prices(
    prosumer: &ProsumerSpec,
    forecast_window: &[f64],
    t: usize,
    ceiling: f64,
    scenario: &Scenario,
    opportunity_cost_divides: bool,
) -> Vec<f64> {
    let mut prices = vec![ceiling];

    // One full-window flexibility range per storage and flexible demand.
    let flexibility_count = prosumer.storages.len()
        + prosumer
            .demands
            .iter()
            .filter(|d| d.has_flexibility())
            .count();
    if flexibility_count > 0 && !forecast_window.is_empty() {
        let min = forecast_window
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        for _ in 0..flexibility_count {
            prices.push(min);
        }
    }

    // Opportunity costs: fuels consumed by any converter, crossed with
    // every converter's principal efficiency.
    let fuels: Vec<Carrier> = prosumer
        .converters
        .iter()
        .filter(|c| c.input.is_priceable())
        .map(|c| c.input)
        .collect();
    for fuel in &fuels {
        let mu = scenario.carrier_price(*fuel, t);
        for conv in &prosumer.converters {
            let eff = conv.principal_efficiency();
            if eff > 0.0 {
                let candidate = if opportunity_cost_divides {
                    mu / eff
                } else {
                    mu * eff
                };
                prices.push(candidate);
            }
        }
    }

    let mut prices: Vec<f64> = prices.into_iter().map(|p| p.min(ceiling)).collect();
    prices.sort_by(|a, b| a.partial_cmp(b).unwrap());
    prices.dedup();
    prices
}

/// Solves one satellite look-ahead window with the stored forecast, the
/// hour-t price overridden, and optionally a pinned hour-t net power or
/// a tiny consumption-preferring tie-break bias.
fn satellite_window_solve(
    scenario: &Scenario,
    prosumer: &ProsumerSpec,
    state: &SatelliteState,
    price_at_t: f64,
    pin_net: Option<f64>,
    bias: bool,
) -> Result<(crate::qp::Solution, crate::agents::ProsumerVars), AuctionError> {
    let window = Window::lookahead(state.hour, state.forecast.len().max(1));
    let mut prices: Vec<f64> = state.forecast[..window.len].to_vec();
    prices[0] = price_at_t;
    let mut problem = Problem::new();
    let vars = add_prosumer_problem(
        &mut problem,
        scenario,
        prosumer,
        window,
        &state.energy_state(),
        ObjectiveMode::Forecast { prices: &prices },
    )
    .map_err(|_| AuctionError::SatelliteInfeasible {
        prosumer: prosumer.id.clone(),
        hour: state.hour,
    })?;
    if bias {
        // Prefer the maximal-consumption optimum at ties so the probe
        // response is the left limit of the true response function. The
        // bias must stay above the solver's duality-gap resolution but
        // far below any real price difference.
        problem.add_linear(vars.net_power[0], 1e-4);
    }
    if let Some(net) = pin_net {
        problem.equality("settlement", vec![(vars.net_power[0], 1.0)], net);
    }
    let sol = solve(&problem)?;
    if !sol.is_optimal() {
        return Err(AuctionError::SatelliteInfeasible {
            prosumer: prosumer.id.clone(),
            hour: state.hour,
        });
    }
    Ok((sol, vars))
}

/// Builds one prosumer's bid curve for hour `t` by probing its
/// look-ahead response at each gathered price. Returns the curve and the
/// number of solves spent.
pub fn generate_bid_curve(
    scenario: &Scenario,
    prosumer: &ProsumerSpec,
    state: &SatelliteState,
    probe_prices: &[f64],
    t: usize,
) -> Result<(BidCurve, usize), AuctionError> {
    assert!(
        !probe_prices.is_empty(),
        "probe price set must be non-empty"
    );
    let ceiling = scenario.ceiling_price;
    let mut probes = Vec::with_capacity(probe_prices.len());
    let mut solves = 0;
    for &price in probe_prices {
        let (sol, vars) = satellite_window_solve(scenario, prosumer, state, price, None, true)?;
        solves += 1;
        let mut response = sol.value(vars.net_power[0]);
        if let Some((_, prev)) = probes.last() {
            // Rational response is non-decreasing in price; clamp away
            // solver noise so the curve invariant holds exactly.
            response = response.max(*prev);
        }
        probes.push((price, response));
    }

    let mut blocks = Vec::new();
    let base = probes[0].1;
    if base.abs() > 1e-9 {
        let price = if base < 0.0 { ceiling } else { -ceiling };
        blocks.push(BidBlock {
            price,
            quantity: base,
        });
    }
    for k in 0..probes.len() - 1 {
        let increment = probes[k + 1].1 - probes[k].1;
        if increment > 1e-9 {
            blocks.push(BidBlock {
                price: probes[k].0,
                quantity: increment,
            });
        }
    }

    Ok((
        BidCurve {
            prosumer: prosumer.id.clone(),
            hour: t,
            blocks,
            probes,
        },
        solves,
    ))
}

/// Clears one hour: maximizes gross surplus minus generation cost under
/// the market balance, with divisible blocks. The clearing price is the
/// dual of the balance constraint.
pub fn clear_market(
    curves: &[BidCurve],
    scenario: &Scenario,
    t: usize,
) -> Result<ClearingResult, AuctionError> {
    let mut problem = Problem::new();
    let window = Window { start: t, len: 1 };
    let gen_vars: Vec<_> = scenario
        .generators
        .iter()
        .map(|g| add_generator_problem(&mut problem, g, window, GeneratorObjective::Cost))
        .collect::<Result<_, _>>()
        .expect("single-hour generator model");

    let mut block_vars: Vec<Vec<crate::qp::VarId>> = Vec::with_capacity(curves.len());
    for curve in curves {
        let mut vars = Vec::with_capacity(curve.blocks.len());
        for (b, block) in curve.blocks.iter().enumerate() {
            let (lo, hi) = if block.quantity < 0.0 {
                (block.quantity, 0.0)
            } else {
                (0.0, block.quantity)
            };
            let v = problem.add_var(format!("bid.{}.{b}", curve.prosumer), lo, hi);
            // Welfare maximization in minimization form: accepted demand
            // at price π reduces the objective by π·|φ|.
            problem.add_linear(v, block.price);
            vars.push(v);
        }
        block_vars.push(vars);
    }

    let mut terms: Vec<_> = gen_vars.iter().map(|gv| (gv.dispatch[0], 1.0)).collect();
    for vars in &block_vars {
        for v in vars {
            terms.push((*v, 1.0));
        }
    }
    let balance = problem.equality(format!("market_balance.t{t}"), terms, 0.0);

    let sol = solve(&problem)?;
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible => return Err(AuctionError::ClearingInfeasible { hour: t }),
        other => {
            return Err(AuctionError::ClearingFailed {
                hour: t,
                status: other,
            })
        }
    }

    let accepted: Vec<Vec<f64>> = block_vars
        .iter()
        .map(|vars| vars.iter().map(|v| sol.value(*v)).collect())
        .collect();
    let cleared_net = accepted.iter().map(|a| a.iter().sum::<f64>()).collect();
    Ok(ClearingResult {
        hour: t,
        price: sol.dual(balance),
        generator_dispatch: gen_vars
            .iter()
            .map(|gv| sol.value(gv.dispatch[0]))
            .collect(),
        accepted,
        cleared_net,
    })
}

/// Hour-t dispatch committed by one satellite after settlement.
#[derive(Debug, Clone)]
pub struct CommittedHour {
    pub net_power: f64,
    pub dispatch: ProsumerDispatch,
}

/// Re-solves the look-ahead with the cleared price and quantity pinned,
/// commits the hour-t dispatch, and integrates the energy states. The
/// returned state enters hour t+1.
pub fn advance_state(
    scenario: &Scenario,
    prosumer: &ProsumerSpec,
    state: &SatelliteState,
    cleared_net: f64,
    price: f64,
) -> Result<(CommittedHour, SatelliteState), AuctionError> {
    let t = state.hour;
    let (sol, vars) =
        satellite_window_solve(scenario, prosumer, state, price, Some(cleared_net), false)?;
    let mut dispatch = ProsumerDispatch::from_solution(&sol, &vars);

    let mut next = state.clone();
    next.hour = t + 1;
    for st in &prosumer.storages {
        let charge = dispatch.storage_charge[&st.carrier][0];
        let discharge = dispatch.storage_discharge[&st.carrier][0];
        let level = next.storage_energy[&st.carrier];
        let updated = level + st.eff_charge * charge - discharge / st.eff_discharge;
        if updated < st.e_min - 1e-6 || updated > st.e_max + 1e-6 {
            return Err(AuctionError::EnvelopeBreach {
                prosumer: prosumer.id.clone(),
                hour: t,
                detail: format!(
                    "storage {} level {updated} outside [{}, {}]",
                    st.id, st.e_min, st.e_max
                ),
            });
        }
        next.storage_energy.insert(st.carrier, updated);
        // Record the canonically integrated level so replaying the
        // committed flows reproduces the stored state bit for bit.
        dispatch.storage_energy.get_mut(&st.carrier).unwrap()[0] = updated;
    }
    for demand in prosumer.demands.iter().filter(|d| d.has_flexibility()) {
        let rate = dispatch.flex_rate[&demand.carrier][0];
        let served = next.flex_energy[&demand.carrier];
        let updated = served + rate;
        if updated < demand.envelope_min(t) - 1e-6 || updated > demand.envelope_max(t) + 1e-6 {
            return Err(AuctionError::EnvelopeBreach {
                prosumer: prosumer.id.clone(),
                hour: t,
                detail: format!(
                    "flexible {} energy {updated} outside [{}, {}]",
                    demand.carrier,
                    demand.envelope_min(t),
                    demand.envelope_max(t)
                ),
            });
        }
        next.flex_energy.insert(demand.carrier, updated);
        dispatch.flex_energy.get_mut(&demand.carrier).unwrap()[0] = updated;
    }

    Ok((
        CommittedHour {
            net_power: dispatch.net_power[0],
            dispatch,
        },
        next,
    ))
}

struct Satellite<'a> {
    index: usize,
    spec: &'a ProsumerSpec,
    scenario: &'a Scenario,
    state: SatelliteState,
    curve: Option<BidCurve>,
    committed: Option<ProsumerDispatch>,
    solves: usize,
}

impl CoupledAgent for Satellite<'_> {
    fn agent_id(&self) -> &str {
        &self.spec.id
    }
}

/// Runs the full rolling auction over the scenario horizon.
pub fn run_market_auction(
    scenario: &Scenario,
    cfg: &AuctionConfig,
    runtime: &Runtime,
) -> Result<DispatchResult, AuctionError> {
    if cfg.clearing_window != 1 {
        return Err(AuctionError::UnsupportedClearingWindow(cfg.clearing_window));
    }
    if cfg.lookahead == 0 || cfg.lookahead > scenario.horizon {
        return Err(AuctionError::LookaheadExceedsHorizon {
            lookahead: cfg.lookahead,
            horizon: scenario.horizon,
        });
    }

    let started = Instant::now();
    let horizon = scenario.horizon;
    let divides = cfg.opportunity_cost_divides;
    let mut satellites: Vec<Satellite<'_>> = scenario
        .prosumers
        .iter()
        .enumerate()
        .map(|(index, spec)| Satellite {
            index,
            spec,
            scenario,
            state: SatelliteState::initial(spec),
            curve: None,
            committed: None,
            solves: 0,
        })
        .collect();

    let mut history: Vec<f64> = Vec::with_capacity(horizon);
    let mut generator_dispatch = vec![vec![0.0; horizon]; scenario.generators.len()];
    let mut bids: Vec<BidRecord> = Vec::new();
    let mut clearings = 0;

    for t in 0..horizon {
        let forecast = runtime.coordinator_phase("forecast", 0, || {
            make_price_forecast(&history, scenario, t, cfg.lookahead)
        });

        let payload = Payload::PriceBroadcast {
            prices: forecast.clone(),
            imbalance: vec![],
        };
        let curves: Vec<BidCurve> =
            runtime.execute_round("bids", payload, &mut satellites, |sat, env| {
                let Payload::PriceBroadcast { prices, .. } = env.payload else {
                    return Err(AgentFailure("unexpected payload".into()));
                };
                sat.state.forecast = prices.clone();
                let probes = gather_bid_prices(
                    sat.spec,
                    &sat.state.forecast,
                    t,
                    sat.scenario.ceiling_price,
                    sat.scenario,
                    divides,
                );
                let (curve, solves) =
                    generate_bid_curve(sat.scenario, sat.spec, &sat.state, &probes, t)
                        .map_err(|e| AgentFailure(e.to_string()))?;
                sat.solves += solves;
                sat.curve = Some(curve.clone());
                let reply = Payload::BidSubmission {
                    blocks: curve.blocks.iter().map(|b| (b.price, b.quantity)).collect(),
                };
                Ok((curve, reply))
            })?;

        let clearing = runtime.coordinator_phase(
            "clearing",
            curves.iter().map(|c| 16 * c.blocks.len()).sum(),
            || clear_market(&curves, scenario, t),
        )?;
        clearings += 1;
        history.push(clearing.price);
        for (g, series) in clearing
            .generator_dispatch
            .iter()
            .zip(generator_dispatch.iter_mut())
        {
            series[t] = *g;
        }
        for (curve, accepted) in curves.iter().zip(clearing.accepted.iter()) {
            for (block, a) in curve.blocks.iter().zip(accepted.iter()) {
                bids.push(BidRecord {
                    hour: t,
                    prosumer: curve.prosumer.clone(),
                    price: block.price,
                    quantity: block.quantity,
                    accepted: *a,
                });
            }
        }

        let payload = Payload::ClearingNotice {
            price: clearing.price,
            accepted: clearing.cleared_net.clone(),
        };
        runtime.execute_round("advance", payload, &mut satellites, |sat, env| {
            let Payload::ClearingNotice { price, accepted } = env.payload else {
                return Err(AgentFailure("unexpected payload".into()));
            };
            let cleared = accepted[sat.index];
            let (committed, next) =
                advance_state(sat.scenario, sat.spec, &sat.state, cleared, *price)
                    .map_err(|e| AgentFailure(e.to_string()))?;
            sat.solves += 1;
            sat.state = next;
            let target = sat
                .committed
                .get_or_insert_with(|| ProsumerDispatch::like(&committed.dispatch, horizon));
            target.commit_hour(t, &committed.dispatch, 0);
            let reply = Payload::DispatchReport {
                series: vec![committed.net_power],
            };
            Ok((committed.net_power, reply))
        })?;
    }

    let prosumers: Vec<ProsumerDispatch> = satellites
        .iter()
        .map(|s| {
            s.committed
                .clone()
                .unwrap_or_else(|| empty_dispatch(horizon))
        })
        .collect();
    let solve_count = satellites.iter().map(|s| s.solves).sum::<usize>() + clearings;

    let mut result = DispatchResult {
        method: Method::MarketAuction,
        generator_dispatch,
        prosumers,
        prices: history,
        total_cost: 0.0,
        diagnostics: Diagnostics {
            wall_time: started.elapsed(),
            iterations: horizon,
            solve_count,
            converged: true,
            residual_trace: Vec::new(),
            event_trace: Some(runtime.take_trace()),
        },
        bids,
    };
    result.total_cost = system_cost(&result, scenario);
    result.diagnostics.wall_time = started.elapsed();
    Ok(result)
}

fn empty_dispatch(horizon: usize) -> ProsumerDispatch {
    ProsumerDispatch {
        net_power: vec![0.0; horizon],
        ..Default::default()
    }
}
