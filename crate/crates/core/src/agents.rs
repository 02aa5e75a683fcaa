//! Per-agent optimization problems shared by all three coordinators.
//!
//! A prosumer problem covers, over an arbitrary hour window: the net
//! power identity, carrier conversion with electric and non-electric
//! outputs, local heat/hydrogen balances, storage and flexible-demand
//! energy dynamics, and all capacity/energy envelopes. Objectives vary
//! by coordination mode: pure cost (centralized), price-taking against
//! a price series, or price-taking with a quadratic consensus penalty.

use crate::qp::{Problem, Solution, VarId};
use crate::scenario::{Carrier, GeneratorSpec, ProsumerSpec, Scenario, StorageSpec};
use std::collections::BTreeMap;
use thiserror::Error;

/// Contiguous range of absolute scenario hours `[start, start+len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn full(scenario: &Scenario) -> Self {
        Self {
            start: 0,
            len: scenario.horizon,
        }
    }

    /// Fixed-length look-ahead window starting at `start`. Hours beyond
    /// the scenario horizon draw wrapped data (see
    /// [`Scenario::wrap_hour`]) and are planned but never committed.
    pub fn lookahead(start: usize, lookahead: usize) -> Self {
        Self {
            start,
            len: lookahead,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    /// Absolute hour for a window-relative offset.
    pub fn abs(&self, h: usize) -> usize {
        self.start + h
    }
}

/// Energy content carried into a window: storage level and cumulative
/// served flexible energy, both per carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyState {
    pub storage: BTreeMap<Carrier, f64>,
    pub flex: BTreeMap<Carrier, f64>,
}

impl EnergyState {
    /// State at the start of the horizon: storages at their configured
    /// initial energy, no flexible energy served yet.
    pub fn initial(prosumer: &ProsumerSpec) -> Self {
        let storage = prosumer
            .storages
            .iter()
            .map(|s| (s.carrier, s.initial_energy))
            .collect();
        let flex = prosumer
            .demands
            .iter()
            .filter(|d| d.has_flexibility())
            .map(|d| (d.carrier, 0.0))
            .collect();
        Self { storage, flex }
    }
}

/// Objective variant for a prosumer problem.
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveMode<'a> {
    /// Carrier costs only; electricity is settled through a system-level
    /// balance outside this problem.
    Coopt,
    /// Price taker: minimize carrier costs minus electricity revenue at
    /// the given price series (one entry per window hour).
    Forecast { prices: &'a [f64] },
    /// Price taker plus the consensus penalty
    /// ρ/2·‖p − (p_prev − imbalance_prev)‖².
    AdmmPenalty {
        prices: &'a [f64],
        rho: f64,
        prev_net: &'a [f64],
        prev_imbalance: &'a [f64],
    },
}

/// Generator objective variant.
#[derive(Debug, Clone, Copy)]
pub enum GeneratorObjective<'a> {
    /// Minimize production cost α·g² + β·g (centralized form).
    Cost,
    /// Maximize revenue (λ − (α·g + β))·g, optionally with the consensus
    /// penalty; expressed internally as a minimization.
    Revenue {
        prices: &'a [f64],
        penalty: Option<Penalty<'a>>,
    },
}

/// Consensus penalty data broadcast by the coordinator.
#[derive(Debug, Clone, Copy)]
pub struct Penalty<'a> {
    pub rho: f64,
    pub prev: &'a [f64],
    pub prev_imbalance: &'a [f64],
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{what}: series length {got} does not match window length {expected}")]
    HorizonMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
}

fn check_series(what: &str, len: usize, window: Window) -> Result<(), AgentError> {
    if len != window.len {
        return Err(AgentError::HorizonMismatch {
            what: what.to_string(),
            expected: window.len,
            got: len,
        });
    }
    Ok(())
}

/// Variable handles for one converter.
#[derive(Debug, Clone)]
pub struct ConverterVars {
    /// Fuel consumption x (priced input carrier), per window hour.
    pub fuel_in: Option<Vec<VarId>>,
    /// Grid electricity consumption, per window hour.
    pub elec_in: Option<Vec<VarId>>,
    /// Electric output (X2P), per window hour.
    pub elec_out: Option<Vec<VarId>>,
    /// Non-electric output and its carrier, per window hour.
    pub carrier_out: Option<(Carrier, Vec<VarId>)>,
}

#[derive(Debug, Clone)]
pub struct StorageVars {
    pub charge: Vec<VarId>,
    pub discharge: Vec<VarId>,
    pub energy: Vec<VarId>,
}

#[derive(Debug, Clone)]
pub struct FlexVars {
    pub rate: Vec<VarId>,
    pub energy: Vec<VarId>,
}

/// All variable handles of one prosumer problem.
#[derive(Debug, Clone)]
pub struct ProsumerVars {
    pub window: Window,
    pub net_power: Vec<VarId>,
    pub converters: BTreeMap<String, ConverterVars>,
    pub storages: BTreeMap<Carrier, StorageVars>,
    pub flex: BTreeMap<Carrier, FlexVars>,
    pub solar_thermal: Option<Vec<VarId>>,
}

impl ProsumerVars {
    /// Net electric power series p (negative = net consumption).
    pub fn net_power_series(&self, sol: &Solution) -> Vec<f64> {
        sol.values_of(&self.net_power)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub window: Window,
    pub dispatch: Vec<VarId>,
}

impl GeneratorVars {
    pub fn dispatch_series(&self, sol: &Solution) -> Vec<f64> {
        sol.values_of(&self.dispatch)
    }
}

/// Net power of any agent under the shared sign convention: positive
/// for net generation, negative for net consumption.
pub fn net_power_of(sol: &Solution, vars: &AgentVars) -> Vec<f64> {
    match vars {
        AgentVars::Generator(g) => g.dispatch_series(sol),
        AgentVars::Prosumer(p) => p.net_power_series(sol),
    }
}

#[derive(Debug, Clone)]
pub enum AgentVars {
    Generator(GeneratorVars),
    Prosumer(ProsumerVars),
}

/// Adds one generator's variables and objective to `problem`.
pub fn add_generator_problem(
    problem: &mut Problem,
    gen: &GeneratorSpec,
    window: Window,
    objective: GeneratorObjective<'_>,
) -> Result<GeneratorVars, AgentError> {
    match objective {
        GeneratorObjective::Revenue { prices, .. } => check_series(
            &format!("generator {} prices", gen.id),
            prices.len(),
            window,
        )?,
        GeneratorObjective::Cost => {}
    }
    if let GeneratorObjective::Revenue {
        penalty: Some(pen), ..
    } = objective
    {
        check_series(
            &format!("generator {} previous dispatch", gen.id),
            pen.prev.len(),
            window,
        )?;
        check_series(
            &format!("generator {} previous imbalance", gen.id),
            pen.prev_imbalance.len(),
            window,
        )?;
    }

    let mut dispatch = Vec::with_capacity(window.len);
    for h in 0..window.len {
        let a = window.abs(h);
        let v = problem.add_var(
            format!("g.{}.t{}", gen.id, a),
            gen.g_min.get(a),
            gen.g_max.get(a),
        );
        problem.add_quadratic(v, gen.alpha);
        match objective {
            GeneratorObjective::Cost => problem.add_linear(v, gen.beta),
            GeneratorObjective::Revenue { prices, penalty } => {
                problem.add_linear(v, gen.beta - prices[h]);
                if let Some(pen) = penalty {
                    let target = pen.prev[h] - pen.prev_imbalance[h];
                    problem.add_quadratic(v, 0.5 * pen.rho);
                    problem.add_linear(v, -pen.rho * target);
                }
            }
        }
        dispatch.push(v);
    }
    Ok(GeneratorVars { window, dispatch })
}

/// Builds a standalone generator problem (price-response form).
pub fn build_generator_problem(
    gen: &GeneratorSpec,
    window: Window,
    prices: &[f64],
    penalty: Option<Penalty<'_>>,
) -> Result<(Problem, GeneratorVars), AgentError> {
    let mut problem = Problem::new();
    let vars = add_generator_problem(
        &mut problem,
        gen,
        window,
        GeneratorObjective::Revenue { prices, penalty },
    )?;
    Ok((problem, vars))
}

/// Adds one prosumer's full physics and objective to `problem`.
pub fn add_prosumer_problem(
    problem: &mut Problem,
    scenario: &Scenario,
    prosumer: &ProsumerSpec,
    window: Window,
    init: &EnergyState,
    mode: ObjectiveMode<'_>,
) -> Result<ProsumerVars, AgentError> {
    let who = &prosumer.id;
    match mode {
        ObjectiveMode::Forecast { prices } => {
            check_series(&format!("prosumer {who} prices"), prices.len(), window)?
        }
        ObjectiveMode::AdmmPenalty {
            prices,
            prev_net,
            prev_imbalance,
            ..
        } => {
            check_series(&format!("prosumer {who} prices"), prices.len(), window)?;
            check_series(
                &format!("prosumer {who} previous dispatch"),
                prev_net.len(),
                window,
            )?;
            check_series(
                &format!("prosumer {who} previous imbalance"),
                prev_imbalance.len(),
                window,
            )?;
        }
        ObjectiveMode::Coopt => {}
    }

    let inf = f64::INFINITY;
    let t_len = window.len;

    let net_power: Vec<VarId> = (0..t_len)
        .map(|h| problem.add_var(format!("p.{who}.t{}", window.abs(h)), -inf, inf))
        .collect();

    let mut converters = BTreeMap::new();
    for conv in &prosumer.converters {
        let cid = &conv.id;
        let fuel_in = conv.input.is_priceable().then(|| {
            (0..t_len)
                .map(|h| {
                    let v = problem.add_var(
                        format!("x.{who}.{cid}.t{}", window.abs(h)),
                        0.0,
                        conv.capacity,
                    );
                    // Fuel purchase cost μ·x appears in every mode.
                    problem.add_linear(v, scenario.carrier_price(conv.input, window.abs(h)));
                    v
                })
                .collect::<Vec<_>>()
        });
        let elec_in = conv.uses_electricity.then(|| {
            (0..t_len)
                .map(|h| {
                    problem.add_var(
                        format!("pcon.{who}.{cid}.t{}", window.abs(h)),
                        0.0,
                        conv.capacity,
                    )
                })
                .collect::<Vec<_>>()
        });
        let elec_out = conv.is_x2p().then(|| {
            let out: Vec<VarId> = (0..t_len)
                .map(|h| problem.add_var(format!("pgen.{who}.{cid}.t{}", window.abs(h)), 0.0, inf))
                .collect();
            for h in 0..t_len {
                let x = fuel_in.as_ref().expect("X2P input is a priced fuel")[h];
                problem.equality(
                    format!("conv_e.{who}.{cid}.t{}", window.abs(h)),
                    vec![(out[h], 1.0), (x, -conv.efficiency_electric)],
                    0.0,
                );
            }
            out
        });
        let carrier_out = conv.carrier_output().map(|r| {
            let out: Vec<VarId> = (0..t_len)
                .map(|h| problem.add_var(format!("r.{who}.{cid}.t{}", window.abs(h)), 0.0, inf))
                .collect();
            for h in 0..t_len {
                let mut terms = vec![(out[h], 1.0)];
                if let Some(x) = &fuel_in {
                    terms.push((x[h], -conv.efficiency_nonelectric));
                }
                if let Some(pc) = &elec_in {
                    terms.push((pc[h], -conv.efficiency_nonelectric));
                }
                let name = format!("conv_r.{who}.{cid}.t{}", window.abs(h));
                if conv.is_x2p() {
                    // Cogenerated heat is recoverable up to the
                    // cogeneration limit; recovery can be bypassed.
                    // A strict equality would force surplus heat into
                    // storage round-trip dissipation whenever the
                    // electric side is committed and the store is full.
                    problem.less_equal(name, terms, 0.0);
                } else {
                    problem.equality(name, terms, 0.0);
                }
            }
            (r, out)
        });
        converters.insert(
            conv.id.clone(),
            ConverterVars {
                fuel_in,
                elec_in,
                elec_out,
                carrier_out,
            },
        );
    }

    let mut storages = BTreeMap::new();
    for st in &prosumer.storages {
        let vars = add_storage(problem, who, st, window, init);
        storages.insert(st.carrier, vars);
    }

    let mut flex = BTreeMap::new();
    for d in &prosumer.demands {
        if !d.has_flexibility() {
            continue;
        }
        let carrier = d.carrier;
        let rate: Vec<VarId> = (0..t_len)
            .map(|h| problem.add_var(format!("f.{who}.{carrier}.t{}", window.abs(h)), -inf, inf))
            .collect();
        let energy: Vec<VarId> = (0..t_len)
            .map(|h| {
                let a = window.abs(h);
                // Beyond the horizon all flexible energy has been
                // served; the account stays pinned at its target.
                let (lo, hi) = if a < scenario.horizon {
                    (d.envelope_min(a), d.envelope_max(a))
                } else {
                    (d.flexible_total, d.flexible_total)
                };
                problem.add_var(format!("ef.{who}.{carrier}.t{a}"), lo, hi)
            })
            .collect();
        let carried = init.flex.get(&carrier).copied().unwrap_or(0.0);
        for h in 0..t_len {
            let mut terms = vec![(energy[h], 1.0), (rate[h], -1.0)];
            let rhs = if h == 0 {
                carried
            } else {
                terms.push((energy[h - 1], -1.0));
                0.0
            };
            problem.equality(
                format!("flex_dyn.{who}.{carrier}.t{}", window.abs(h)),
                terms,
                rhs,
            );
        }
        // Shift-only demand: all flexible energy served by horizon end.
        let last_hour = scenario.horizon - 1;
        if window.start <= last_hour && last_hour < window.end() {
            problem.equality(
                format!("flex_total.{who}.{carrier}"),
                vec![(energy[last_hour - window.start], 1.0)],
                d.flexible_total,
            );
        }
        flex.insert(carrier, FlexVars { rate, energy });
    }

    let solar_thermal = prosumer.solar_thermal_max.as_ref().map(|profile| {
        (0..t_len)
            .map(|h| {
                let a = window.abs(h);
                problem.add_var(
                    format!("qst.{who}.t{a}"),
                    0.0,
                    profile.get(scenario.wrap_hour(a)),
                )
            })
            .collect::<Vec<_>>()
    });

    // Net power identity: p = generation − consumption − demand.
    let elec_storage = storages.get(&Carrier::Electricity);
    let elec_flex = flex.get(&Carrier::Electricity);
    let elec_base = prosumer.demand_for(Carrier::Electricity);
    for h in 0..t_len {
        let a = window.abs(h);
        let mut terms = vec![(net_power[h], 1.0)];
        for cv in converters.values() {
            if let Some(out) = &cv.elec_out {
                terms.push((out[h], -1.0));
            }
            if let Some(pc) = &cv.elec_in {
                terms.push((pc[h], 1.0));
            }
        }
        if let Some(sv) = elec_storage {
            terms.push((sv.discharge[h], -1.0));
            terms.push((sv.charge[h], 1.0));
        }
        if let Some(fv) = elec_flex {
            terms.push((fv.rate[h], 1.0));
        }
        let rhs = -elec_base.map_or(0.0, |d| d.base.get(scenario.wrap_hour(a)));
        problem.equality(format!("net.{who}.t{a}"), terms, rhs);
    }

    // Local balance for heat and hydrogen: production + discharge −
    // charge = flexible + base demand.
    for carrier in prosumer.local_carriers() {
        for h in 0..t_len {
            let a = window.abs(h);
            let mut terms = Vec::new();
            for cv in converters.values() {
                if let Some((r, out)) = &cv.carrier_out {
                    if *r == carrier {
                        terms.push((out[h], 1.0));
                    }
                }
            }
            if carrier == Carrier::Heat {
                if let Some(st) = &solar_thermal {
                    terms.push((st[h], 1.0));
                }
            }
            if let Some(sv) = storages.get(&carrier) {
                terms.push((sv.discharge[h], 1.0));
                terms.push((sv.charge[h], -1.0));
            }
            if let Some(fv) = flex.get(&carrier) {
                terms.push((fv.rate[h], -1.0));
            }
            let rhs = prosumer
                .demand_for(carrier)
                .map_or(0.0, |d| d.base.get(scenario.wrap_hour(a)));
            problem.equality(format!("local.{who}.{carrier}.t{a}"), terms, rhs);
        }
    }

    // Electricity price terms and consensus penalty.
    match mode {
        ObjectiveMode::Coopt => {}
        ObjectiveMode::Forecast { prices } => {
            for h in 0..t_len {
                problem.add_linear(net_power[h], -prices[h]);
            }
        }
        ObjectiveMode::AdmmPenalty {
            prices,
            rho,
            prev_net,
            prev_imbalance,
        } => {
            for h in 0..t_len {
                problem.add_linear(net_power[h], -prices[h]);
                let target = prev_net[h] - prev_imbalance[h];
                problem.add_quadratic(net_power[h], 0.5 * rho);
                problem.add_linear(net_power[h], -rho * target);
            }
        }
    }

    Ok(ProsumerVars {
        window,
        net_power,
        converters,
        storages,
        flex,
        solar_thermal,
    })
}

/// Tiny throughput charge that breaks the tie between idle storage and
/// zero-value charge/discharge cycling whenever surplus disposal is
/// otherwise free. Far below any real price difference; excluded from
/// reported costs.
const STORAGE_CYCLE_EPS: f64 = 1e-3;

fn add_storage(
    problem: &mut Problem,
    who: &str,
    st: &StorageSpec,
    window: Window,
    init: &EnergyState,
) -> StorageVars {
    let carrier = st.carrier;
    let t_len = window.len;
    let charge: Vec<VarId> = (0..t_len)
        .map(|h| {
            let v = problem.add_var(
                format!("ch.{who}.{carrier}.t{}", window.abs(h)),
                0.0,
                st.power_cap,
            );
            problem.add_linear(v, STORAGE_CYCLE_EPS);
            v
        })
        .collect();
    let discharge: Vec<VarId> = (0..t_len)
        .map(|h| {
            let v = problem.add_var(
                format!("dc.{who}.{carrier}.t{}", window.abs(h)),
                0.0,
                st.power_cap,
            );
            problem.add_linear(v, STORAGE_CYCLE_EPS);
            v
        })
        .collect();
    let energy: Vec<VarId> = (0..t_len)
        .map(|h| {
            problem.add_var(
                format!("es.{who}.{carrier}.t{}", window.abs(h)),
                st.e_min,
                st.e_max,
            )
        })
        .collect();
    let carried = init
        .storage
        .get(&carrier)
        .copied()
        .unwrap_or(st.initial_energy);
    for h in 0..t_len {
        let mut terms = vec![
            (energy[h], 1.0),
            (charge[h], -st.eff_charge),
            (discharge[h], 1.0 / st.eff_discharge),
        ];
        let rhs = if h == 0 {
            carried
        } else {
            terms.push((energy[h - 1], -1.0));
            0.0
        };
        problem.equality(
            format!("soc.{who}.{carrier}.t{}", window.abs(h)),
            terms,
            rhs,
        );
    }
    StorageVars {
        charge,
        discharge,
        energy,
    }
}

/// Smallest price at which truthful generator supply meets `demand` at
/// the given hour. Supply at price λ is Σᵢ clip((λ−βᵢ)/2αᵢ) within the
/// generator bounds; the estimate is found by bisection on [0, ceiling].
pub fn merit_order_price(
    generators: &[GeneratorSpec],
    hour: usize,
    demand: f64,
    ceiling: f64,
) -> f64 {
    let supply = |price: f64| -> f64 {
        generators
            .iter()
            .map(|g| {
                let lo = g.g_min.get(hour);
                let hi = g.g_max.get(hour);
                if g.alpha == 0.0 {
                    if price >= g.beta {
                        hi
                    } else {
                        lo
                    }
                } else {
                    ((price - g.beta) / (2.0 * g.alpha)).clamp(lo, hi)
                }
            })
            .sum()
    };
    if supply(0.0) >= demand {
        return 0.0;
    }
    if supply(ceiling) < demand {
        return ceiling;
    }
    let (mut lo, mut hi) = (0.0, ceiling);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if supply(mid) >= demand {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Builds a standalone full-horizon prosumer problem from its initial state.
pub fn build_prosumer_problem(
    scenario: &Scenario,
    prosumer: &ProsumerSpec,
    mode: ObjectiveMode<'_>,
) -> Result<(Problem, ProsumerVars), AgentError> {
    let mut problem = Problem::new();
    let vars = add_prosumer_problem(
        &mut problem,
        scenario,
        prosumer,
        Window::full(scenario),
        &EnergyState::initial(prosumer),
        mode,
    )?;
    Ok((problem, vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::solve;
    use crate::scenario::{
        ConverterSpec, DemandSpec, StorageSpec, Timeseries, DEFAULT_CEILING_PRICE,
    };
    use std::collections::{BTreeMap, BTreeSet};

    fn assert_close(actual: f64, expected: f64, tol: f64) {
        assert!(
            (actual - expected).abs() <= tol,
            "expected {expected}, got {actual} (tol {tol})"
        );
    }

    fn scenario_shell(horizon: usize, prosumer: ProsumerSpec) -> Scenario {
        let mut carriers: BTreeSet<Carrier> = [Carrier::Electricity].into_iter().collect();
        for c in &prosumer.converters {
            carriers.insert(c.input);
            carriers.insert(c.output);
        }
        for d in &prosumer.demands {
            carriers.insert(d.carrier);
        }
        for s in &prosumer.storages {
            carriers.insert(s.carrier);
        }
        let mut carrier_prices = BTreeMap::new();
        if carriers.contains(&Carrier::Methane) {
            carrier_prices.insert(Carrier::Methane, Timeseries::prices(vec![30.0; horizon]));
        }
        Scenario {
            horizon,
            ceiling_price: DEFAULT_CEILING_PRICE,
            carriers,
            carrier_prices,
            generators: vec![],
            prosumers: vec![prosumer],
        }
    }

    fn pure_consumer(horizon: usize, mw: f64) -> ProsumerSpec {
        ProsumerSpec {
            id: "c".into(),
            converters: vec![],
            storages: vec![],
            demands: vec![DemandSpec {
                carrier: Carrier::Electricity,
                base: Timeseries::megawatts(vec![mw; horizon]),
                flexible_total: 0.0,
                flexible_energy_min: None,
                flexible_energy_max: None,
            }],
            solar_thermal_max: None,
        }
    }

    fn heat_prosumer(horizon: usize) -> ProsumerSpec {
        ProsumerSpec {
            id: "h".into(),
            converters: vec![
                ConverterSpec {
                    id: "hp".into(),
                    input: Carrier::Electricity,
                    output: Carrier::Heat,
                    efficiency_electric: 0.0,
                    efficiency_nonelectric: 3.0,
                    capacity: 20.0,
                    uses_electricity: true,
                    produces_heat: true,
                },
                ConverterSpec {
                    id: "boiler".into(),
                    input: Carrier::Methane,
                    output: Carrier::Heat,
                    efficiency_electric: 0.0,
                    efficiency_nonelectric: 0.9,
                    capacity: 20.0,
                    uses_electricity: false,
                    produces_heat: true,
                },
            ],
            storages: vec![],
            demands: vec![DemandSpec {
                carrier: Carrier::Heat,
                base: Timeseries::megawatts(vec![9.0; horizon]),
                flexible_total: 0.0,
                flexible_energy_min: None,
                flexible_energy_max: None,
            }],
            solar_thermal_max: None,
        }
    }

    #[test]
    fn pure_consumer_nets_minus_demand() {
        let prosumer = pure_consumer(4, 5.0);
        let s = scenario_shell(4, prosumer.clone());
        let prices = vec![37.0; 4];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &prices })
                .unwrap();
        let sol = solve(&problem).unwrap();
        assert!(sol.is_optimal());
        for p in vars.net_power_series(&sol) {
            assert_close(p, -5.0, 1e-7);
        }
    }

    #[test]
    fn heat_prosumer_switches_to_cheapest_route() {
        // Marginal heat cost: heat pump λ/3 vs boiler 30/0.9 = 33.3 €/MWh.
        let prosumer = heat_prosumer(3);
        let s = scenario_shell(3, prosumer.clone());

        let cheap = vec![5.0; 3];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &cheap })
                .unwrap();
        let sol = solve(&problem).unwrap();
        let hp = &vars.converters["hp"];
        let heat_from_hp = sol.value(hp.carrier_out.as_ref().unwrap().1[0]);
        assert_close(heat_from_hp, 9.0, 1e-5);
        assert_close(vars.net_power_series(&sol)[0], -3.0, 1e-5);

        let dear = vec![200.0; 3];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &dear })
                .unwrap();
        let sol = solve(&problem).unwrap();
        let boiler = &vars.converters["boiler"];
        let heat_from_boiler = sol.value(boiler.carrier_out.as_ref().unwrap().1[0]);
        assert_close(heat_from_boiler, 9.0, 1e-5);
        assert_close(vars.net_power_series(&sol)[0], 0.0, 1e-5);
    }

    fn battery_prosumer() -> ProsumerSpec {
        ProsumerSpec {
            id: "b".into(),
            converters: vec![],
            storages: vec![StorageSpec {
                id: "bat".into(),
                carrier: Carrier::Electricity,
                power_cap: 5.0,
                e_min: 0.0,
                e_max: 10.0,
                eff_charge: 0.9,
                eff_discharge: 0.9,
                initial_energy: 5.0,
            }],
            demands: vec![],
            solar_thermal_max: None,
        }
    }

    #[test]
    fn battery_arbitrage_matches_grid_enumeration() {
        // Prices [50, 10, 50]: charge in the valley, discharge at the
        // peaks. Oracle: brute force over a charge/discharge grid.
        let prosumer = battery_prosumer();
        let s = scenario_shell(3, prosumer.clone());
        let prices = [50.0, 10.0, 50.0];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &prices })
                .unwrap();
        let sol = solve(&problem).unwrap();
        assert!(sol.is_optimal());
        let qp_profit = -sol.objective;

        // Grid search: net decision per hour in [-cap, cap], step 0.1.
        let step = 0.1;
        let steps = (2.0 * 5.0 / step) as i64;
        let mut best = f64::NEG_INFINITY;
        let mut best_plan = [0.0; 3];
        let decisions: Vec<f64> = (0..=steps).map(|i| -5.0 + i as f64 * step).collect();
        for &d0 in &decisions {
            for &d1 in &decisions {
                for &d2 in &decisions {
                    let mut e = 5.0_f64;
                    let mut profit = 0.0;
                    let mut ok = true;
                    for (d, price) in [d0, d1, d2].iter().zip(prices.iter()) {
                        // d > 0: discharge d MW; d < 0: charge -d MW.
                        if *d >= 0.0 {
                            e -= d / 0.9;
                        } else {
                            e += 0.9 * (-d);
                        }
                        if !(-1e-9..=10.0 + 1e-9).contains(&e) {
                            ok = false;
                            break;
                        }
                        profit += price * d;
                    }
                    if ok && profit > best {
                        best = profit;
                        best_plan = [d0, d1, d2];
                    }
                }
            }
        }
        // The grid restricts the continuous problem, so the QP can only
        // do better; the gap is bounded by the grid resolution.
        assert!(qp_profit >= best - 1e-6, "qp {qp_profit} < grid {best}");
        assert!(
            qp_profit <= best + 8.0,
            "qp {qp_profit} too far above grid {best}"
        );
        let sv = &vars.storages[&Carrier::Electricity];
        let charge1 = sol.value(sv.charge[1]);
        assert!(best_plan[1] < 0.0, "oracle should charge in the valley");
        assert_close(charge1, 5.0, 1e-4);
        let dc0 = sol.value(sv.discharge[0]);
        let dc2 = sol.value(sv.discharge[2]);
        assert!(dc0 <= 5.0 + 1e-6 && dc2 <= 5.0 + 1e-6);
        assert!(dc0 + dc2 > 0.0);
    }

    #[test]
    fn local_balance_and_energy_conservation_hold() {
        let mut prosumer = heat_prosumer(6);
        prosumer.storages.push(StorageSpec {
            id: "hs".into(),
            carrier: Carrier::Heat,
            power_cap: 4.0,
            e_min: 0.0,
            e_max: 8.0,
            eff_charge: 0.95,
            eff_discharge: 0.95,
            initial_energy: 4.0,
        });
        let s = scenario_shell(6, prosumer.clone());
        let prices = vec![5.0, 80.0, 5.0, 80.0, 5.0, 80.0];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &prices })
                .unwrap();
        let sol = solve(&problem).unwrap();
        assert!(sol.is_optimal());

        let sv = &vars.storages[&Carrier::Heat];
        let mut production_balance_max = 0.0_f64;
        for h in 0..6 {
            let mut production = 0.0;
            for cv in vars.converters.values() {
                if let Some((Carrier::Heat, out)) = &cv.carrier_out {
                    production += sol.value(out[h]);
                }
            }
            let net = production + sol.value(sv.discharge[h]) - sol.value(sv.charge[h]);
            production_balance_max = production_balance_max.max((net - 9.0).abs());
        }
        assert!(production_balance_max <= 1e-6, "{production_balance_max}");

        // e_T − e_0 = Σ (η·ch − dc/η)
        let mut rhs = 0.0;
        for h in 0..6 {
            rhs += 0.95 * sol.value(sv.charge[h]) - sol.value(sv.discharge[h]) / 0.95;
        }
        let delta = sol.value(sv.energy[5]) - 4.0;
        assert_close(delta, rhs, 1e-6);

        // With strict losses the optimum never charges and discharges
        // simultaneously.
        for h in 0..6 {
            let overlap = sol.value(sv.charge[h]).min(sol.value(sv.discharge[h]));
            assert!(overlap <= 1e-6, "simultaneous charge/discharge at {h}");
        }
    }

    #[test]
    fn shift_only_demand_serves_exactly_the_target() {
        let horizon = 4;
        let mut prosumer = pure_consumer(horizon, 1.0);
        prosumer.demands[0].flexible_total = 6.0;
        prosumer.demands[0].flexible_energy_min =
            Some(Timeseries::megawatt_hours(vec![0.0, 0.0, 0.0, 6.0]));
        prosumer.demands[0].flexible_energy_max =
            Some(Timeseries::megawatt_hours(vec![6.0; horizon]));
        let s = scenario_shell(horizon, prosumer.clone());
        let prices = vec![40.0, 10.0, 40.0, 40.0];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &prices })
                .unwrap();
        let sol = solve(&problem).unwrap();
        assert!(sol.is_optimal());
        let fv = &vars.flex[&Carrier::Electricity];
        let served: f64 = (0..horizon).map(|h| sol.value(fv.rate[h])).sum();
        assert_close(served, 6.0, 1e-6);
        // All flexible energy moves to the cheap hour.
        assert_close(sol.value(fv.rate[1]), 6.0, 1e-5);
    }

    #[test]
    fn monotone_price_response() {
        let prosumer = heat_prosumer(4);
        let s = scenario_shell(4, prosumer.clone());
        let mut last_consumption = f64::INFINITY;
        for price in [1.0, 20.0, 50.0, 120.0, 400.0] {
            let prices = vec![price; 4];
            let (problem, vars) =
                build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &prices })
                    .unwrap();
            let sol = solve(&problem).unwrap();
            let consumption: f64 = vars.net_power_series(&sol).iter().map(|p| -p).sum();
            assert!(
                consumption <= last_consumption + 1e-6,
                "consumption rose with price"
            );
            last_consumption = consumption;
        }
    }

    #[test]
    fn admm_penalty_fixed_point_returns_same_dispatch() {
        let prosumer = heat_prosumer(3);
        let s = scenario_shell(3, prosumer.clone());
        let prices = vec![25.0; 3];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &prices })
                .unwrap();
        let sol = solve(&problem).unwrap();
        let base_net = vars.net_power_series(&sol);

        let zeros = vec![0.0; 3];
        let (problem, vars) = build_prosumer_problem(
            &s,
            &prosumer,
            ObjectiveMode::AdmmPenalty {
                prices: &prices,
                rho: 2.0,
                prev_net: &base_net,
                prev_imbalance: &zeros,
            },
        )
        .unwrap();
        let sol = solve(&problem).unwrap();
        let penalized_net = vars.net_power_series(&sol);
        for (a, b) in base_net.iter().zip(penalized_net.iter()) {
            assert_close(*a, *b, 1e-5);
        }
    }

    #[test]
    fn generator_price_response_examples() {
        let flat = |v: f64| Timeseries::megawatts(vec![v; 2]);
        let window = Window { start: 0, len: 2 };

        let cheap = GeneratorSpec {
            id: "g".into(),
            alpha: 0.0,
            beta: 20.0,
            g_min: flat(0.0),
            g_max: flat(100.0),
        };
        let (p, v) = build_generator_problem(&cheap, window, &[30.0, 30.0], None).unwrap();
        let sol = solve(&p).unwrap();
        for g in v.dispatch_series(&sol) {
            assert_close(g, 100.0, 1e-5);
        }

        let (p, v) = build_generator_problem(&cheap, window, &[10.0, 10.0], None).unwrap();
        let sol = solve(&p).unwrap();
        for g in v.dispatch_series(&sol) {
            assert_close(g, 0.0, 1e-5);
        }

        // Interior optimum of (11.2 − 0.01g − 10)·g at g = 1.2/0.02 = 60.
        let quad = GeneratorSpec {
            id: "q".into(),
            alpha: 0.01,
            beta: 10.0,
            g_min: flat(0.0),
            g_max: flat(100.0),
        };
        let (p, v) = build_generator_problem(&quad, window, &[11.2, 11.2], None).unwrap();
        let sol = solve(&p).unwrap();
        for g in v.dispatch_series(&sol) {
            assert_close(g, 60.0, 1e-4);
        }
    }

    #[test]
    fn net_power_sign_convention() {
        // A CHP prosumer generating 10 while local loads consume 4 nets +6.
        let horizon = 2;
        let prosumer = ProsumerSpec {
            id: "chp".into(),
            converters: vec![ConverterSpec {
                id: "unit".into(),
                input: Carrier::Methane,
                output: Carrier::Electricity,
                efficiency_electric: 0.5,
                efficiency_nonelectric: 0.0,
                capacity: 20.0,
                uses_electricity: false,
                produces_heat: false,
            }],
            storages: vec![],
            demands: vec![DemandSpec {
                carrier: Carrier::Electricity,
                base: Timeseries::megawatts(vec![4.0; horizon]),
                flexible_total: 0.0,
                flexible_energy_min: None,
                flexible_energy_max: None,
            }],
            solar_thermal_max: None,
        };
        let s = scenario_shell(horizon, prosumer.clone());
        // Fuel at 30/0.5 = 60 €/MWh(e) marginal; price 100 → run at cap.
        let prices = vec![100.0; horizon];
        let (problem, vars) =
            build_prosumer_problem(&s, &prosumer, ObjectiveMode::Forecast { prices: &prices })
                .unwrap();
        let sol = solve(&problem).unwrap();
        assert_close(vars.net_power_series(&sol)[0], 6.0, 1e-5);

        let consumer = pure_consumer(horizon, 5.0);
        let s = scenario_shell(horizon, consumer.clone());
        let (problem, vars) =
            build_prosumer_problem(&s, &consumer, ObjectiveMode::Forecast { prices: &prices })
                .unwrap();
        let sol = solve(&problem).unwrap();
        assert_eq!(
            net_power_of(&sol, &AgentVars::Prosumer(vars))[0].round(),
            -5.0
        );
    }
}
