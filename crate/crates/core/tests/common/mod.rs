// Hour-indexed checks read best as explicit loops.
#![allow(clippy::needless_range_loop)]

//! Shared checkers for the integration and acceptance suites.

use mies_core::dispatch::DispatchResult;
use mies_core::scenario::{Carrier, Scenario};

pub const BALANCE_TOL: f64 = 1e-4;
pub const LOCAL_TOL: f64 = 1e-6;

/// Asserts every physical invariant on a dispatch result: hourly
/// electric balance, local heat/hydrogen balance, converter physics,
/// storage envelopes and no simultaneous charge/discharge, flexible
/// demand conservation, and generator bounds.
pub fn assert_physics(result: &DispatchResult, scenario: &Scenario, label: &str) {
    let horizon = scenario.horizon;

    for t in 0..horizon {
        let imbalance = result.hourly_imbalance(t);
        assert!(
            imbalance.abs() <= BALANCE_TOL,
            "{label}: electric imbalance {imbalance} at t={t}"
        );
    }

    for (gen, series) in scenario.generators.iter().zip(&result.generator_dispatch) {
        for t in 0..horizon {
            assert!(
                series[t] >= gen.g_min.get(t) - LOCAL_TOL
                    && series[t] <= gen.g_max.get(t) + LOCAL_TOL,
                "{label}: generator {} out of bounds at t={t}: {}",
                gen.id,
                series[t]
            );
        }
    }

    for (spec, dispatch) in scenario.prosumers.iter().zip(&result.prosumers) {
        // Converter physics.
        for conv in &spec.converters {
            let fuel = dispatch.fuel_in.get(&conv.id);
            let elec = dispatch.elec_in.get(&conv.id);
            for t in 0..horizon {
                let input = fuel.map_or(0.0, |v| v[t]) + elec.map_or(0.0, |v| v[t]);
                assert!(
                    input <= conv.capacity + LOCAL_TOL && input >= -LOCAL_TOL,
                    "{label}: converter {} input {input} outside capacity at t={t}",
                    conv.id
                );
                if let Some(out) = dispatch.elec_out.get(&conv.id) {
                    let expected = conv.efficiency_electric * fuel.map_or(0.0, |v| v[t]);
                    assert!(
                        (out[t] - expected).abs() <= LOCAL_TOL,
                        "{label}: converter {} electric output mismatch at t={t}",
                        conv.id
                    );
                }
                if let Some((_, out)) = dispatch.carrier_out.get(&conv.id) {
                    let limit = conv.efficiency_nonelectric * input;
                    if conv.is_x2p() {
                        // Cogeneration heat recovery is up to the limit.
                        assert!(
                            out[t] <= limit + LOCAL_TOL && out[t] >= -LOCAL_TOL,
                            "{label}: converter {} cogeneration above limit at t={t}",
                            conv.id
                        );
                    } else {
                        assert!(
                            (out[t] - limit).abs() <= LOCAL_TOL,
                            "{label}: converter {} carrier output mismatch at t={t}",
                            conv.id
                        );
                    }
                }
            }
        }

        // Local heat/hydrogen balance.
        for carrier in [Carrier::Heat, Carrier::Hydrogen] {
            let touched = dispatch.carrier_out.values().any(|(c, _)| *c == carrier)
                || dispatch.storage_charge.contains_key(&carrier)
                || dispatch.flex_rate.contains_key(&carrier)
                || spec.demand_for(carrier).is_some()
                || (carrier == Carrier::Heat && dispatch.solar_thermal.is_some());
            if !touched {
                continue;
            }
            for t in 0..horizon {
                let production: f64 = dispatch
                    .carrier_out
                    .values()
                    .filter(|(c, _)| *c == carrier)
                    .map(|(_, v)| v[t])
                    .sum::<f64>()
                    + if carrier == Carrier::Heat {
                        dispatch.solar_thermal.as_ref().map_or(0.0, |v| v[t])
                    } else {
                        0.0
                    };
                let discharge = dispatch
                    .storage_discharge
                    .get(&carrier)
                    .map_or(0.0, |v| v[t]);
                let charge = dispatch.storage_charge.get(&carrier).map_or(0.0, |v| v[t]);
                let flex = dispatch.flex_rate.get(&carrier).map_or(0.0, |v| v[t]);
                let base = spec.demand_for(carrier).map_or(0.0, |d| d.base.get(t));
                let residual = production + discharge - charge - flex - base;
                assert!(
                    residual.abs() <= LOCAL_TOL,
                    "{label}: {} balance residual {residual} for {} at t={t}",
                    carrier,
                    spec.id
                );
            }
        }

        // Storage envelopes, dynamics, and charge/discharge exclusivity.
        for st in &spec.storages {
            let charge = &dispatch.storage_charge[&st.carrier];
            let discharge = &dispatch.storage_discharge[&st.carrier];
            let energy = &dispatch.storage_energy[&st.carrier];
            let mut level = st.initial_energy;
            for t in 0..horizon {
                assert!(
                    energy[t] >= st.e_min - LOCAL_TOL && energy[t] <= st.e_max + LOCAL_TOL,
                    "{label}: storage {} level {} outside [{}, {}] at t={t}",
                    st.id,
                    energy[t],
                    st.e_min,
                    st.e_max
                );
                assert!(
                    charge[t].min(discharge[t]) <= LOCAL_TOL,
                    "{label}: storage {} charges and discharges at t={t}",
                    st.id
                );
                level += st.eff_charge * charge[t] - discharge[t] / st.eff_discharge;
                assert!(
                    (energy[t] - level).abs() <= 1e-5,
                    "{label}: storage {} dynamics drift {} at t={t}",
                    st.id,
                    (energy[t] - level).abs()
                );
            }
        }

        // Flexible demand: envelope plus exact conservation.
        for demand in spec.demands.iter().filter(|d| d.has_flexibility()) {
            let rate = &dispatch.flex_rate[&demand.carrier];
            let energy = &dispatch.flex_energy[&demand.carrier];
            for t in 0..horizon {
                assert!(
                    energy[t] >= demand.envelope_min(t) - LOCAL_TOL
                        && energy[t] <= demand.envelope_max(t) + LOCAL_TOL,
                    "{label}: flexible {} energy outside envelope at t={t}",
                    demand.carrier
                );
            }
            let served: f64 = rate.iter().sum();
            assert!(
                (served - demand.flexible_total).abs() <= LOCAL_TOL,
                "{label}: flexible {} serves {served}, target {}",
                demand.carrier,
                demand.flexible_total
            );
            assert!(
                (energy[horizon - 1] - demand.flexible_total).abs() <= LOCAL_TOL,
                "{label}: flexible {} ends at {}, target {}",
                demand.carrier,
                energy[horizon - 1],
                demand.flexible_total
            );
        }
    }
}
