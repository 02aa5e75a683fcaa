//! Synthetic scenario generation for experiments and property tests.
//!
//! Generation is fully deterministic in the seed. The agent mix follows
//! a 16:14 generator/prosumer split at 30 agents and adds roughly six
//! generators and four prosumers per ten further agents.

use super::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 5 agents, got {0}")]
    TooFewAgents(usize),
    #[error("need a horizon of at least 24 hours, got {0}")]
    HorizonTooShort(usize),
}

/// Number of generators for a total agent count.
fn generator_count(n_agents: usize) -> usize {
    let g = (6 * n_agents + 5) / 10;
    g.saturating_sub(2).clamp(1, n_agents - 1)
}

/// Builds a deterministic scenario with `n_agents` agents over `horizon`
/// hours. The result always passes [`validate_scenario`].
pub fn synthesize_scenario(
    n_agents: usize,
    horizon: usize,
    seed: u64,
) -> Result<Scenario, SynthError> {
    if n_agents < 5 {
        return Err(SynthError::TooFewAgents(n_agents));
    }
    if horizon < 24 {
        return Err(SynthError::HorizonTooShort(horizon));
    }
    Ok(synthesize_unchecked(n_agents, horizon, seed))
}

/// Same generator without the size preconditions. Used by property tests
/// that want very small instances.
pub(crate) fn synthesize_unchecked(n_agents: usize, horizon: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_gen = generator_count(n_agents);
    let n_pros = n_agents - n_gen;
    let t = horizon;

    let mut prosumers = Vec::with_capacity(n_pros);
    // Forced electric draw: base demand plus conversion loads that have
    // no non-electric fallback. Used to size the generator fleet.
    let mut forced_peak = 0.0_f64;
    for i in 0..n_pros {
        let (p, peak) = make_prosumer(i, t, &mut rng);
        forced_peak += peak;
        prosumers.push(p);
    }

    let total_cap = (forced_peak * 1.8).max(10.0);
    let mut generators = Vec::with_capacity(n_gen);
    let mut shares = Vec::with_capacity(n_gen);
    let mut share_sum = 0.0;
    for _ in 0..n_gen {
        let s: f64 = rng.gen_range(0.5..1.5);
        share_sum += s;
        shares.push(s);
    }
    for (i, share) in shares.iter().enumerate() {
        let cap = total_cap * share / share_sum;
        let alpha = rng.gen_range(0.002..0.04);
        let beta = rng.gen_range(5.0..80.0);
        let wobble: Vec<f64> = (0..t)
            .map(|h| cap * (0.9 + 0.1 * daily_wave(h, i as f64)))
            .collect();
        generators.push(GeneratorSpec {
            id: format!("gen{i}"),
            alpha,
            beta,
            g_min: Timeseries::megawatts(vec![0.0; t]),
            g_max: Timeseries::megawatts(wobble),
        });
    }

    let mut carriers: BTreeSet<Carrier> = [Carrier::Electricity].into_iter().collect();
    let mut needs_methane = false;
    for p in &prosumers {
        for c in &p.converters {
            carriers.insert(c.input);
            carriers.insert(c.output);
            if c.input == Carrier::Methane {
                needs_methane = true;
            }
        }
        for st in &p.storages {
            carriers.insert(st.carrier);
        }
        for d in &p.demands {
            carriers.insert(d.carrier);
        }
    }
    let mut carrier_prices = BTreeMap::new();
    if needs_methane {
        let base = rng.gen_range(20.0..40.0);
        let series: Vec<f64> = (0..t)
            .map(|h| base * (1.0 + 0.1 * daily_wave(h, 0.0)))
            .collect();
        carrier_prices.insert(Carrier::Methane, Timeseries::prices(series));
    }

    Scenario {
        horizon: t,
        ceiling_price: DEFAULT_CEILING_PRICE,
        carriers,
        carrier_prices,
        generators,
        prosumers,
    }
}

fn daily_wave(hour: usize, phase: f64) -> f64 {
    let x = (hour % 24) as f64 / 24.0 * std::f64::consts::TAU + phase;
    x.sin()
}

fn base_profile(t: usize, peak: f64, phase: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..t)
        .map(|h| {
            let shape = 0.7 + 0.3 * daily_wave(h, phase);
            (peak * shape * rng.gen_range(0.95..1.05)).max(0.0)
        })
        .collect()
}

/// Cumulative flexible-energy envelope: served energy may lag or lead
/// the pro-rata path by at most four hours' worth, which keeps the
/// catch-up rate near the horizon end bounded.
fn flex_envelope(t: usize, total: f64) -> (Timeseries, Timeseries) {
    let hourly = total / t as f64;
    let lo: Vec<f64> = (0..t)
        .map(|h| (total * (h + 1) as f64 / t as f64 - 4.0 * hourly).max(0.0))
        .collect();
    let hi: Vec<f64> = (0..t)
        .map(|h| (total * (h + 1) as f64 / t as f64 + 4.0 * hourly).min(total))
        .collect();
    (
        Timeseries::megawatt_hours(lo),
        Timeseries::megawatt_hours(hi),
    )
}

/// Builds one prosumer and returns it with its forced electric peak
/// (base electric demand plus conversion loads without fuel fallback).
fn make_prosumer(index: usize, t: usize, rng: &mut ChaCha8Rng) -> (ProsumerSpec, f64) {
    let id = format!("pros{index}");
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    match index % 5 {
        // Passive electric consumer.
        0 => {
            let peak = rng.gen_range(5.0..20.0);
            let base = base_profile(t, peak, phase, rng);
            let forced = base.iter().cloned().fold(0.0, f64::max);
            (
                ProsumerSpec {
                    id,
                    converters: vec![],
                    storages: vec![],
                    demands: vec![DemandSpec {
                        carrier: Carrier::Electricity,
                        base: Timeseries::megawatts(base),
                        flexible_total: 0.0,
                        flexible_energy_min: None,
                        flexible_energy_max: None,
                    }],
                    solar_thermal_max: None,
                },
                forced,
            )
        }
        // Battery owner with shiftable electric demand.
        1 => {
            let peak = rng.gen_range(4.0..15.0);
            let base = base_profile(t, peak, phase, rng);
            let forced = base.iter().cloned().fold(0.0, f64::max);
            let e_max = rng.gen_range(10.0..30.0);
            let power = rng.gen_range(3.0..8.0);
            let flex_total = rng.gen_range(2.0..8.0) * (t as f64 / 24.0);
            let (fmin, fmax) = flex_envelope(t, flex_total);
            (
                ProsumerSpec {
                    id: id.clone(),
                    converters: vec![],
                    storages: vec![StorageSpec {
                        id: format!("{id}.bat"),
                        carrier: Carrier::Electricity,
                        power_cap: power,
                        e_min: 0.0,
                        e_max,
                        eff_charge: rng.gen_range(0.88..0.97),
                        eff_discharge: rng.gen_range(0.88..0.97),
                        initial_energy: 0.5 * e_max,
                    }],
                    demands: vec![DemandSpec {
                        carrier: Carrier::Electricity,
                        base: Timeseries::megawatts(base),
                        flexible_total: flex_total,
                        flexible_energy_min: Some(fmin),
                        flexible_energy_max: Some(fmax),
                    }],
                    solar_thermal_max: None,
                },
                // Base plus the worst flexible catch-up rate.
                forced + 5.0 * flex_total / t as f64,
            )
        }
        // Heat prosumer: heat pump with gas-boiler fallback, storage,
        // and a shiftable share of the heat demand.
        2 => {
            let heat_peak = rng.gen_range(5.0..18.0);
            let heat_base = base_profile(t, heat_peak, phase, rng);
            let cop = rng.gen_range(2.5..4.0);
            let e_max = rng.gen_range(15.0..40.0);
            let heat_flex = rng.gen_range(1.0..5.0) * (t as f64 / 24.0);
            let (fmin, fmax) = flex_envelope(t, heat_flex);
            let solar = (0..t)
                .map(|h| {
                    let hour = h % 24;
                    if (8..17).contains(&hour) {
                        heat_peak * 0.2 * daily_wave(h + 18, 0.0).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            (
                ProsumerSpec {
                    id: id.clone(),
                    converters: vec![
                        ConverterSpec {
                            id: format!("{id}.hp"),
                            input: Carrier::Electricity,
                            output: Carrier::Heat,
                            efficiency_electric: 0.0,
                            efficiency_nonelectric: cop,
                            capacity: heat_peak,
                            uses_electricity: true,
                            produces_heat: true,
                        },
                        ConverterSpec {
                            id: format!("{id}.boiler"),
                            input: Carrier::Methane,
                            output: Carrier::Heat,
                            efficiency_electric: 0.0,
                            efficiency_nonelectric: rng.gen_range(0.85..0.98),
                            capacity: heat_peak * 1.5,
                            uses_electricity: false,
                            produces_heat: true,
                        },
                    ],
                    storages: vec![StorageSpec {
                        id: format!("{id}.hstore"),
                        carrier: Carrier::Heat,
                        power_cap: heat_peak * 0.6,
                        e_min: 0.0,
                        e_max,
                        eff_charge: rng.gen_range(0.9..0.98),
                        eff_discharge: rng.gen_range(0.9..0.98),
                        initial_energy: 0.5 * e_max,
                    }],
                    demands: vec![DemandSpec {
                        carrier: Carrier::Heat,
                        base: Timeseries::megawatts(heat_base),
                        flexible_total: heat_flex,
                        flexible_energy_min: Some(fmin),
                        flexible_energy_max: Some(fmax),
                    }],
                    solar_thermal_max: Some(Timeseries::megawatts(solar)),
                },
                // Gas fallback exists: no forced electric draw.
                0.0,
            )
        }
        // Hydrogen prosumer: electrolyzer is the only supply route.
        3 => {
            let h_peak = rng.gen_range(2.0..8.0);
            let h_base = base_profile(t, h_peak, phase, rng);
            let eff = rng.gen_range(0.6..0.75);
            let e_max = rng.gen_range(10.0..30.0);
            let forced = h_base.iter().cloned().fold(0.0, f64::max) / eff;
            (
                ProsumerSpec {
                    id: id.clone(),
                    converters: vec![ConverterSpec {
                        id: format!("{id}.elz"),
                        input: Carrier::Electricity,
                        output: Carrier::Hydrogen,
                        efficiency_electric: 0.0,
                        efficiency_nonelectric: eff,
                        capacity: h_peak * 2.5 / eff,
                        uses_electricity: true,
                        produces_heat: false,
                    }],
                    storages: vec![StorageSpec {
                        id: format!("{id}.htank"),
                        carrier: Carrier::Hydrogen,
                        power_cap: h_peak * 1.5,
                        e_min: 0.0,
                        e_max,
                        eff_charge: rng.gen_range(0.9..0.99),
                        eff_discharge: rng.gen_range(0.9..0.99),
                        initial_energy: 0.5 * e_max,
                    }],
                    demands: vec![DemandSpec {
                        carrier: Carrier::Hydrogen,
                        base: Timeseries::megawatts(h_base),
                        flexible_total: 0.0,
                        flexible_energy_min: None,
                        flexible_energy_max: None,
                    }],
                    solar_thermal_max: None,
                },
                forced,
            )
        }
        // CHP site: sells electricity, covers local heat with storage
        // buffering, boiler backup.
        _ => {
            let heat_peak = rng.gen_range(4.0..12.0);
            let heat_base = base_profile(t, heat_peak, phase, rng);
            let e_eff = rng.gen_range(0.3..0.45);
            let q_eff = rng.gen_range(0.35..0.5);
            let e_max = rng.gen_range(10.0..25.0);
            (
                ProsumerSpec {
                    id: id.clone(),
                    converters: vec![
                        ConverterSpec {
                            id: format!("{id}.chp"),
                            input: Carrier::Methane,
                            output: Carrier::Electricity,
                            efficiency_electric: e_eff,
                            efficiency_nonelectric: q_eff,
                            capacity: heat_peak * 2.0 / q_eff,
                            uses_electricity: false,
                            produces_heat: true,
                        },
                        ConverterSpec {
                            id: format!("{id}.boiler"),
                            input: Carrier::Methane,
                            output: Carrier::Heat,
                            efficiency_electric: 0.0,
                            efficiency_nonelectric: rng.gen_range(0.85..0.98),
                            capacity: heat_peak * 1.5,
                            uses_electricity: false,
                            produces_heat: true,
                        },
                    ],
                    storages: vec![StorageSpec {
                        id: format!("{id}.hstore"),
                        carrier: Carrier::Heat,
                        power_cap: heat_peak * 0.8,
                        e_min: 0.0,
                        e_max,
                        eff_charge: rng.gen_range(0.9..0.98),
                        eff_discharge: rng.gen_range(0.9..0.98),
                        initial_energy: 0.5 * e_max,
                    }],
                    demands: vec![DemandSpec {
                        carrier: Carrier::Heat,
                        base: Timeseries::megawatts(heat_base),
                        flexible_total: 0.0,
                        flexible_energy_min: None,
                        flexible_energy_max: None,
                    }],
                    solar_thermal_max: None,
                },
                0.0,
            )
        }
    }
}
