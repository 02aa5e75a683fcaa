//! Common output type of all three coordinators: per-agent, per-hour
//! dispatch of every asset, the electricity price series, total system
//! cost, and run diagnostics. Serialized as one CSV per variable family
//! (columns = agents/assets, rows = hours) plus a summary file.

use crate::agents::ProsumerVars;
use crate::qp::Solution;
use crate::runtime::EventTrace;
use crate::scenario::{Carrier, Scenario};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Duration;
use thiserror::Error;

/// Coordination mechanism that produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Coopt,
    PriceResponse,
    MarketAuction,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Coopt => "coopt",
            Method::PriceResponse => "admm",
            Method::MarketAuction => "auction",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coopt" => Ok(Method::Coopt),
            "admm" => Ok(Method::PriceResponse),
            "auction" => Ok(Method::MarketAuction),
            other => Err(format!(
                "unknown method `{other}` (expected coopt, admm, or auction)"
            )),
        }
    }
}

/// Full per-hour variable values of one prosumer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProsumerDispatch {
    pub net_power: Vec<f64>,
    /// Fuel consumption per converter id.
    pub fuel_in: BTreeMap<String, Vec<f64>>,
    /// Grid electricity consumption per converter id.
    pub elec_in: BTreeMap<String, Vec<f64>>,
    /// Electric output per converter id.
    pub elec_out: BTreeMap<String, Vec<f64>>,
    /// Non-electric output per converter id (with carrier).
    pub carrier_out: BTreeMap<String, (Carrier, Vec<f64>)>,
    pub storage_charge: BTreeMap<Carrier, Vec<f64>>,
    pub storage_discharge: BTreeMap<Carrier, Vec<f64>>,
    pub storage_energy: BTreeMap<Carrier, Vec<f64>>,
    pub flex_rate: BTreeMap<Carrier, Vec<f64>>,
    pub flex_energy: BTreeMap<Carrier, Vec<f64>>,
    pub solar_thermal: Option<Vec<f64>>,
}

impl ProsumerDispatch {
    /// Reads all variable families out of a solved problem.
    pub fn from_solution(sol: &Solution, vars: &ProsumerVars) -> Self {
        let mut out = ProsumerDispatch {
            net_power: vars.net_power_series(sol),
            ..Default::default()
        };
        for (id, cv) in &vars.converters {
            if let Some(x) = &cv.fuel_in {
                out.fuel_in.insert(id.clone(), sol.values_of(x));
            }
            if let Some(pc) = &cv.elec_in {
                out.elec_in.insert(id.clone(), sol.values_of(pc));
            }
            if let Some(pg) = &cv.elec_out {
                out.elec_out.insert(id.clone(), sol.values_of(pg));
            }
            if let Some((carrier, r)) = &cv.carrier_out {
                out.carrier_out
                    .insert(id.clone(), (*carrier, sol.values_of(r)));
            }
        }
        for (carrier, sv) in &vars.storages {
            out.storage_charge
                .insert(*carrier, sol.values_of(&sv.charge));
            out.storage_discharge
                .insert(*carrier, sol.values_of(&sv.discharge));
            out.storage_energy
                .insert(*carrier, sol.values_of(&sv.energy));
        }
        for (carrier, fv) in &vars.flex {
            out.flex_rate.insert(*carrier, sol.values_of(&fv.rate));
            out.flex_energy.insert(*carrier, sol.values_of(&fv.energy));
        }
        out.solar_thermal = vars.solar_thermal.as_ref().map(|st| sol.values_of(st));
        out
    }

    /// Allocates empty hour-indexed series matching another shape; used
    /// by the rolling coordinator that commits one hour at a time.
    pub fn like(other: &ProsumerDispatch, horizon: usize) -> Self {
        let resize = |m: &BTreeMap<String, Vec<f64>>| {
            m.keys()
                .map(|k| (k.clone(), vec![0.0; horizon]))
                .collect::<BTreeMap<_, _>>()
        };
        let resize_c = |m: &BTreeMap<Carrier, Vec<f64>>| {
            m.keys()
                .map(|k| (*k, vec![0.0; horizon]))
                .collect::<BTreeMap<_, _>>()
        };
        ProsumerDispatch {
            net_power: vec![0.0; horizon],
            fuel_in: resize(&other.fuel_in),
            elec_in: resize(&other.elec_in),
            elec_out: resize(&other.elec_out),
            carrier_out: other
                .carrier_out
                .iter()
                .map(|(k, (c, _))| (k.clone(), (*c, vec![0.0; horizon])))
                .collect(),
            storage_charge: resize_c(&other.storage_charge),
            storage_discharge: resize_c(&other.storage_discharge),
            storage_energy: resize_c(&other.storage_energy),
            flex_rate: resize_c(&other.flex_rate),
            flex_energy: resize_c(&other.flex_energy),
            solar_thermal: other.solar_thermal.as_ref().map(|_| vec![0.0; horizon]),
        }
    }

    /// Copies hour `src_hour` of `src` into hour `dst_hour` of `self`.
    pub fn commit_hour(&mut self, dst_hour: usize, src: &ProsumerDispatch, src_hour: usize) {
        self.net_power[dst_hour] = src.net_power[src_hour];
        for (k, v) in &src.fuel_in {
            self.fuel_in.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        for (k, v) in &src.elec_in {
            self.elec_in.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        for (k, v) in &src.elec_out {
            self.elec_out.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        for (k, (_, v)) in &src.carrier_out {
            self.carrier_out.get_mut(k).unwrap().1[dst_hour] = v[src_hour];
        }
        for (k, v) in &src.storage_charge {
            self.storage_charge.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        for (k, v) in &src.storage_discharge {
            self.storage_discharge.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        for (k, v) in &src.storage_energy {
            self.storage_energy.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        for (k, v) in &src.flex_rate {
            self.flex_rate.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        for (k, v) in &src.flex_energy {
            self.flex_energy.get_mut(k).unwrap()[dst_hour] = v[src_hour];
        }
        if let (Some(dst), Some(s)) = (self.solar_thermal.as_mut(), src.solar_thermal.as_ref()) {
            dst[dst_hour] = s[src_hour];
        }
    }
}

/// One row of the iterative coordinator's residual trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub iteration: usize,
    /// Price series broadcast this iteration.
    pub prices: Vec<f64>,
    /// Per-hour imbalance computed from this iteration's dispatch.
    pub imbalance: Vec<f64>,
    pub rho: f64,
    /// Scalar primal residual (mean absolute hourly imbalance).
    pub primal: f64,
    /// Scalar dual residual; absent on the first iteration.
    pub dual: Option<f64>,
}

/// Non-value diagnostics attached to a result.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub wall_time: Duration,
    pub iterations: usize,
    pub solve_count: usize,
    pub converged: bool,
    pub residual_trace: Vec<ResidualRow>,
    pub event_trace: Option<EventTrace>,
}

/// One bid block as logged by the rolling auction.
#[derive(Debug, Clone, PartialEq)]
pub struct BidRecord {
    pub hour: usize,
    pub prosumer: String,
    pub price: f64,
    pub quantity: f64,
    pub accepted: f64,
}

/// Dispatch, prices, and cost produced by one coordinator run.
#[derive(Debug, Clone)]
pub struct DispatchResult {
    pub method: Method,
    /// Generator dispatch, same order as `scenario.generators`.
    pub generator_dispatch: Vec<Vec<f64>>,
    /// Full prosumer dispatch, same order as `scenario.prosumers`.
    pub prosumers: Vec<ProsumerDispatch>,
    /// Electricity price series λ_t [€/MWh].
    pub prices: Vec<f64>,
    /// Total system cost [€].
    pub total_cost: f64,
    pub diagnostics: Diagnostics,
    /// Per-hour bid log (rolling auction only).
    pub bids: Vec<BidRecord>,
}

impl DispatchResult {
    /// Net system imbalance Σg + Σp at one hour.
    pub fn hourly_imbalance(&self, t: usize) -> f64 {
        let gen: f64 = self.generator_dispatch.iter().map(|g| g[t]).sum();
        let pros: f64 = self.prosumers.iter().map(|p| p.net_power[t]).sum();
        gen + pros
    }

    /// Order-stable hash over every dispatched value's bit pattern.
    /// Two results with equal fingerprints carry bit-identical values.
    pub fn value_fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut eat = |v: &[f64]| {
            for x in v {
                h.write_u64(x.to_bits());
            }
        };
        for g in &self.generator_dispatch {
            eat(g);
        }
        for p in &self.prosumers {
            eat(&p.net_power);
            for v in p.fuel_in.values() {
                eat(v);
            }
            for v in p.elec_in.values() {
                eat(v);
            }
            for v in p.elec_out.values() {
                eat(v);
            }
            for (_, v) in p.carrier_out.values() {
                eat(v);
            }
            for v in p.storage_charge.values() {
                eat(v);
            }
            for v in p.storage_discharge.values() {
                eat(v);
            }
            for v in p.storage_energy.values() {
                eat(v);
            }
            for v in p.flex_rate.values() {
                eat(v);
            }
            for v in p.flex_energy.values() {
                eat(v);
            }
            if let Some(v) = &p.solar_thermal {
                eat(v);
            }
        }
        eat(&self.prices);
        h.write_u64(self.total_cost.to_bits());
        h.finish()
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("failed to write `{path}`: {message}")]
    Write { path: String, message: String },
}

fn wtr(path: &Path) -> Result<csv::Writer<std::fs::File>, ExportError> {
    csv::Writer::from_path(path).map_err(|e| ExportError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn finish(w: &mut csv::Writer<std::fs::File>, path: &Path) -> Result<(), ExportError> {
    w.flush().map_err(|e| ExportError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_table(
    path: &Path,
    horizon: usize,
    columns: &[(String, &[f64])],
) -> Result<(), ExportError> {
    let mut w = wtr(path)?;
    let mut header = vec!["hour".to_string()];
    header.extend(columns.iter().map(|(h, _)| h.clone()));
    w.write_record(&header).map_err(|e| ExportError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for t in 0..horizon {
        let mut row = vec![t.to_string()];
        row.extend(columns.iter().map(|(_, v)| format!("{}", v[t])));
        w.write_record(&row).map_err(|e| ExportError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    finish(&mut w, path)
}

/// Writes the full result as CSV files under `dir`.
pub fn write_dispatch_csv(
    result: &DispatchResult,
    scenario: &Scenario,
    dir: &Path,
) -> Result<(), ExportError> {
    std::fs::create_dir_all(dir).map_err(|e| ExportError::Write {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let t = scenario.horizon;

    write_table(
        &dir.join("prices.csv"),
        t,
        &[("price".to_string(), result.prices.as_slice())],
    )?;

    let gen_cols: Vec<(String, &[f64])> = scenario
        .generators
        .iter()
        .zip(result.generator_dispatch.iter())
        .map(|(g, v)| (g.id.clone(), v.as_slice()))
        .collect();
    write_table(&dir.join("generators.csv"), t, &gen_cols)?;

    let net_cols: Vec<(String, &[f64])> = scenario
        .prosumers
        .iter()
        .zip(result.prosumers.iter())
        .map(|(p, d)| (p.id.clone(), d.net_power.as_slice()))
        .collect();
    write_table(&dir.join("prosumer_net.csv"), t, &net_cols)?;

    type Columns<'a> = Vec<(String, &'a [f64])>;
    let mut families: Vec<(&str, Columns<'_>)> = vec![
        ("converter_fuel_in.csv", vec![]),
        ("converter_elec_in.csv", vec![]),
        ("converter_elec_out.csv", vec![]),
        ("converter_carrier_out.csv", vec![]),
        ("storage_charge.csv", vec![]),
        ("storage_discharge.csv", vec![]),
        ("storage_energy.csv", vec![]),
        ("flex_rate.csv", vec![]),
        ("flex_energy.csv", vec![]),
        ("solar_thermal.csv", vec![]),
    ];
    for (spec, d) in scenario.prosumers.iter().zip(result.prosumers.iter()) {
        let pid = &spec.id;
        for (k, v) in &d.fuel_in {
            families[0].1.push((format!("{pid}.{k}"), v.as_slice()));
        }
        for (k, v) in &d.elec_in {
            families[1].1.push((format!("{pid}.{k}"), v.as_slice()));
        }
        for (k, v) in &d.elec_out {
            families[2].1.push((format!("{pid}.{k}"), v.as_slice()));
        }
        for (k, (c, v)) in &d.carrier_out {
            families[3].1.push((format!("{pid}.{k}.{c}"), v.as_slice()));
        }
        for (c, v) in &d.storage_charge {
            families[4].1.push((format!("{pid}.{c}"), v.as_slice()));
        }
        for (c, v) in &d.storage_discharge {
            families[5].1.push((format!("{pid}.{c}"), v.as_slice()));
        }
        for (c, v) in &d.storage_energy {
            families[6].1.push((format!("{pid}.{c}"), v.as_slice()));
        }
        for (c, v) in &d.flex_rate {
            families[7].1.push((format!("{pid}.{c}"), v.as_slice()));
        }
        for (c, v) in &d.flex_energy {
            families[8].1.push((format!("{pid}.{c}"), v.as_slice()));
        }
        if let Some(v) = &d.solar_thermal {
            families[9].1.push((pid.clone(), v.as_slice()));
        }
    }
    for (name, cols) in &families {
        if !cols.is_empty() {
            write_table(&dir.join(name), t, cols)?;
        }
    }

    if !result.diagnostics.residual_trace.is_empty() {
        let path = dir.join("residuals.csv");
        let mut w = wtr(&path)?;
        let werr = |e: csv::Error| ExportError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        w.write_record(["iteration", "primal", "dual", "rho"])
            .map_err(werr)?;
        for row in &result.diagnostics.residual_trace {
            w.write_record([
                row.iteration.to_string(),
                format!("{}", row.primal),
                row.dual.map_or(String::new(), |d| format!("{d}")),
                format!("{}", row.rho),
            ])
            .map_err(werr)?;
        }
        finish(&mut w, &path)?;
    }

    if !result.bids.is_empty() {
        let path = dir.join("bids.csv");
        let mut w = wtr(&path)?;
        let werr = |e: csv::Error| ExportError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        w.write_record([
            "hour",
            "prosumer",
            "block_price",
            "block_quantity",
            "accepted",
        ])
        .map_err(werr)?;
        for b in &result.bids {
            w.write_record([
                b.hour.to_string(),
                b.prosumer.clone(),
                format!("{}", b.price),
                format!("{}", b.quantity),
                format!("{}", b.accepted),
            ])
            .map_err(werr)?;
        }
        finish(&mut w, &path)?;
    }

    if let Some(trace) = &result.diagnostics.event_trace {
        trace
            .write_csv(&dir.join("profile.csv"))
            .map_err(|e| ExportError::Write {
                path: dir.join("profile.csv").display().to_string(),
                message: e.to_string(),
            })?;
    }

    let path = dir.join("summary.csv");
    let mut w = wtr(&path)?;
    let werr = |e: csv::Error| ExportError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    w.write_record([
        "method",
        "total_cost",
        "wall_ms",
        "iterations",
        "solve_count",
        "converged",
    ])
    .map_err(werr)?;
    w.write_record([
        result.method.to_string(),
        format!("{}", result.total_cost),
        format!("{:.3}", result.diagnostics.wall_time.as_secs_f64() * 1e3),
        result.diagnostics.iterations.to_string(),
        result.diagnostics.solve_count.to_string(),
        result.diagnostics.converged.to_string(),
    ])
    .map_err(werr)?;
    finish(&mut w, &path)
}
