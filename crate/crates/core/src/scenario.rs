//! Data model of the multi-carrier energy system: agents, assets,
//! timeseries, and the scenario file format.
//!
//! A scenario is immutable once loaded and safe to share read-only across
//! concurrently executing agents. On disk it is a YAML document plus
//! sibling CSV files holding all timeseries (one column per series,
//! header row = series ids, one row per hour). Timeseries fields in the
//! YAML are references of the form `"file.csv:column"`.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

mod synth;
pub use synth::{synthesize_scenario, SynthError};

/// Energy carrier. Electricity is the only market-traded carrier;
/// heat and hydrogen are balanced locally inside each prosumer; the
/// remaining carriers are fuels with exogenous price series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    Electricity,
    Heat,
    Hydrogen,
    Methane,
    Biomass,
    Oil,
    Transport,
}

impl Carrier {
    /// Carriers balanced locally inside a prosumer (heat, hydrogen).
    pub fn is_local(self) -> bool {
        matches!(self, Carrier::Heat | Carrier::Hydrogen)
    }

    /// Carriers that may carry an exogenous price series.
    pub fn is_priceable(self) -> bool {
        !matches!(
            self,
            Carrier::Electricity | Carrier::Heat | Carrier::Hydrogen
        )
    }

    pub fn all() -> [Carrier; 7] {
        [
            Carrier::Electricity,
            Carrier::Heat,
            Carrier::Hydrogen,
            Carrier::Methane,
            Carrier::Biomass,
            Carrier::Oil,
            Carrier::Transport,
        ]
    }
}

impl fmt::Display for Carrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Carrier::Electricity => "electricity",
            Carrier::Heat => "heat",
            Carrier::Hydrogen => "hydrogen",
            Carrier::Methane => "methane",
            Carrier::Biomass => "biomass",
            Carrier::Oil => "oil",
            Carrier::Transport => "transport",
        };
        f.write_str(s)
    }
}

/// Physical unit of a timeseries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    MegaWatt,
    MegaWattHour,
    EuroPerMegaWattHour,
}

/// Hourly series covering the full scenario horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeseries {
    pub unit: Unit,
    pub values: Vec<f64>,
}

impl Timeseries {
    pub fn megawatts(values: Vec<f64>) -> Self {
        Self {
            unit: Unit::MegaWatt,
            values,
        }
    }

    pub fn megawatt_hours(values: Vec<f64>) -> Self {
        Self {
            unit: Unit::MegaWattHour,
            values,
        }
    }

    pub fn prices(values: Vec<f64>) -> Self {
        Self {
            unit: Unit::EuroPerMegaWattHour,
            values,
        }
    }

    pub fn constant(unit: Unit, value: f64, len: usize) -> Self {
        Self {
            unit,
            values: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, t: usize) -> f64 {
        self.values[t]
    }
}

/// Dispatchable generator with quadratic cost α·g² + β·g.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub id: String,
    /// Quadratic cost coefficient [€/MW²h].
    pub alpha: f64,
    /// Linear cost coefficient [€/MWh].
    pub beta: f64,
    pub g_min: Timeseries,
    pub g_max: Timeseries,
}

/// Energy conversion asset. `output` is the principal product:
/// electricity for X2P assets (CHP, fuel cell), heat or hydrogen for
/// P2X/X2X assets (heat pump, electrolyzer, gas boiler). An X2P asset
/// with `produces_heat` cogenerates heat at `efficiency_nonelectric`
/// from the same fuel flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ConverterSpec {
    pub id: String,
    pub input: Carrier,
    pub output: Carrier,
    /// Electric output per unit input (X2P only), in (0, 1].
    pub efficiency_electric: f64,
    /// Non-electric output per unit input. May exceed 1 (heat pump COP).
    pub efficiency_nonelectric: f64,
    /// Input capacity [MW].
    pub capacity: f64,
    /// True when the asset draws grid electricity as input.
    pub uses_electricity: bool,
    /// True when the asset feeds the local heat balance.
    pub produces_heat: bool,
}

impl ConverterSpec {
    pub fn is_x2p(&self) -> bool {
        self.output == Carrier::Electricity
    }

    /// Carrier of the non-electric output flow, if any.
    pub fn carrier_output(&self) -> Option<Carrier> {
        if self.is_x2p() {
            self.produces_heat.then_some(Carrier::Heat)
        } else {
            Some(self.output)
        }
    }

    /// The efficiency that prices this asset's principal conversion.
    pub fn principal_efficiency(&self) -> f64 {
        if self.is_x2p() {
            self.efficiency_electric
        } else {
            self.efficiency_nonelectric
        }
    }
}

/// Storage asset; at most one per carrier per prosumer. EV/transport
/// batteries are modeled as the prosumer's electricity-carrier storage.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageSpec {
    pub id: String,
    pub carrier: Carrier,
    /// Charge/discharge power capacity [MW].
    pub power_cap: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub eff_charge: f64,
    pub eff_discharge: f64,
    pub initial_energy: f64,
}

/// Demand for one carrier: an inflexible base profile plus an optional
/// shift-only flexible component tracked through a cumulative-energy
/// envelope. Cumulative flexible energy must hit `flexible_total`
/// exactly at the end of the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSpec {
    pub carrier: Carrier,
    pub base: Timeseries,
    pub flexible_total: f64,
    pub flexible_energy_min: Option<Timeseries>,
    pub flexible_energy_max: Option<Timeseries>,
}

impl DemandSpec {
    pub fn has_flexibility(&self) -> bool {
        self.flexible_total != 0.0
            || self.flexible_energy_min.is_some()
            || self.flexible_energy_max.is_some()
    }

    pub fn envelope_min(&self, t: usize) -> f64 {
        self.flexible_energy_min.as_ref().map_or(0.0, |s| s.get(t))
    }

    pub fn envelope_max(&self, t: usize) -> f64 {
        self.flexible_energy_max
            .as_ref()
            .map_or(self.flexible_total.max(0.0), |s| s.get(t))
    }
}

/// Agent owning converters, storage, demands, and optionally a solar
/// thermal source bounded by an availability profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsumerSpec {
    pub id: String,
    pub converters: Vec<ConverterSpec>,
    pub storages: Vec<StorageSpec>,
    pub demands: Vec<DemandSpec>,
    pub solar_thermal_max: Option<Timeseries>,
}

impl ProsumerSpec {
    pub fn storage_for(&self, carrier: Carrier) -> Option<&StorageSpec> {
        self.storages.iter().find(|s| s.carrier == carrier)
    }

    pub fn demand_for(&self, carrier: Carrier) -> Option<&DemandSpec> {
        self.demands.iter().find(|d| d.carrier == carrier)
    }

    /// Local carriers (heat/hydrogen) that need a balance equation.
    pub fn local_carriers(&self) -> BTreeSet<Carrier> {
        let mut set = BTreeSet::new();
        for c in &self.converters {
            if let Some(r) = c.carrier_output() {
                set.insert(r);
            }
        }
        for s in &self.storages {
            if s.carrier.is_local() {
                set.insert(s.carrier);
            }
        }
        for d in &self.demands {
            if d.carrier.is_local() {
                set.insert(d.carrier);
            }
        }
        if self.solar_thermal_max.is_some() {
            set.insert(Carrier::Heat);
        }
        set
    }
}

/// Immutable description of all agents, assets, timeseries, and carrier
/// prices for one simulation horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub horizon: usize,
    pub ceiling_price: f64,
    pub carriers: BTreeSet<Carrier>,
    pub carrier_prices: BTreeMap<Carrier, Timeseries>,
    pub generators: Vec<GeneratorSpec>,
    pub prosumers: Vec<ProsumerSpec>,
}

/// Conventional day-ahead price cap used when a scenario does not set one.
pub const DEFAULT_CEILING_PRICE: f64 = 3000.0;

impl Scenario {
    pub fn carrier_price(&self, carrier: Carrier, t: usize) -> f64 {
        self.carrier_prices
            .get(&carrier)
            .map_or(0.0, |series| series.get(self.wrap_hour(t)))
    }

    /// Maps an hour at or beyond the horizon onto scenario data by
    /// repeating the final day (hour-of-day preserved). Rolling
    /// look-ahead windows use this so satellites always plan a full
    /// window; hours beyond the horizon are planned but never cleared.
    pub fn wrap_hour(&self, t: usize) -> usize {
        if t < self.horizon {
            t
        } else if self.horizon >= 24 {
            self.horizon - 24 + (t - self.horizon) % 24
        } else {
            (t - self.horizon) % self.horizon
        }
    }

    pub fn agent_count(&self) -> usize {
        self.generators.len() + self.prosumers.len()
    }

    /// Stable content hash over the canonical serialized form.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        hasher.write(to_document_string(self).as_bytes());
        hasher.finish()
    }
}

/// One invariant violation found by [`validate_scenario`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// What the violation is about, e.g. `generator gen1`.
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// All violations found in a scenario; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, subject: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            subject: subject.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("failed to read `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error in `{path}`: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("series reference `{reference}`: {message}")]
    SeriesRef { reference: String, message: String },
    #[error("timeseries length mismatch for `{series}`: expected {expected}, got {got}")]
    LengthMismatch {
        series: String,
        expected: usize,
        got: usize,
    },
    #[error("validation error: {0}")]
    Invalid(Violation),
}

fn check_len(report: &mut ValidationReport, subject: &str, what: &str, s: &Timeseries, t: usize) {
    if s.len() != t {
        report.push(
            subject,
            format!(
                "timeseries length mismatch for {what}: expected {t}, got {}",
                s.len()
            ),
        );
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        report.push(subject, format!("{what} contains non-finite entries"));
    }
}

/// Checks every scenario invariant and reports all violations. Pure.
pub fn validate_scenario(s: &Scenario) -> ValidationReport {
    let mut report = ValidationReport::default();
    let t = s.horizon;

    if t < 1 {
        report.push("scenario", "horizon must be at least 1 hour");
        return report;
    }
    if s.generators.is_empty() {
        report.push("scenario", "at least one generator is required");
    }
    if s.ceiling_price <= 0.0 || s.ceiling_price.is_nan() {
        report.push("scenario", "ceiling_price must be positive");
    }
    if !s.carriers.contains(&Carrier::Electricity) {
        report.push("scenario", "carrier set must include electricity");
    }
    for (carrier, series) in &s.carrier_prices {
        if !carrier.is_priceable() {
            report.push(
                format!("carrier {carrier}"),
                "only fuel carriers may carry a price series",
            );
        }
        check_len(
            &mut report,
            &format!("carrier {carrier}"),
            "price",
            series,
            t,
        );
    }

    let mut gen_ids = BTreeSet::new();
    for g in &s.generators {
        let subject = format!("generator {}", g.id);
        if !gen_ids.insert(&g.id) {
            report.push(&subject, "duplicate generator id");
        }
        if g.alpha < 0.0 {
            report.push(&subject, format!("alpha must be >= 0, got {}", g.alpha));
        }
        check_len(&mut report, &subject, "g_min", &g.g_min, t);
        check_len(&mut report, &subject, "g_max", &g.g_max, t);
        if g.g_min.len() == t && g.g_max.len() == t {
            for h in 0..t {
                if g.g_min.get(h) < 0.0 {
                    report.push(&subject, format!("g_min(t={h}) is negative"));
                    break;
                }
            }
            for h in 0..t {
                if g.g_min.get(h) > g.g_max.get(h) {
                    report.push(&subject, format!("g_min(t={h}) exceeds g_max(t={h})"));
                    break;
                }
            }
        }
    }

    let mut pros_ids = BTreeSet::new();
    for p in &s.prosumers {
        validate_prosumer(s, p, &mut report);
        if !pros_ids.insert(&p.id) {
            report.push(format!("prosumer {}", p.id), "duplicate prosumer id");
        }
    }

    // Feasibility screen: total generation capacity must cover the peak
    // inflexible electric demand at every hour.
    if report.is_valid() {
        for h in 0..t {
            let cap: f64 = s.generators.iter().map(|g| g.g_max.get(h)).sum();
            let demand: f64 = s
                .prosumers
                .iter()
                .filter_map(|p| p.demand_for(Carrier::Electricity))
                .map(|d| d.base.get(h))
                .sum();
            if demand > cap + 1e-9 {
                report.push(
                    "scenario",
                    format!(
                        "infeasible: inflexible electric demand {demand:.3} MW exceeds \
                         total generation capacity {cap:.3} MW at t={h}"
                    ),
                );
                break;
            }
        }
    }

    report
}

fn validate_prosumer(s: &Scenario, p: &ProsumerSpec, report: &mut ValidationReport) {
    let t = s.horizon;
    let subject = format!("prosumer {}", p.id);

    let mut asset_ids = BTreeSet::new();
    for c in &p.converters {
        let csub = format!("{subject} converter {}", c.id);
        if !asset_ids.insert(&c.id) {
            report.push(&csub, "duplicate asset id within prosumer");
        }
        if !s.carriers.contains(&c.input) || !s.carriers.contains(&c.output) {
            report.push(
                &csub,
                "references a carrier outside the scenario carrier set",
            );
        }
        if c.capacity <= 0.0 || c.capacity.is_nan() {
            report.push(&csub, "capacity must be positive");
        }
        match (c.is_x2p(), c.output) {
            (true, _) => {
                if !(c.efficiency_electric > 0.0 && c.efficiency_electric <= 1.0) {
                    report.push(
                        &csub,
                        "electric efficiency must be in (0, 1] for X2P assets",
                    );
                }
                if c.input == Carrier::Electricity || c.uses_electricity {
                    report.push(&csub, "X2P assets cannot take electricity as input");
                }
                if c.input.is_local() {
                    report.push(&csub, "X2P input must be a priced fuel carrier");
                }
                if c.produces_heat != (c.efficiency_nonelectric > 0.0) {
                    report.push(
                        &csub,
                        "produces_heat must match a positive non-electric efficiency",
                    );
                }
            }
            (false, Carrier::Heat | Carrier::Hydrogen) => {
                if c.efficiency_nonelectric <= 0.0 || c.efficiency_nonelectric.is_nan() {
                    report.push(&csub, "non-electric efficiency must be positive");
                }
                if c.efficiency_electric != 0.0 {
                    report.push(&csub, "electric efficiency applies only to X2P assets");
                }
                if (c.input == Carrier::Electricity) != c.uses_electricity {
                    report.push(&csub, "uses_electricity must match an electricity input");
                }
                if c.input.is_local() {
                    report.push(
                        &csub,
                        "locally balanced carriers cannot be converter inputs",
                    );
                }
                if c.input == c.output {
                    report.push(&csub, "input and output carriers must differ");
                }
                if c.produces_heat != (c.output == Carrier::Heat) {
                    report.push(&csub, "produces_heat must match a heat output");
                }
            }
            (false, other) => {
                report.push(
                    &csub,
                    format!("output must be electricity, heat, or hydrogen, got {other}"),
                );
            }
        }
        if !c.input.is_priceable() && c.input != Carrier::Electricity {
            // already reported above; nothing further
        } else if c.input.is_priceable() && !s.carrier_prices.contains_key(&c.input) {
            report.push(
                &csub,
                format!("input carrier {} has no price series", c.input),
            );
        }
    }

    let mut storage_carriers = BTreeSet::new();
    for st in &p.storages {
        let ssub = format!("{subject} storage {}", st.id);
        if !asset_ids.insert(&st.id) {
            report.push(&ssub, "duplicate asset id within prosumer");
        }
        if !storage_carriers.insert(st.carrier) {
            report.push(
                &ssub,
                format!("more than one storage for carrier {}", st.carrier),
            );
        }
        if !matches!(
            st.carrier,
            Carrier::Electricity | Carrier::Heat | Carrier::Hydrogen
        ) {
            report.push(
                &ssub,
                "storage carrier must be electricity, heat, or hydrogen",
            );
        }
        if !s.carriers.contains(&st.carrier) {
            report.push(
                &ssub,
                "references a carrier outside the scenario carrier set",
            );
        }
        if st.power_cap <= 0.0 || st.power_cap.is_nan() {
            report.push(&ssub, "power_cap must be positive");
        }
        if st.e_min < 0.0 || st.e_min > st.e_max {
            report.push(&ssub, "energy bounds must satisfy 0 <= e_min <= e_max");
        }
        if st.initial_energy < st.e_min || st.initial_energy > st.e_max {
            report.push(
                &ssub,
                format!(
                    "initial_energy {} outside [{}, {}]",
                    st.initial_energy, st.e_min, st.e_max
                ),
            );
        }
        for (label, eff) in [("charge", st.eff_charge), ("discharge", st.eff_discharge)] {
            if !(eff > 0.0 && eff <= 1.0) {
                report.push(&ssub, format!("{label} efficiency must be in (0, 1]"));
            }
        }
    }

    let mut demand_carriers = BTreeSet::new();
    for d in &p.demands {
        let dsub = format!("{subject} demand {}", d.carrier);
        if !demand_carriers.insert(d.carrier) {
            report.push(&dsub, "more than one demand for the same carrier");
        }
        if !s.carriers.contains(&d.carrier) {
            report.push(
                &dsub,
                "references a carrier outside the scenario carrier set",
            );
        }
        if d.carrier.is_priceable() {
            report.push(
                &dsub,
                "demand carrier must be electricity, heat, or hydrogen",
            );
        }
        check_len(report, &dsub, "base", &d.base, t);
        if d.base.len() == t {
            if let Some(h) = (0..t).find(|h| d.base.get(*h) < 0.0) {
                report.push(&dsub, format!("base demand negative at t={h}"));
            }
        }
        if d.flexible_total < 0.0 {
            report.push(&dsub, "flexible_total must be >= 0");
        }
        for (label, env) in [
            ("flexible_energy_min", &d.flexible_energy_min),
            ("flexible_energy_max", &d.flexible_energy_max),
        ] {
            if let Some(series) = env {
                check_len(report, &dsub, label, series, t);
            }
        }
        if d.has_flexibility() {
            let ok_len = d.flexible_energy_min.as_ref().is_none_or(|s| s.len() == t)
                && d.flexible_energy_max.as_ref().is_none_or(|s| s.len() == t);
            if ok_len {
                if let Some(h) = (0..t).find(|h| d.envelope_min(*h) > d.envelope_max(*h)) {
                    report.push(&dsub, format!("flexible envelope empty at t={h}"));
                }
                let last = t - 1;
                if d.flexible_total < d.envelope_min(last) - 1e-9
                    || d.flexible_total > d.envelope_max(last) + 1e-9
                {
                    report.push(
                        &dsub,
                        "flexible_total unreachable within the end-of-horizon envelope",
                    );
                }
            }
        }
    }

    if let Some(profile) = &p.solar_thermal_max {
        check_len(report, &subject, "solar_thermal_max", profile, t);
        if profile.len() == t {
            if let Some(h) = (0..t).find(|h| profile.get(*h) < 0.0) {
                report.push(&subject, format!("solar_thermal_max negative at t={h}"));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// On-disk schema
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    meta: RawMeta,
    carriers: Vec<Carrier>,
    #[serde(default)]
    carrier_prices: BTreeMap<Carrier, String>,
    generators: Vec<RawGenerator>,
    #[serde(default)]
    prosumers: Vec<RawProsumer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    horizon: usize,
    #[serde(default)]
    ceiling_price: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    id: String,
    alpha: f64,
    beta: f64,
    g_min: String,
    g_max: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProsumer {
    id: String,
    #[serde(default)]
    converters: Vec<RawConverter>,
    #[serde(default)]
    storages: Vec<RawStorage>,
    #[serde(default)]
    demands: Vec<RawDemand>,
    #[serde(default)]
    solar_thermal_max: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConverter {
    id: String,
    input: Carrier,
    output: Carrier,
    #[serde(default)]
    efficiency_electric: f64,
    #[serde(default)]
    efficiency_nonelectric: f64,
    capacity: f64,
    #[serde(default)]
    uses_electricity: bool,
    #[serde(default)]
    produces_heat: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStorage {
    id: String,
    carrier: Carrier,
    power_cap: f64,
    e_min: f64,
    e_max: f64,
    eff_charge: f64,
    eff_discharge: f64,
    #[serde(default)]
    initial_energy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDemand {
    carrier: Carrier,
    base: String,
    #[serde(default)]
    flexible_total: f64,
    #[serde(default)]
    flexible_energy_min: Option<String>,
    #[serde(default)]
    flexible_energy_max: Option<String>,
}

/// Resolves `"file.csv:column"` references against sibling CSV files.
struct SeriesResolver<'a> {
    dir: &'a Path,
    horizon: usize,
    cache: HashMap<PathBuf, HashMap<String, Vec<f64>>>,
}

impl<'a> SeriesResolver<'a> {
    fn new(dir: &'a Path, horizon: usize) -> Self {
        Self {
            dir,
            horizon,
            cache: HashMap::new(),
        }
    }

    fn resolve(&mut self, reference: &str, unit: Unit) -> Result<Timeseries, ScenarioError> {
        let (file, column) = reference
            .split_once(':')
            .ok_or_else(|| ScenarioError::SeriesRef {
                reference: reference.to_string(),
                message: "expected the form `file.csv:column`".to_string(),
            })?;
        let path = self.dir.join(file);
        if !self.cache.contains_key(&path) {
            let table = read_series_csv(&path)?;
            self.cache.insert(path.clone(), table);
        }
        let values =
            self.cache[&path]
                .get(column)
                .cloned()
                .ok_or_else(|| ScenarioError::SeriesRef {
                    reference: reference.to_string(),
                    message: format!("no column `{column}` in `{}`", path.display()),
                })?;
        if values.len() != self.horizon {
            return Err(ScenarioError::LengthMismatch {
                series: reference.to_string(),
                expected: self.horizon,
                got: values.len(),
            });
        }
        Ok(Timeseries { unit, values })
    }
}

fn read_series_csv(path: &Path) -> Result<HashMap<String, Vec<f64>>, ScenarioError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut table: HashMap<String, Vec<f64>> =
        headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, e))?;
        for (i, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| ScenarioError::Parse {
                path: path.to_path_buf(),
                message: format!("non-numeric value `{field}` in column `{}`", headers[i]),
            })?;
            table.get_mut(&headers[i]).unwrap().push(value);
        }
    }
    Ok(table)
}

fn parse_err(path: &Path, e: impl fmt::Display) -> ScenarioError {
    ScenarioError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads and validates a scenario document plus its sibling CSV series.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let raw: RawScenario = serde_yaml::from_str(&text).map_err(|e| parse_err(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let horizon = raw.meta.horizon;
    let mut resolver = SeriesResolver::new(dir, horizon);

    let mut carrier_prices = BTreeMap::new();
    for (carrier, reference) in &raw.carrier_prices {
        carrier_prices.insert(
            *carrier,
            resolver.resolve(reference, Unit::EuroPerMegaWattHour)?,
        );
    }

    let mut generators = Vec::with_capacity(raw.generators.len());
    for g in &raw.generators {
        generators.push(GeneratorSpec {
            id: g.id.clone(),
            alpha: g.alpha,
            beta: g.beta,
            g_min: resolver.resolve(&g.g_min, Unit::MegaWatt)?,
            g_max: resolver.resolve(&g.g_max, Unit::MegaWatt)?,
        });
    }

    let mut prosumers = Vec::with_capacity(raw.prosumers.len());
    for p in &raw.prosumers {
        let mut converters = Vec::new();
        for c in &p.converters {
            converters.push(ConverterSpec {
                id: c.id.clone(),
                input: c.input,
                output: c.output,
                efficiency_electric: c.efficiency_electric,
                efficiency_nonelectric: c.efficiency_nonelectric,
                capacity: c.capacity,
                uses_electricity: c.uses_electricity,
                produces_heat: c.produces_heat,
            });
        }
        let mut storages = Vec::new();
        for st in &p.storages {
            storages.push(StorageSpec {
                id: st.id.clone(),
                carrier: st.carrier,
                power_cap: st.power_cap,
                e_min: st.e_min,
                e_max: st.e_max,
                eff_charge: st.eff_charge,
                eff_discharge: st.eff_discharge,
                initial_energy: st.initial_energy.unwrap_or(0.5 * (st.e_min + st.e_max)),
            });
        }
        let mut demands = Vec::new();
        for d in &p.demands {
            demands.push(DemandSpec {
                carrier: d.carrier,
                base: resolver.resolve(&d.base, Unit::MegaWatt)?,
                flexible_total: d.flexible_total,
                flexible_energy_min: d
                    .flexible_energy_min
                    .as_ref()
                    .map(|r| resolver.resolve(r, Unit::MegaWattHour))
                    .transpose()?,
                flexible_energy_max: d
                    .flexible_energy_max
                    .as_ref()
                    .map(|r| resolver.resolve(r, Unit::MegaWattHour))
                    .transpose()?,
            });
        }
        prosumers.push(ProsumerSpec {
            id: p.id.clone(),
            converters,
            storages,
            demands,
            solar_thermal_max: p
                .solar_thermal_max
                .as_ref()
                .map(|r| resolver.resolve(r, Unit::MegaWatt))
                .transpose()?,
        });
    }

    let scenario = Scenario {
        horizon,
        ceiling_price: raw.meta.ceiling_price.unwrap_or(DEFAULT_CEILING_PRICE),
        carriers: raw.carriers.into_iter().collect(),
        carrier_prices,
        generators,
        prosumers,
    };

    let report = validate_scenario(&scenario);
    if let Some(first) = report.violations.into_iter().next() {
        return Err(ScenarioError::Invalid(first));
    }
    Ok(scenario)
}

/// Series registry used when writing a scenario back to disk.
struct SeriesWriter {
    file_name: String,
    columns: Vec<(String, Vec<f64>)>,
}

impl SeriesWriter {
    fn add(&mut self, id: String, series: &Timeseries) -> String {
        let reference = format!("{}:{}", self.file_name, id);
        self.columns.push((id, series.values.clone()));
        reference
    }
}

/// Saves a scenario as `<path>` (YAML) plus a sibling `<stem>_series.csv`.
pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scenario".to_string());
    let csv_name = format!("{stem}_series.csv");
    let (doc, writer) = to_raw(s, &csv_name);

    let yaml = serde_yaml::to_string(&doc).map_err(|e| parse_err(path, e))?;
    std::fs::write(path, yaml).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;

    let csv_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&csv_name);
    write_series_csv(&csv_path, s.horizon, &writer.columns)?;
    Ok(())
}

/// Canonical single-string serialization used for fingerprinting.
fn to_document_string(s: &Scenario) -> String {
    let (doc, writer) = to_raw(s, "inline.csv");
    let mut out = serde_yaml::to_string(&doc).unwrap_or_default();
    for (id, values) in &writer.columns {
        out.push_str(id);
        for v in values {
            out.push(',');
            out.push_str(&format!("{}", v.to_bits()));
        }
        out.push('\n');
    }
    out
}

fn to_raw(s: &Scenario, csv_name: &str) -> (RawScenario, SeriesWriter) {
    let mut w = SeriesWriter {
        file_name: csv_name.to_string(),
        columns: Vec::new(),
    };
    let carrier_prices = s
        .carrier_prices
        .iter()
        .map(|(c, series)| (*c, w.add(format!("price.{c}"), series)))
        .collect();
    let generators = s
        .generators
        .iter()
        .map(|g| RawGenerator {
            id: g.id.clone(),
            alpha: g.alpha,
            beta: g.beta,
            g_min: w.add(format!("gen.{}.min", g.id), &g.g_min),
            g_max: w.add(format!("gen.{}.max", g.id), &g.g_max),
        })
        .collect();
    let prosumers = s
        .prosumers
        .iter()
        .map(|p| RawProsumer {
            id: p.id.clone(),
            converters: p
                .converters
                .iter()
                .map(|c| RawConverter {
                    id: c.id.clone(),
                    input: c.input,
                    output: c.output,
                    efficiency_electric: c.efficiency_electric,
                    efficiency_nonelectric: c.efficiency_nonelectric,
                    capacity: c.capacity,
                    uses_electricity: c.uses_electricity,
                    produces_heat: c.produces_heat,
                })
                .collect(),
            storages: p
                .storages
                .iter()
                .map(|st| RawStorage {
                    id: st.id.clone(),
                    carrier: st.carrier,
                    power_cap: st.power_cap,
                    e_min: st.e_min,
                    e_max: st.e_max,
                    eff_charge: st.eff_charge,
                    eff_discharge: st.eff_discharge,
                    initial_energy: Some(st.initial_energy),
                })
                .collect(),
            demands: p
                .demands
                .iter()
                .map(|d| RawDemand {
                    carrier: d.carrier,
                    base: w.add(format!("pros.{}.demand.{}.base", p.id, d.carrier), &d.base),
                    flexible_total: d.flexible_total,
                    flexible_energy_min: d.flexible_energy_min.as_ref().map(|series| {
                        w.add(format!("pros.{}.demand.{}.fmin", p.id, d.carrier), series)
                    }),
                    flexible_energy_max: d.flexible_energy_max.as_ref().map(|series| {
                        w.add(format!("pros.{}.demand.{}.fmax", p.id, d.carrier), series)
                    }),
                })
                .collect(),
            solar_thermal_max: p
                .solar_thermal_max
                .as_ref()
                .map(|series| w.add(format!("pros.{}.solar_thermal", p.id), series)),
        })
        .collect();

    let doc = RawScenario {
        meta: RawMeta {
            horizon: s.horizon,
            ceiling_price: Some(s.ceiling_price),
        },
        carriers: s.carriers.iter().copied().collect(),
        carrier_prices,
        generators,
        prosumers,
    };
    (doc, w)
}

fn write_series_csv(
    path: &Path,
    horizon: usize,
    columns: &[(String, Vec<f64>)],
) -> Result<(), ScenarioError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let io_err = |e: csv::Error| ScenarioError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    writer
        .write_record(columns.iter().map(|(id, _)| id.as_str()))
        .map_err(io_err)?;
    for t in 0..horizon {
        writer
            .write_record(columns.iter().map(|(_, v)| format!("{}", v[t])))
            .map_err(io_err)?;
    }
    writer.flush().map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub mod fixtures {
    //! Small hand-built scenarios used across test suites and examples.
    use super::*;

    /// Two generators against a flat 60 MW inflexible load. The KKT
    /// optimum is g1 = 60, g2 = 0, price 11.2 €/MWh at every hour.
    pub fn micro_scenario(horizon: usize) -> Scenario {
        let flat = |v: f64| Timeseries::megawatts(vec![v; horizon]);
        Scenario {
            horizon,
            ceiling_price: DEFAULT_CEILING_PRICE,
            carriers: [Carrier::Electricity].into_iter().collect(),
            carrier_prices: BTreeMap::new(),
            generators: vec![
                GeneratorSpec {
                    id: "g1".into(),
                    alpha: 0.01,
                    beta: 10.0,
                    g_min: flat(0.0),
                    g_max: flat(100.0),
                },
                GeneratorSpec {
                    id: "g2".into(),
                    alpha: 0.02,
                    beta: 20.0,
                    g_min: flat(0.0),
                    g_max: flat(100.0),
                },
            ],
            prosumers: vec![ProsumerSpec {
                id: "load".into(),
                converters: vec![],
                storages: vec![],
                demands: vec![DemandSpec {
                    carrier: Carrier::Electricity,
                    base: flat(60.0),
                    flexible_total: 0.0,
                    flexible_energy_min: None,
                    flexible_energy_max: None,
                }],
                solar_thermal_max: None,
            }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_scenario_is_valid() {
        let s = fixtures::micro_scenario(24);
        let report = validate_scenario(&s);
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn gmin_above_gmax_is_flagged_with_id_and_hour() {
        let mut s = fixtures::micro_scenario(24);
        s.generators[0].g_min.values[3] = 150.0;
        let report = validate_scenario(&s);
        assert!(!report.is_valid());
        let text = report.to_string();
        assert!(text.contains("g1"), "{text}");
        assert!(text.contains("t=3"), "{text}");
    }

    #[test]
    fn storage_initial_energy_outside_bounds_is_one_violation() {
        let mut s = fixtures::micro_scenario(24);
        s.carriers.insert(Carrier::Heat);
        s.prosumers[0].storages.push(StorageSpec {
            id: "hs".into(),
            carrier: Carrier::Heat,
            power_cap: 5.0,
            e_min: 0.0,
            e_max: 10.0,
            eff_charge: 0.9,
            eff_discharge: 0.9,
            initial_energy: 12.0,
        });
        let report = validate_scenario(&s);
        assert_eq!(report.violations.len(), 1, "{report}");
        assert!(report.to_string().contains("initial_energy"));
    }

    #[test]
    fn demand_above_capacity_fails_feasibility_screen() {
        let mut s = fixtures::micro_scenario(24);
        s.prosumers[0].demands[0].base = Timeseries::megawatts(vec![250.0; 24]);
        let report = validate_scenario(&s);
        assert!(report.to_string().contains("infeasible"), "{report}");
    }

    #[test]
    fn length_mismatch_is_flagged() {
        let mut s = fixtures::micro_scenario(24);
        s.generators[1].g_max.values.pop();
        let report = validate_scenario(&s);
        assert!(
            report.to_string().contains("timeseries length mismatch"),
            "{report}"
        );
    }
}
