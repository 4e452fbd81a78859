//! Four-apartment, eight-zone RC thermal plant with a heat pump, a
//! time-of-use tariff, training-data generation and the two-stage
//! mutual-information / Pearson feature filter.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats;

pub const ZONES: usize = 8;
pub const APARTMENTS: usize = 4;
pub const STEPS_PER_DAY: usize = 96;
pub const STEP_HOURS: f64 = 0.25;
/// Setpoints are clamped to this physical range before use.
pub const PLANT_SETPOINT_RANGE: (f64, f64) = (10.0, 35.0);

pub const ZONE_COLUMNS: [&str; ZONES] = [
    "Z01_T", "Z02_T", "Z03_T", "Z04_T", "Z05_T", "Z06_T", "Z07_T", "Z08_T",
];
pub const SETPOINT_COLUMNS: [&str; APARTMENTS] = [
    "P1_T_Thermostat_sp",
    "P2_T_Thermostat_sp",
    "P3_T_Thermostat_sp",
    "P4_T_Thermostat_sp",
];
pub const ENERGY_COLUMN: &str = "Fa_E_All";
pub const APPLIANCE_COLUMN: &str = "Fa_E_Appl";
pub const RETURN_COLUMN: &str = "Bd_T_HP_return";

/// The eleven state columns, in model output order.
pub fn state_columns() -> Vec<&'static str> {
    let mut v: Vec<&str> = ZONE_COLUMNS.to_vec();
    v.extend([ENERGY_COLUMN, APPLIANCE_COLUMN, RETURN_COLUMN]);
    v
}

/// State columns followed by the four setpoints: the model input layout.
pub fn model_input_columns() -> Vec<&'static str> {
    let mut v = state_columns();
    v.extend(SETPOINT_COLUMNS);
    v
}

/// Index of the first setpoint column in [`model_input_columns`].
pub const CONTROL_OFFSET: usize = ZONES + 3;
pub const MODEL_INPUTS: usize = CONTROL_OFFSET + APARTMENTS;
pub const MODEL_OUTPUTS: usize = CONTROL_OFFSET;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffBlock {
    pub name: String,
    pub start_hour: f64,
    /// May be smaller than `start_hour` for a block that wraps midnight.
    pub end_hour: f64,
    pub price: f64,
}

impl TariffBlock {
    fn contains(&self, hour: f64) -> bool {
        if self.start_hour <= self.end_hour {
            hour >= self.start_hour && hour < self.end_hour
        } else {
            hour >= self.start_hour || hour < self.end_hour
        }
    }

    fn span(&self) -> f64 {
        if self.start_hour <= self.end_hour {
            self.end_hour - self.start_hour
        } else {
            24.0 - self.start_hour + self.end_hour
        }
    }
}

/// Daily price blocks, start inclusive and end exclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffSchedule {
    pub blocks: Vec<TariffBlock>,
}

impl Default for TariffSchedule {
    fn default() -> Self {
        let b = |name: &str, start_hour, end_hour, price| TariffBlock {
            name: name.into(),
            start_hour,
            end_hour,
            price,
        };
        TariffSchedule {
            blocks: vec![
                b("off-peak", 22.0, 6.0, 0.214),
                b("mid-peak", 6.0, 16.0, 0.316),
                b("high-peak", 16.0, 19.0, 0.502),
                b("super-peak", 19.0, 22.0, 0.605),
            ],
        }
    }
}

impl TariffSchedule {
    /// Checks that prices are positive and the blocks tile the day once.
    pub fn validate(&self) -> Result<()> {
        let mut total = 0.0;
        for b in &self.blocks {
            if !(b.price > 0.0) {
                return Err(Error::Config(format!("tariff block `{}` price must be > 0", b.name)));
            }
            let ok = |h: f64| (0.0..24.0).contains(&h);
            if !ok(b.start_hour) || !(ok(b.end_hour) || b.end_hour == 24.0) || b.start_hour == b.end_hour {
                return Err(Error::Config(format!("tariff block `{}` has bad hours", b.name)));
            }
            total += b.span();
        }
        // probe every minute so overlaps and gaps both show up
        for m in 0..24 * 60 {
            let h = m as f64 / 60.0;
            let n = self.blocks.iter().filter(|b| b.contains(h)).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "tariff blocks cover {h:.2} h {n} times; they must partition the day"
                )));
            }
        }
        if (total - 24.0).abs() > 1e-9 {
            return Err(Error::Config(format!("tariff blocks span {total} h, not 24")));
        }
        Ok(())
    }

    pub fn price_at_hour(&self, hour: f64) -> f64 {
        let mut h = libm::fmod(hour, 24.0);
        if h < 0.0 {
            h += 24.0;
        }
        self.blocks
            .iter()
            .find(|b| b.contains(h))
            .map_or(f64::NAN, |b| b.price)
    }
}

/// Hour of day at the start of `step`.
pub fn step_hour(step: usize) -> f64 {
    (step % STEPS_PER_DAY) as f64 * STEP_HOURS
}

pub fn tariff_price(step: usize, schedule: &TariffSchedule) -> f64 {
    schedule.price_at_hour(step_hour(step))
}

/// Plant parameters. Zone `z` belongs to apartment `z / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcParams {
    /// kWh/°C per zone.
    pub capacitance: Vec<f64>,
    /// kW/°C from each zone to ambient.
    pub ambient_conductance: Vec<f64>,
    /// Symmetric kW/°C matrix with zero diagonal.
    pub inter_zone: Vec<Vec<f64>>,
    /// `COP = max(cop_min, cop_intercept + cop_slope·T_amb)`.
    pub cop_intercept: f64,
    pub cop_slope: f64,
    pub cop_min: f64,
    /// kW per apartment.
    pub heating_capacity: f64,
    /// kW per °C of setpoint error.
    pub thermostat_gain: f64,
    /// Building appliance load in kW for each step of the day.
    pub appliance_profile: Vec<f64>,
    /// Ambient temperature in °C for each step of the day.
    pub ambient_profile: Vec<f64>,
    /// Amplitude of the per-step ambient perturbation, °C.
    pub ambient_noise: f64,
    pub noise_seed: u64,
    /// Heat-pump return temperature above the mean zone temperature.
    pub return_offset: f64,
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    let d = (h - centre) / width;
    libm::exp(-0.5 * d * d)
}

impl Default for RcParams {
    fn default() -> Self {
        let mut inter = vec![vec![0.0; ZONES]; ZONES];
        for a in 0..APARTMENTS {
            inter[2 * a][2 * a + 1] = 0.5;
            inter[2 * a + 1][2 * a] = 0.5;
        }
        for z in (1..ZONES - 1).step_by(2) {
            inter[z][z + 1] = 0.1;
            inter[z + 1][z] = 0.1;
        }
        let hours: Vec<f64> = (0..STEPS_PER_DAY).map(step_hour).collect();
        RcParams {
            capacitance: vec![2.8, 3.2, 3.0, 2.6, 3.4, 3.0, 2.9, 3.1],
            ambient_conductance: vec![0.12, 0.09, 0.08, 0.10, 0.09, 0.08, 0.10, 0.12],
            inter_zone: inter,
            cop_intercept: 3.0,
            cop_slope: 0.08,
            cop_min: 1.0,
            heating_capacity: 8.0,
            thermostat_gain: 4.0,
            appliance_profile: hours
                .iter()
                .map(|&h| 1.2 + 1.0 * bump(h, 7.5, 1.0) + 2.0 * bump(h, 19.5, 1.5))
                .collect(),
            ambient_profile: hours
                .iter()
                .map(|&h| 5.0 - 4.0 * libm::cos(2.0 * core::f64::consts::PI * (h - 5.0) / 24.0))
                .collect(),
            ambient_noise: 0.5,
            noise_seed: 17,
            return_offset: 2.0,
        }
    }
}

impl RcParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.capacitance.len() != ZONES
            || self.ambient_conductance.len() != ZONES
            || self.inter_zone.len() != ZONES
            || self.inter_zone.iter().any(|r| r.len() != ZONES)
        {
            return bad(format!("plant needs {ZONES} zones in every per-zone field"));
        }
        if self.capacitance.iter().any(|&c| !(c > 0.0)) {
            return bad("capacitances must be > 0".into());
        }
        if self.ambient_conductance.iter().any(|&u| !(u >= 0.0)) {
            return bad("ambient conductances must be ≥ 0".into());
        }
        for i in 0..ZONES {
            if self.inter_zone[i][i] != 0.0 {
                return bad("inter-zone conductance diagonal must be zero".into());
            }
            for j in 0..ZONES {
                let u = self.inter_zone[i][j];
                if !(u >= 0.0) || u != self.inter_zone[j][i] {
                    return bad("inter-zone conductances must be symmetric and ≥ 0".into());
                }
            }
        }
        if self.appliance_profile.len() != STEPS_PER_DAY
            || self.ambient_profile.len() != STEPS_PER_DAY
        {
            return bad(format!("daily profiles need {STEPS_PER_DAY} entries"));
        }
        if self.appliance_profile.iter().any(|&p| !(p >= 0.0)) {
            return bad("appliance load must be ≥ 0".into());
        }
        if !(self.cop_min >= 1.0) {
            return bad("cop_min must be ≥ 1".into());
        }
        if !(self.heating_capacity >= 0.0) || !(self.thermostat_gain >= 0.0) {
            return bad("heating capacity and gain must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn cop(&self, ambient: f64) -> f64 {
        (self.cop_intercept + self.cop_slope * ambient).max(self.cop_min)
    }

    pub fn ambient(&self, step: usize) -> f64 {
        self.ambient_profile[step % STEPS_PER_DAY]
            + self.ambient_noise * rng::hash_unit(self.noise_seed, step as u64)
    }

    pub fn appliance_kw(&self, step: usize) -> f64 {
        self.appliance_profile[step % STEPS_PER_DAY]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub zone_temps: [f64; ZONES],
    pub hp_return_temp: f64,
    /// Electricity over the step that ended at `step`, kWh.
    pub step_energy_total: f64,
    pub step_energy_appliances: f64,
    pub step: usize,
    /// Running totals for the heat-pump bookkeeping check.
    pub heat_delivered_kwh: f64,
    pub cop_weighted_hvac_kwh: f64,
}

impl PlantState {
    pub fn uniform(temp: f64, params: &RcParams) -> Self {
        PlantState {
            zone_temps: [temp; ZONES],
            hp_return_temp: temp + params.return_offset,
            step_energy_total: 0.0,
            step_energy_appliances: 0.0,
            step: 0,
            heat_delivered_kwh: 0.0,
            cop_weighted_hvac_kwh: 0.0,
        }
    }

    /// The eleven state features in [`state_columns`] order.
    pub fn features(&self) -> Vec<f64> {
        let mut v = self.zone_temps.to_vec();
        v.extend([
            self.step_energy_total,
            self.step_energy_appliances,
            self.hp_return_temp,
        ]);
        v
    }
}

/// Per-step quantities that are not part of the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub ambient: f64,
    pub cop: f64,
    pub heat_kw: [f64; APARTMENTS],
    pub hvac_kwh: f64,
    pub appliance_kwh: f64,
}

/// Advances the plant by one 15-minute step under `setpoints`.
pub fn plant_step(
    state: &PlantState,
    setpoints: &[f64; APARTMENTS],
    params: &RcParams,
) -> Result<(PlantState, StepLog)> {
    let k = state.step;
    let t_amb = params.ambient(k);
    let cop = params.cop(t_amb);
    let t = &state.zone_temps;
    let mut heat = [0.0; APARTMENTS];
    for a in 0..APARTMENTS {
        let sp = setpoints[a].clamp(PLANT_SETPOINT_RANGE.0, PLANT_SETPOINT_RANGE.1);
        let mean = 0.5 * (t[2 * a] + t[2 * a + 1]);
        heat[a] = (params.thermostat_gain * (sp - mean).max(0.0)).min(params.heating_capacity);
    }
    let mut next = [0.0; ZONES];
    for i in 0..ZONES {
        let mut flow = 0.5 * heat[i / 2] + params.ambient_conductance[i] * (t_amb - t[i]);
        for j in 0..ZONES {
            flow += params.inter_zone[i][j] * (t[j] - t[i]);
        }
        next[i] = t[i] + STEP_HOURS / params.capacitance[i] * flow;
    }
    let heat_kwh: f64 = heat.iter().sum::<f64>() * STEP_HOURS;
    let hvac_kwh = heat_kwh / cop;
    let appliance_kwh = params.appliance_kw(k) * STEP_HOURS;
    let cap: f64 = params.capacitance.iter().sum();
    let mean: f64 = next
        .iter()
        .zip(&params.capacitance)
        .map(|(t, c)| t * c)
        .sum::<f64>()
        / cap;
    let s = PlantState {
        zone_temps: next,
        hp_return_temp: mean + params.return_offset,
        step_energy_total: hvac_kwh + appliance_kwh,
        step_energy_appliances: appliance_kwh,
        step: k + 1,
        heat_delivered_kwh: state.heat_delivered_kwh + heat_kwh,
        cop_weighted_hvac_kwh: state.cop_weighted_hvac_kwh + cop * hvac_kwh,
    };
    if !s.zone_temps.iter().all(|v| v.is_finite()) || !s.step_energy_total.is_finite() {
        return Err(Error::Numeric(format!("plant state became non-finite at step {k}")));
    }
    Ok((
        s,
        StepLog {
            ambient: t_amb,
            cop,
            heat_kw: heat,
            hvac_kwh,
            appliance_kwh,
        },
    ))
}

/// Named columns of equal length.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::shape("feature table", &[names.len()], &[columns.len()]));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(Error::Contract("feature columns differ in length".into()));
            }
        }
        Ok(FeatureTable { names, columns })
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("no feature column `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[self.index(name)?])
    }

    /// Rows restricted to `names`, in that order.
    pub fn select_rows(&self, names: &[&str]) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = names.iter().map(|n| self.index(n)).collect::<Result<_>>()?;
        Ok((0..self.rows())
            .map(|r| idx.iter().map(|&c| self.columns[c][r]).collect())
            .collect())
    }

    pub fn push(&mut self, name: &str, column: Vec<f64>) -> Result<()> {
        if !self.columns.is_empty() && column.len() != self.rows() {
            return Err(Error::shape("feature column", &[self.rows()], &[column.len()]));
        }
        self.names.push(name.into());
        self.columns.push(column);
        Ok(())
    }
}

/// Random piecewise-constant setpoints: each apartment draws a new uniform
/// setpoint and holds it for a uniform number of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Excitation {
    pub low: f64,
    pub high: f64,
    pub min_hold: usize,
    pub max_hold: usize,
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation {
            low: 16.0,
            high: 26.0,
            min_hold: 2,
            max_hold: 8,
        }
    }
}

/// Inputs at step `k` (state after step `k−1`, setpoints applied during
/// step `k`, decoys) paired with the state after step `k` as targets.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub features: FeatureTable,
    pub targets: FeatureTable,
}

/// Suffix of target column names.
pub const TARGET_SUFFIX: &str = "_next";

/// Rolls the plant for `days` under random excitation. The first step
/// only warms up the energy counters, so a day yields 95 rows.
pub fn generate_dataset(
    days: usize,
    excitation: &Excitation,
    seed: u64,
    params: &RcParams,
) -> Result<GeneratedData> {
    if days == 0 {
        return Err(Error::Contract("days must be ≥ 1".into()));
    }
    params.validate()?;
    if !(excitation.low < excitation.high) || excitation.min_hold == 0 || excitation.min_hold > excitation.max_hold {
        return Err(Error::Config(format!("bad excitation {excitation:?}")));
    }
    let mut r = rng::seeded(seed);
    let mut state = PlantState::uniform(21.0, params);
    let mut sp = [21.0; APARTMENTS];
    let mut hold = [0usize; APARTMENTS];
    let n = days * STEPS_PER_DAY;
    let mut inputs: Vec<(PlantState, [f64; APARTMENTS], StepLog)> = Vec::with_capacity(n);
    let mut outputs: Vec<PlantState> = Vec::with_capacity(n);
    for _ in 0..n {
        for a in 0..APARTMENTS {
            if hold[a] == 0 {
                sp[a] = r.gen_range(excitation.low..excitation.high);
                hold[a] = r.gen_range(excitation.min_hold..=excitation.max_hold);
            }
            hold[a] -= 1;
        }
        let (next, log) = plant_step(&state, &sp, params)?;
        inputs.push((state, sp, log));
        outputs.push(next.clone());
        state = next;
    }
    let rows = &inputs[1..];
    let outs = &outputs[1..];
    type Row = (PlantState, [f64; APARTMENTS], StepLog);
    let col = |f: &dyn Fn(&Row) -> f64| -> Vec<f64> {
        rows.iter().map(f).collect()
    };
    let mut features = FeatureTable::default();
    features.push("step", col(&|x| x.0.step as f64))?;
    features.push("Month", col(&|x| 1.0 + ((x.0.step / STEPS_PER_DAY) / 30 % 12) as f64))?;
    features.push("Day", col(&|x| (x.0.step / STEPS_PER_DAY % 7) as f64))?;
    features.push("Hour", col(&|x| step_hour(x.0.step)))?;
    for (z, name) in ZONE_COLUMNS.iter().enumerate() {
        features.push(name, col(&|x| x.0.zone_temps[z]))?;
    }
    features.push(ENERGY_COLUMN, col(&|x| x.0.step_energy_total))?;
    features.push(APPLIANCE_COLUMN, col(&|x| x.0.step_energy_appliances))?;
    features.push(RETURN_COLUMN, col(&|x| x.0.hp_return_temp))?;
    for (a, name) in SETPOINT_COLUMNS.iter().enumerate() {
        features.push(name, col(&|x| x.1[a]))?;
    }
    features.push("Ext_T", col(&|x| x.2.ambient))?;
    features.push(
        "Bd_T_HP_supply",
        col(&|x| x.0.hp_return_temp + 5.0 + 0.3 * rng::hash_unit(seed ^ 0x5a, x.0.step as u64)),
    )?;
    features.push("Fa_Pw_All", col(&|x| x.0.step_energy_total / STEP_HOURS))?;
    features.push("HVAC_Pw_HP", col(&|x| x.2.heat_kw.iter().sum::<f64>() / x.2.cop))?;
    features.push("Noise_A", col(&|x| rng::hash_unit(seed ^ 0xa1, x.0.step as u64)))?;
    features.push("Noise_B", col(&|x| rng::hash_unit(seed ^ 0xb2, x.0.step as u64)))?;

    let mut targets = FeatureTable::default();
    for (c, name) in state_columns().iter().enumerate() {
        targets.push(
            &format!("{name}{TARGET_SUFFIX}"),
            outs.iter().map(|s| s.features()[c]).collect(),
        )?;
    }
    Ok(GeneratedData { features, targets })
}

/// Equal-frequency bin index of every entry. Ties share a bin.
pub fn bin_codes(col: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|i| sorted[i * n / bins]).collect();
    col.iter()
        .map(|v| edges.partition_point(|e| e <= v))
        .collect()
}

pub const MI_MIN_SAMPLES: usize = 100;
pub const DEFAULT_BINS: usize = 16;

/// Plug-in mutual information in nats from equal-frequency histograms.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("mutual_information", &[x.len()], &[y.len()]));
    }
    if x.len() < MI_MIN_SAMPLES || bins < 4 {
        return Err(Error::Contract(format!(
            "mutual information needs ≥ {MI_MIN_SAMPLES} samples and ≥ 4 bins, got {} and {bins}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in mutual information input".into()));
    }
    let cx = bin_codes(x, bins);
    let cy = bin_codes(y, bins);
    let mut joint = vec![0usize; bins * bins];
    let mut px = vec![0usize; bins];
    let mut py = vec![0usize; bins];
    for (&a, &b) in cx.iter().zip(&cy) {
        joint[a * bins + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * libm::log(p * n * n / (px[a] as f64 * py[b] as f64));
            }
        }
    }
    Ok(mi.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiScore {
    pub feature: String,
    pub mi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PearsonDrop {
    pub dropped: String,
    pub kept: String,
    pub rho: f64,
    pub mi_dropped: f64,
    pub mi_kept: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionAudit {
    /// Stage 1 ranking, best first.
    pub mi_ranking: Vec<MiScore>,
    pub stage1_retained: Vec<String>,
    pub stage1_dropped: Vec<String>,
    pub pearson_drops: Vec<PearsonDrop>,
    pub notes: Vec<String>,
}

impl SelectionAudit {
    /// `(dropped feature, reason)` rows in the "Dropped Feature / Reason
    /// (Correlated with)" layout.
    pub fn dropped_rows(&self) -> Vec<(String, String)> {
        self.pearson_drops
            .iter()
            .map(|d| (d.dropped.clone(), format!("{} (ρ={:.3})", d.kept, d.rho)))
            .collect()
    }

    pub fn render_dropped(&self) -> String {
        let mut s = String::from("| Dropped Feature | Reason (Correlated with) |\n|---|---|\n");
        for (d, r) in self.dropped_rows() {
            s.push_str(&format!("| {d} | {r} |\n"));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub mandatory: Vec<String>,
    pub mi_retain_fraction: f64,
    pub rho_threshold: f64,
    pub bins: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        let mut mandatory: Vec<String> = ZONE_COLUMNS.iter().map(|s| s.to_string()).collect();
        mandatory.push(ENERGY_COLUMN.into());
        mandatory.extend(SETPOINT_COLUMNS.iter().map(|s| s.to_string()));
        SelectionConfig {
            mandatory,
            mi_retain_fraction: 0.8,
            rho_threshold: 0.9,
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Surviving features in table order.
    pub selected: Vec<String>,
    pub audit: SelectionAudit,
}

/// Two-stage filter: keep the top MI fraction plus mandatory features, then
/// drop the lower-MI member of every pair with `|ρ|` above the threshold,
/// visiting pairs by descending `|ρ|`. Mandatory features are never
/// dropped; equal MI drops the later column.
pub fn select_features(
    table: &FeatureTable,
    targets: &[&[f64]],
    config: &SelectionConfig,
) -> Result<Selection> {
    if !(config.mi_retain_fraction > 0.0 && config.mi_retain_fraction <= 1.0) {
        return Err(Error::Config("mi_retain_fraction must lie in (0, 1]".into()));
    }
    if targets.is_empty() {
        return Err(Error::Contract("feature selection needs at least one target".into()));
    }
    let mandatory: Vec<usize> = config
        .mandatory
        .iter()
        .map(|m| table.index(m))
        .collect::<Result<_>>()?;
    let n = table.names.len();
    let mut mi = vec![0.0; n];
    for (c, col) in table.columns.iter().enumerate() {
        for t in targets {
            mi[c] = f64::max(mi[c], mutual_information(col, t, config.bins)?);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mi[b].total_cmp(&mi[a]).then(a.cmp(&b)));
    let keep = libm::ceil(config.mi_retain_fraction * n as f64) as usize;
    let mut retained = vec![false; n];
    for &c in order.iter().take(keep) {
        retained[c] = true;
    }
    for &c in &mandatory {
        retained[c] = true;
    }
    let mut audit = SelectionAudit {
        mi_ranking: order
            .iter()
            .map(|&c| MiScore {
                feature: table.names[c].clone(),
                mi: mi[c],
            })
            .collect(),
        ..SelectionAudit::default()
    };
    for c in 0..n {
        let name = table.names[c].clone();
        if retained[c] {
            audit.stage1_retained.push(name);
        } else {
            audit.stage1_dropped.push(name);
        }
    }

    let live: Vec<usize> = (0..n)
        .filter(|&c| {
            if !retained[c] {
                return false;
            }
            let degenerate = stats::std_dev(&table.columns[c]) == 0.0;
            if degenerate {
                audit.notes.push(format!(
                    "`{}` has zero variance and is excluded from correlation pruning",
                    table.names[c]
                ));
            }
            !degenerate
        })
        .collect();
    let mut pairs = Vec::new();
    for (i, &a) in live.iter().enumerate() {
        for &b in &live[i + 1..] {
            if let Some(rho) = stats::pearson(&table.columns[a], &table.columns[b]) {
                if libm::fabs(rho) > config.rho_threshold {
                    pairs.push((a, b, rho));
                }
            }
        }
    }
    pairs.sort_by(|x, y| {
        libm::fabs(y.2)
            .total_cmp(&libm::fabs(x.2))
            .then((x.0, x.1).cmp(&(y.0, y.1)))
    });
    let is_mandatory = |c: usize| mandatory.contains(&c);
    let mut dropped = vec![false; n];
    for (a, b, rho) in pairs {
        if dropped[a] || dropped[b] {
            continue;
        }
        let (lose, win) = match (is_mandatory(a), is_mandatory(b)) {
            (true, true) => {
                audit.notes.push(format!(
                    "`{}` and `{}` are both mandatory; kept despite ρ={rho:.3}",
                    table.names[a], table.names[b]
                ));
                continue;
            }
            (true, false) => (b, a),
            (false, true) => (a, b),
            // a precedes b in table order, so a tie drops b
            _ if mi[a] < mi[b] => (a, b),
            _ => (b, a),
        };
        dropped[lose] = true;
        audit.pearson_drops.push(PearsonDrop {
            dropped: table.names[lose].clone(),
            kept: table.names[win].clone(),
            rho,
            mi_dropped: mi[lose],
            mi_kept: mi[win],
        });
    }
    let selected = (0..n)
        .filter(|&c| retained[c] && !dropped[c])
        .map(|c| table.names[c].clone())
        .collect();
    Ok(Selection { selected, audit })
}
