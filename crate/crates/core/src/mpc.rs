//! Receding-horizon setpoint control through a learned one-step surrogate.
//!
//! The surrogate maps a window of `T` feature rows (eleven state columns
//! followed by four setpoints, see [`building::model_input_columns`]) to the
//! next eleven state values. A horizon-`N` rollout feeds every prediction
//! back into the window with the candidate setpoints, all inside one graph,
//! and projected gradient descent on the `N × 4` setpoint block minimises
//! energy cost plus hinge comfort penalties.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::building::{
    self, plant_step, tariff_price, GeneratedData, PlantState, RcParams, TariffSchedule,
    APARTMENTS, CONTROL_OFFSET, MODEL_INPUTS, MODEL_OUTPUTS, STEPS_PER_DAY, STEP_HOURS, ZONES,
};
use crate::clock::{self, Clock};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Model};
use crate::rng;
use crate::stats;
use crate::tensor::Tensor;
use crate::train::{Dataset, MinMax, Scaling};

/// Column of the step energy in the surrogate output.
pub const ENERGY_INDEX: usize = ZONES;

/// A differentiable one-step predictor in physical units.
pub trait Surrogate {
    /// Number of rows in the input window.
    fn window_len(&self) -> usize;
    /// Whether the prediction is convex in the window by construction.
    fn input_convex(&self) -> bool;
    /// Registers any parameters in `g` once per rollout.
    fn prepare(&self, g: &mut Graph) -> Result<Bound>;
    /// `[T, 15]` raw window to `[1, 11]` raw next state.
    fn step(&self, g: &mut Graph, bound: &Bound, window: Var) -> Result<Var>;
    fn label(&self) -> String;
}

/// A trained model with the scalers it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSurrogate {
    pub model: Model,
    pub scaling: Scaling,
}

impl NeuralSurrogate {
    pub fn new(model: Model, scaling: Scaling) -> Result<Self> {
        let s = model.spec();
        if s.input_dim != MODEL_INPUTS || s.output_dim != MODEL_OUTPUTS {
            return Err(Error::Contract(format!(
                "surrogate needs {MODEL_INPUTS} inputs and {MODEL_OUTPUTS} outputs, model has {} and {}",
                s.input_dim, s.output_dim
            )));
        }
        if scaling.inputs.width() != MODEL_INPUTS || scaling.targets.width() != MODEL_OUTPUTS {
            return Err(Error::Contract("scaler widths do not match the surrogate".into()));
        }
        Ok(NeuralSurrogate { model, scaling })
    }
}

fn affine_rows(m: &MinMax) -> (Tensor, Tensor) {
    let n = m.width();
    let slope = (0..n).map(|j| m.scale(j)).collect();
    (
        Tensor::new(vec![1, n], m.min.clone()).expect("row"),
        Tensor::new(vec![1, n], slope).expect("row"),
    )
}

impl Surrogate for NeuralSurrogate {
    fn window_len(&self) -> usize {
        self.model.spec().sequence_length
    }

    fn input_convex(&self) -> bool {
        self.model.spec().architecture.input_convex()
    }

    fn prepare(&self, g: &mut Graph) -> Result<Bound> {
        self.model.bind(g, false)
    }

    fn step(&self, g: &mut Graph, bound: &Bound, window: Var) -> Result<Var> {
        let (imin, islope) = affine_rows(&self.scaling.inputs);
        let (tmin, tslope) = affine_rows(&self.scaling.targets);
        let tw: Vec<f64> = tslope.data().iter().map(|s| 1.0 / s).collect();
        let imin = g.constant(imin);
        let islope = g.constant(islope);
        let tmin = g.constant(tmin);
        let tw = g.constant(Tensor::new(vec![1, tw.len()], tw)?);
        let centred = g.sub(window, imin)?;
        let x = g.mul(centred, islope)?;
        let y = self.model.forward(g, bound, x, 1)?;
        let y = g.mul(y, tw)?;
        g.add(y, tmin)
    }

    fn label(&self) -> String {
        self.model.spec().architecture.label().into()
    }
}

/// Scales the surrogate columns of a generated table and cuts windows.
pub fn surrogate_data(data: &GeneratedData, seq_len: usize) -> Result<(Dataset, Scaling)> {
    let x = data.features.select_rows(&building::model_input_columns())?;
    let y: Vec<Vec<f64>> = (0..data.targets.rows())
        .map(|r| data.targets.columns.iter().map(|c| c[r]).collect())
        .collect();
    let scaling = Scaling {
        inputs: MinMax::fit(&x)?,
        targets: MinMax::fit(&y)?,
    };
    let xs: Vec<Vec<f64>> = x.iter().map(|r| scaling.inputs.transform(r)).collect();
    let ys: Vec<Vec<f64>> = y.iter().map(|r| scaling.targets.transform(r)).collect();
    Ok((Dataset::windows(&xs, &ys, seq_len)?, scaling))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once the projected-gradient norm falls below this.
    pub tolerance: f64,
    pub initial_step: f64,
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Seed of the random multistart used for non-convex surrogates.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 200,
            tolerance: 1e-4,
            initial_step: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            max_backtracks: 30,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcProblem {
    pub horizon: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// €-equivalent per °C of band violation per zone and step.
    pub comfort_weight: f64,
    pub tariff: TariffSchedule,
    pub solver: SolverConfig,
}

impl Default for MpcProblem {
    fn default() -> Self {
        MpcProblem {
            horizon: 8,
            u_min: 16.0,
            u_max: 26.0,
            t_min: 19.0,
            t_max: 24.0,
            comfort_weight: 10.0,
            tariff: TariffSchedule::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl MpcProblem {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be ≥ 1".into()));
        }
        if !(self.u_min < self.u_max) || !(self.t_min < self.t_max) {
            return Err(Error::Config("bounds need min < max".into()));
        }
        if !(self.comfort_weight >= 0.0) {
            return Err(Error::Config("comfort_weight must be ≥ 0".into()));
        }
        let s = &self.solver;
        if s.max_iterations == 0 || !(s.tolerance > 0.0) || !(s.initial_step > 0.0) {
            return Err(Error::Config("solver limits must be positive".into()));
        }
        if !(s.shrink > 0.0 && s.shrink < 1.0) || !(s.armijo > 0.0 && s.armijo < 1.0) {
            return Err(Error::Config("shrink and armijo must lie in (0, 1)".into()));
        }
        self.tariff.validate()
    }

    pub fn prices(&self, start_step: usize) -> Vec<f64> {
        (0..self.horizon)
            .map(|i| tariff_price(start_step + i, &self.tariff))
            .collect()
    }

    fn clamp(&self, u: &mut [f64]) {
        for v in u {
            *v = v.clamp(self.u_min, self.u_max);
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.u_min + self.u_max)
    }
}

/// Which objective terms to include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Terms {
    Full,
    /// Energy cost plus the upper-band penalty only.
    CostAndUpper,
}

/// Predictions of a rollout, `N` rows of eleven values.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub outputs: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn energy(&self) -> Vec<f64> {
        self.outputs.iter().map(|r| r[ENERGY_INDEX]).collect()
    }

    pub fn temps(&self) -> Vec<Vec<f64>> {
        self.outputs.iter().map(|r| r[..ZONES].to_vec()).collect()
    }
}

fn check_history(history: &[Vec<f64>], t: usize) -> Result<()> {
    if history.len() != t || history.iter().any(|r| r.len() != MODEL_INPUTS) {
        return Err(Error::Contract(format!(
            "history must be {t} rows of {MODEL_INPUTS} features"
        )));
    }
    Ok(())
}

/// Builds the rollout in `g`. `u` is `[N, 4]`; the last history row's
/// setpoints are replaced by `u[0]`. Returns `[N, 11]`.
pub fn rollout_graph(
    surrogate: &dyn Surrogate,
    g: &mut Graph,
    history: &[Vec<f64>],
    u: Var,
) -> Result<Var> {
    let t = surrogate.window_len();
    check_history(history, t)?;
    let n = g.shape(u)[0];
    if g.shape(u) != [n, APARTMENTS] || n == 0 {
        return Err(Error::shape("rollout controls", g.shape(u), &[n, APARTMENTS]));
    }
    let bound = surrogate.prepare(g)?;
    let mut rows: Vec<Var> = history[..t - 1]
        .iter()
        .map(|r| g.constant(Tensor::new(vec![1, MODEL_INPUTS], r.clone()).expect("row")))
        .collect();
    let last = &history[t - 1][..CONTROL_OFFSET];
    let state = g.constant(Tensor::new(vec![1, CONTROL_OFFSET], last.to_vec())?);
    let u0 = g.gather_rows(u, &[0])?;
    rows.push(g.concat_cols(&[state, u0])?);
    let mut preds = Vec::with_capacity(n);
    for k in 0..n {
        let window = g.concat_rows(&rows[rows.len() - t..])?;
        let y = surrogate.step(g, &bound, window)?;
        if !g.value(y).all_finite() {
            return Err(Error::Numeric(format!("non-finite prediction at rollout step {k}")));
        }
        preds.push(y);
        if k + 1 < n {
            let uk = g.gather_rows(u, &[k + 1])?;
            rows.push(g.concat_cols(&[y, uk])?);
        }
    }
    g.concat_rows(&preds)
}

fn controls_tensor(u: &[f64]) -> Result<Tensor> {
    Tensor::new(vec![u.len() / APARTMENTS, APARTMENTS], u.to_vec())
}

/// Runs the rollout for a flat `N·4` control vector.
pub fn rollout_predict(surrogate: &dyn Surrogate, history: &[Vec<f64>], u: &[f64]) -> Result<Rollout> {
    if u.is_empty() || !u.len().is_multiple_of(APARTMENTS) {
        return Err(Error::Contract("controls must be N rows of 4 setpoints".into()));
    }
    let mut g = Graph::new();
    let uv = g.constant(controls_tensor(u)?);
    let y = rollout_graph(surrogate, &mut g, history, uv)?;
    let t = g.value(y);
    Ok(Rollout {
        outputs: (0..t.rows()).map(|r| t.row(r).to_vec()).collect(),
    })
}

/// `Σ Ê·π + ρ_c Σ [hinge(T_min − T̂) + hinge(T̂ − T_max)]` on plain values.
pub fn objective(rollout: &Rollout, prices: &[f64], problem: &MpcProblem, terms: Terms) -> Result<f64> {
    if rollout.outputs.len() != prices.len() {
        return Err(Error::shape("objective", &[rollout.outputs.len()], &[prices.len()]));
    }
    let mut j = 0.0;
    for (row, &p) in rollout.outputs.iter().zip(prices) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite rollout output".into()));
        }
        j += row[ENERGY_INDEX] * p;
        for &t in &row[..ZONES] {
            let lower = if terms == Terms::Full { (problem.t_min - t).max(0.0) } else { 0.0 };
            j += problem.comfort_weight * (lower + (t - problem.t_max).max(0.0));
        }
    }
    Ok(j)
}

fn objective_graph(g: &mut Graph, y: Var, prices: &[f64], problem: &MpcProblem, terms: Terms) -> Result<Var> {
    let n = prices.len();
    let energy = g.slice_cols(y, ENERGY_INDEX, 1)?;
    let p = g.constant(Tensor::new(vec![n, 1], prices.to_vec())?);
    let cost = g.mul(energy, p)?;
    let cost = g.sum_all(cost)?;
    let temps = g.slice_cols(y, 0, ZONES)?;
    let over = g.offset(temps, -problem.t_max);
    let mut pen = g.relu(over);
    if terms == Terms::Full {
        let neg = g.neg(temps);
        let under = g.offset(neg, problem.t_min);
        let under = g.relu(under);
        pen = g.add(pen, under)?;
    }
    let pen = g.sum_all(pen)?;
    let pen = g.scale(pen, problem.comfort_weight);
    g.add(cost, pen)
}

/// Objective value and its gradient with respect to the flat controls.
pub fn objective_and_gradient(
    surrogate: &dyn Surrogate,
    history: &[Vec<f64>],
    u: &[f64],
    prices: &[f64],
    problem: &MpcProblem,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let uv = g.input(controls_tensor(u)?);
    let y = rollout_graph(surrogate, &mut g, history, uv)?;
    let j = objective_graph(&mut g, y, prices, problem, Terms::Full)?;
    let value = g.value(j).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite objective".into()));
    }
    let grads = g.backward(j)?;
    let grad = grads
        .wrt(uv)
        .map_or_else(|| vec![0.0; u.len()], |t| t.data().to_vec());
    Ok((value, grad))
}

pub fn objective_value(
    surrogate: &dyn Surrogate,
    history: &[Vec<f64>],
    u: &[f64],
    prices: &[f64],
    problem: &MpcProblem,
    terms: Terms,
) -> Result<f64> {
    let r = rollout_predict(surrogate, history, u)?;
    objective(&r, prices, problem, terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    /// `N` rows of four setpoints.
    pub controls: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective at the start point the result descended from.
    pub initial_objective: f64,
    pub iterations: usize,
    pub wall_time_seconds: f64,
    pub converged: bool,
    /// False when every start produced a non-finite rollout.
    pub feasible: bool,
    pub predicted_energy: Vec<f64>,
    pub predicted_temps: Vec<Vec<f64>>,
}

/// Starting points offered to [`solve`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InitStrategy {
    /// Previous solution; shifted by one step with its last row repeated.
    pub warm: Option<Vec<Vec<f64>>>,
}

/// Shifts a previous solution forward by one step, repeating the last row
/// and resizing to `n` rows.
pub fn shift_warm_start(prev: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * APARTMENTS);
    for i in 0..n {
        let r = &prev[(i + 1).min(prev.len() - 1)];
        out.extend_from_slice(r);
    }
    out
}

struct Descent {
    u: Vec<f64>,
    value: f64,
    initial: f64,
    iterations: usize,
    converged: bool,
}

fn descend(
    surrogate: &dyn Surrogate,
    history: &[Vec<f64>],
    mut u: Vec<f64>,
    prices: &[f64],
    problem: &MpcProblem,
) -> Result<Descent> {
    let s = &problem.solver;
    problem.clamp(&mut u);
    let (mut value, mut grad) = objective_and_gradient(surrogate, history, &u, prices, problem)?;
    let initial = value;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < s.max_iterations {
        let mut probe = u.iter().zip(&grad).map(|(a, g)| a - g).collect::<Vec<_>>();
        problem.clamp(&mut probe);
        let pg: f64 = probe.iter().zip(&u).map(|(p, a)| (p - a) * (p - a)).sum::<f64>();
        if libm::sqrt(pg) < s.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let mut step = s.initial_step;
        let mut accepted = None;
        for _ in 0..=s.max_backtracks {
            let mut cand: Vec<f64> = u.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            problem.clamp(&mut cand);
            let decrease: f64 = grad.iter().zip(cand.iter().zip(&u)).map(|(g, (c, a))| g * (c - a)).sum();
            if let Ok(v) = objective_value(surrogate, history, &cand, prices, problem, Terms::Full) {
                if v <= value + s.armijo * decrease {
                    accepted = Some(cand);
                    break;
                }
            }
            step *= s.shrink;
        }
        match accepted {
            Some(c) => {
                u = c;
                let (v, gr) = objective_and_gradient(surrogate, history, &u, prices, problem)?;
                value = v;
                grad = gr;
            }
            // no admissible step: a stationary point at line-search resolution
            None => break,
        }
    }
    Ok(Descent {
        u,
        value,
        initial,
        iterations,
        converged,
    })
}

/// Projected gradient descent with Armijo backtracking. Convex surrogates
/// use a single start (warm if given, otherwise the band midpoint);
/// others keep the best of cold, warm and a random start.
pub fn solve(
    surrogate: &dyn Surrogate,
    problem: &MpcProblem,
    history: &[Vec<f64>],
    start_step: usize,
    init: &InitStrategy,
    clock: &dyn Clock,
) -> Result<SolveResult> {
    problem.validate()?;
    check_history(history, surrogate.window_len())?;
    let t0 = clock.now();
    let n = problem.horizon;
    let prices = problem.prices(start_step);
    let cold = vec![problem.midpoint(); n * APARTMENTS];
    let warm = init.warm.as_ref().map(|w| shift_warm_start(w, n));
    let mut starts = Vec::new();
    if surrogate.input_convex() {
        starts.push(warm.clone().unwrap_or_else(|| cold.clone()));
    } else {
        starts.push(cold);
        if let Some(w) = warm {
            starts.push(w);
        }
        let mut r = rng::seeded(problem.solver.seed ^ (start_step as u64).wrapping_mul(0x9E37_79B9));
        starts.push(
            (0..n * APARTMENTS)
                .map(|_| r.gen_range(problem.u_min..problem.u_max))
                .collect(),
        );
    }
    let mut best: Option<Descent> = None;
    let mut iterations = 0;
    for s in starts {
        if let Ok(d) = descend(surrogate, history, s, &prices, problem) {
            iterations += d.iterations;
            if best.as_ref().is_none_or(|b| d.value < b.value) {
                best = Some(d);
            }
        }
    }
    let wall = clock::elapsed(clock, t0);
    let Some(best) = best else {
        return Ok(SolveResult {
            controls: vec![vec![problem.midpoint(); APARTMENTS]; n],
            objective: f64::NAN,
            initial_objective: f64::NAN,
            iterations,
            wall_time_seconds: wall,
            converged: false,
            feasible: false,
            predicted_energy: Vec::new(),
            predicted_temps: Vec::new(),
        });
    };
    let r = rollout_predict(surrogate, history, &best.u)?;
    Ok(SolveResult {
        controls: best.u.chunks(APARTMENTS).map(<[f64]>::to_vec).collect(),
        objective: best.value,
        initial_objective: best.initial,
        iterations,
        wall_time_seconds: wall,
        converged: best.converged,
        feasible: true,
        predicted_energy: r.energy(),
        predicted_temps: r.temps(),
    })
}

/// Midpoint-convexity probe of the objective over the setpoint box.
pub fn objective_convexity(
    surrogate: &dyn Surrogate,
    problem: &MpcProblem,
    history: &[Vec<f64>],
    start_step: usize,
    probes: usize,
    seed: u64,
    terms: Terms,
) -> Result<crate::convexity::ConvexityReport> {
    let prices = problem.prices(start_step);
    let f = |u: &[f64]| -> Result<Vec<f64>> {
        Ok(vec![objective_value(surrogate, history, u, &prices, problem, terms)?])
    };
    let label = format!("{}-objective", surrogate.label());
    crate::convexity::midpoint_convexity_check(
        &label,
        &f,
        problem.horizon * APARTMENTS,
        probes,
        seed,
        (problem.u_min, problem.u_max),
    )
}

/// Who picks the setpoints in a closed-loop run.
pub enum Controller<'a> {
    Mpc(&'a dyn Surrogate),
    Fixed(f64),
}

impl Controller<'_> {
    pub fn label(&self) -> String {
        match self {
            Controller::Mpc(s) => s.label(),
            Controller::Fixed(v) => format!("fixed-{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    /// Steps run at the fixed warm-up setpoint before control starts; they
    /// also fill the surrogate's history window.
    pub warmup_steps: usize,
    pub warmup_setpoint: f64,
    pub steps: usize,
    pub initial_temp: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            warmup_steps: STEPS_PER_DAY,
            warmup_setpoint: 21.0,
            steps: STEPS_PER_DAY,
            initial_temp: 21.0,
        }
    }
}

/// One controlled step. Temperatures and energy are the plant's, measured
/// over and at the end of the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub clock: String,
    pub price: f64,
    pub setpoints: [f64; APARTMENTS],
    pub zone_temps: [f64; ZONES],
    pub energy_kwh: f64,
    pub solver_time_s: f64,
    pub iterations: usize,
    pub objective: f64,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub controller: String,
    pub horizon: usize,
    pub trajectory: Vec<TrajectoryRow>,
    pub bill_eur: f64,
    pub degree_hours: f64,
    pub solver_times: Vec<f64>,
    pub fallbacks: usize,
}

pub fn clock_label(step: usize) -> String {
    let m = (step % STEPS_PER_DAY) * 15;
    format!("{:02}:{:02}", m / 60, m % 60)
}

/// `Σ_steps Σ_zones max(0, T_min − T, T − T_max) · Δt`.
pub fn degree_hours<'a>(temps: impl IntoIterator<Item = &'a [f64]>, t_min: f64, t_max: f64) -> f64 {
    temps
        .into_iter()
        .flat_map(|r| r.iter())
        .map(|&t| (t_min - t).max(t - t_max).max(0.0) * STEP_HOURS)
        .sum()
}

pub fn bill(rows: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    rows.into_iter().map(|(e, p)| e * p).sum()
}

fn feature_row(state: &PlantState, u: &[f64; APARTMENTS]) -> Vec<f64> {
    let mut r = state.features();
    r.extend_from_slice(u);
    r
}

/// Warm-up then `steps` controlled steps: solve, apply the first setpoint
/// row, advance the plant, log.
pub fn closed_loop_run(
    controller: &Controller<'_>,
    params: &RcParams,
    problem: &MpcProblem,
    config: &ClosedLoopConfig,
    clock: &dyn Clock,
) -> Result<ClosedLoopResult> {
    problem.validate()?;
    params.validate()?;
    let window = match controller {
        Controller::Mpc(s) => s.window_len(),
        Controller::Fixed(_) => 1,
    };
    if config.warmup_steps < window {
        return Err(Error::Config(format!(
            "warmup_steps {} is shorter than the window {window}",
            config.warmup_steps
        )));
    }
    let mut state = PlantState::uniform(config.initial_temp, params);
    let hold = [config.warmup_setpoint; APARTMENTS];
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(config.warmup_steps + config.steps);
    for _ in 0..config.warmup_steps {
        history.push(feature_row(&state, &hold));
        state = plant_step(&state, &hold, params)?.0;
    }
    let mut applied = hold;
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut out = ClosedLoopResult {
        controller: controller.label(),
        horizon: problem.horizon,
        trajectory: Vec::with_capacity(config.steps),
        bill_eur: 0.0,
        degree_hours: 0.0,
        solver_times: Vec::new(),
        fallbacks: 0,
    };
    for _ in 0..config.steps {
        let k = state.step;
        let (u, time, iterations, obj, fallback) = match controller {
            Controller::Fixed(v) => ([*v; APARTMENTS], 0.0, 0, f64::NAN, false),
            Controller::Mpc(s) => {
                let mut h: Vec<Vec<f64>> = history[history.len() + 1 - window..].to_vec();
                h.push(feature_row(&state, &applied));
                let init = InitStrategy { warm: warm.clone() };
                match solve(*s, problem, &h, k, &init, clock) {
                    Ok(r) if r.feasible => {
                        let u = [r.controls[0][0], r.controls[0][1], r.controls[0][2], r.controls[0][3]];
                        out.solver_times.push(r.wall_time_seconds);
                        let res = (u, r.wall_time_seconds, r.iterations, r.objective, false);
                        warm = Some(r.controls);
                        res
                    }
                    Ok(r) => {
                        out.solver_times.push(r.wall_time_seconds);
                        (applied, r.wall_time_seconds, r.iterations, f64::NAN, true)
                    }
                    Err(_) => (applied, 0.0, 0, f64::NAN, true),
                }
            }
        };
        out.fallbacks += usize::from(fallback);
        history.push(feature_row(&state, &u));
        let (next, _) = plant_step(&state, &u, params)?;
        let price = tariff_price(k, &problem.tariff);
        out.trajectory.push(TrajectoryRow {
            step: k,
            clock: clock_label(k),
            price,
            setpoints: u,
            zone_temps: next.zone_temps,
            energy_kwh: next.step_energy_total,
            solver_time_s: time,
            iterations,
            objective: obj,
            fallback,
        });
        applied = u;
        state = next;
    }
    out.bill_eur = bill(out.trajectory.iter().map(|r| (r.energy_kwh, r.price)));
    out.degree_hours = degree_hours(
        out.trajectory.iter().map(|r| &r.zone_temps[..]),
        problem.t_min,
        problem.t_max,
    );
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub horizon: usize,
    pub mean_time_s: f64,
    pub std_time_s: f64,
    pub bill_eur: f64,
    pub degree_hours: f64,
}

pub const BENCH_HORIZONS: [usize; 8] = [4, 8, 12, 16, 20, 24, 28, 32];

pub fn bench_row(run: &ClosedLoopResult) -> BenchRow {
    BenchRow {
        model: run.controller.clone(),
        horizon: run.horizon,
        mean_time_s: stats::mean(&run.solver_times),
        std_time_s: stats::std_dev(&run.solver_times),
        bill_eur: run.bill_eur,
        degree_hours: run.degree_hours,
    }
}

/// One closed-loop run per (model, horizon), in model-major order.
pub fn bench_solver(
    models: &[&dyn Surrogate],
    horizons: &[usize],
    params: &RcParams,
    problem: &MpcProblem,
    config: &ClosedLoopConfig,
    clock: &dyn Clock,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for m in models {
        for &n in horizons {
            let p = MpcProblem {
                horizon: n,
                ..problem.clone()
            };
            let run = closed_loop_run(&Controller::Mpc(*m), params, &p, config, clock)?;
            rows.push(bench_row(&run));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::TickClock;
    use crate::nn::{Architecture, ModelSpec};
    use std::vec::Vec as V;

    /// Energy = c·mean(u) of the window's last setpoint row; temperatures
    /// fixed in band.
    struct MeanEnergy(f64);

    impl Surrogate for MeanEnergy {
        fn window_len(&self) -> usize {
            2
        }
        fn input_convex(&self) -> bool {
            true
        }
        fn prepare(&self, _: &mut Graph) -> Result<Bound> {
            Ok(Bound::default())
        }
        fn step(&self, g: &mut Graph, _: &Bound, w: Var) -> Result<Var> {
            let last = g.gather_rows(w, &[1])?;
            let u = g.slice_cols(last, CONTROL_OFFSET, APARTMENTS)?;
            let e = g.reduce(u, crate::graph::ReduceOp::Mean, 1)?;
            let e = g.reshape(e, &[1, 1])?;
            let e = g.scale(e, self.0);
            let temps = g.constant(Tensor::full(&[1, ZONES], 21.0));
            let tail = g.constant(Tensor::full(&[1, 2], 0.0));
            g.concat_cols(&[temps, e, tail])
        }
        fn label(&self) -> String {
            "mean-energy".into()
        }
    }

    /// Energy = Σ (u − 20)² of the last row, priced at 1 with a flat tariff.
    struct Bowl;

    impl Surrogate for Bowl {
        fn window_len(&self) -> usize {
            1
        }
        fn input_convex(&self) -> bool {
            true
        }
        fn prepare(&self, _: &mut Graph) -> Result<Bound> {
            Ok(Bound::default())
        }
        fn step(&self, g: &mut Graph, _: &Bound, w: Var) -> Result<Var> {
            let u = g.slice_cols(w, CONTROL_OFFSET, APARTMENTS)?;
            let d = g.offset(u, -20.0);
            let sq = g.mul(d, d)?;
            let e = g.sum_all(sq)?;
            let e = g.reshape(e, &[1, 1])?;
            let temps = g.constant(Tensor::full(&[1, ZONES], 21.0));
            let tail = g.constant(Tensor::full(&[1, 2], 0.0));
            g.concat_cols(&[temps, e, tail])
        }
        fn label(&self) -> String {
            "bowl".into()
        }
    }

    fn flat_tariff(price: f64) -> TariffSchedule {
        TariffSchedule {
            blocks: vec![building::TariffBlock {
                name: "flat".into(),
                start_hour: 0.0,
                end_hour: 24.0,
                price,
            }],
        }
    }

    fn history(t: usize) -> V<Vec<f64>> {
        (0..t)
            .map(|i| (0..MODEL_INPUTS).map(|j| 20.0 + 0.1 * ((i * 7 + j) % 5) as f64).collect())
            .collect()
    }

    fn small_surrogate(arch: Architecture, t: usize, seed: u64) -> NeuralSurrogate {
        let mut spec = ModelSpec::new(arch, MODEL_INPUTS, MODEL_OUTPUTS, t);
        spec.model_dim = 8;
        spec.ff_dim = 8;
        let model = Model::init(spec, seed).unwrap();
        let mut scaling = Scaling::identity(MODEL_INPUTS, MODEL_OUTPUTS);
        scaling.inputs.min = vec![15.0; MODEL_INPUTS];
        scaling.inputs.max = vec![30.0; MODEL_INPUTS];
        scaling.targets.min = vec![18.0; MODEL_OUTPUTS];
        scaling.targets.max = vec![22.0; MODEL_OUTPUTS];
        NeuralSurrogate::new(model, scaling).unwrap()
    }

    #[test]
    fn objective_examples() {
        let p = MpcProblem::default();
        let mut row = vec![21.0; MODEL_OUTPUTS];
        row[ENERGY_INDEX] = 0.0;
        let r = Rollout { outputs: vec![row.clone()] };
        assert_eq!(objective(&r, &[0.3], &p, Terms::Full).unwrap(), 0.0);
        row[ENERGY_INDEX] = 1.0;
        let r = Rollout { outputs: vec![row.clone()] };
        let super_peak = tariff_price(19 * 4, &p.tariff);
        assert_eq!(objective(&r, &[super_peak], &p, Terms::Full).unwrap(), 0.605);
        row[ENERGY_INDEX] = 0.0;
        row[3] = 18.0;
        let r = Rollout { outputs: vec![row] };
        assert_eq!(objective(&r, &[0.2], &p, Terms::Full).unwrap(), 10.0);
        assert_eq!(objective(&r, &[0.2], &p, Terms::CostAndUpper).unwrap(), 0.0);
    }

    #[test]
    fn single_step_gradient_is_model_input_gradient() {
        let s = small_surrogate(Architecture::IcEot, 3, 1);
        let h = history(3);
        let u = [19.0, 22.0, 24.0, 17.5];
        let p = MpcProblem {
            horizon: 1,
            comfort_weight: 0.0,
            tariff: flat_tariff(1.0),
            ..MpcProblem::default()
        };
        let (_, grad) = objective_and_gradient(&s, &h, &u, &[1.0], &p).unwrap();
        // direct: d energy / d input through the scaled model
        let mut g = Graph::new();
        let b = s.model.bind(&mut g, false).unwrap();
        let mut rows = h.clone();
        rows[2][CONTROL_OFFSET..].copy_from_slice(&u);
        let flat: V<f64> = rows.iter().flatten().map(|v| (v - 15.0) / 15.0).collect();
        let x = g.input(Tensor::new(vec![3, MODEL_INPUTS], flat).unwrap());
        let y = s.model.forward(&mut g, &b, x, 1).unwrap();
        let e = g.slice_cols(y, ENERGY_INDEX, 1).unwrap();
        let e = g.sum_all(e).unwrap();
        let gx = g.backward(e).unwrap().wrt(x).unwrap().clone();
        for a in 0..4 {
            let want = gx.at2(2, CONTROL_OFFSET + a) * 4.0 / 15.0;
            assert!((grad[a] - want).abs() < 1e-12, "{} vs {want}", grad[a]);
        }
    }

    #[test]
    fn three_step_rollout_gradient_matches_finite_differences() {
        for arch in [Architecture::IcEot, Architecture::IcLstm] {
            let s = small_surrogate(arch, 3, 2);
            let h = history(3);
            let p = MpcProblem {
                horizon: 3,
                comfort_weight: 0.0,
                ..MpcProblem::default()
            };
            let prices = [0.3, 0.5, 0.6];
            let mut r = rng::seeded(4);
            let u: V<f64> = (0..12).map(|_| r.gen_range(17.0..25.0)).collect();
            let (_, grad) = objective_and_gradient(&s, &h, &u, &prices, &p).unwrap();
            let f = |u: &[f64]| objective_value(&s, &h, u, &prices, &p, Terms::Full).unwrap();
            let mut fd = vec![0.0; 12];
            for i in 0..12 {
                let (mut a, mut b) = (u.clone(), u.clone());
                a[i] += 1e-3;
                b[i] -= 1e-3;
                fd[i] = (f(&a) - f(&b)) / 2e-3;
            }
            let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = fd.iter().map(|b| b * b).sum();
            let rel = libm::sqrt(num / den.max(1e-30));
            assert!(rel < 1e-4, "{arch:?}: {rel}");
        }
    }

    #[test]
    fn constant_output_has_zero_gradient_and_stays_put() {
        let s = MeanEnergy(0.0);
        let p = MpcProblem {
            horizon: 3,
            ..MpcProblem::default()
        };
        let h = history(2);
        let (_, g) = objective_and_gradient(&s, &h, &[18.0; 12], &p.prices(0), &p).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let r = solve(&s, &p, &h, 0, &InitStrategy::default(), &TickClock::new(1e-3)).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert!(r.controls.iter().flatten().all(|&v| v == 21.0));
    }

    #[test]
    fn monotone_energy_drives_to_lower_bound() {
        let s = MeanEnergy(2.0);
        let p = MpcProblem {
            horizon: 4,
            ..MpcProblem::default()
        };
        let r = solve(&s, &p, &history(2), 10, &InitStrategy::default(), &TickClock::new(1e-3)).unwrap();
        assert!(r.converged);
        assert!(r.controls.iter().flatten().all(|&v| v == p.u_min), "{:?}", r.controls);
        assert!(r.wall_time_seconds > 0.0);
    }

    #[test]
    fn quadratic_bowl_minimum() {
        let p = MpcProblem {
            horizon: 2,
            tariff: flat_tariff(1.0),
            ..MpcProblem::default()
        };
        let r = solve(&Bowl, &p, &history(1), 0, &InitStrategy::default(), &TickClock::new(1e-3)).unwrap();
        assert!(r.converged);
        for v in r.controls.iter().flatten() {
            assert!((v - 20.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn controls_in_box_and_warm_start_never_worse() {
        let s = small_surrogate(Architecture::IcEot, 4, 3);
        let p = MpcProblem {
            horizon: 4,
            solver: SolverConfig {
                max_iterations: 20,
                ..SolverConfig::default()
            },
            ..MpcProblem::default()
        };
        let h = history(4);
        let c = TickClock::new(1e-3);
        let first = solve(&s, &p, &h, 60, &InitStrategy::default(), &c).unwrap();
        let warm = InitStrategy {
            warm: Some(first.controls.clone()),
        };
        let second = solve(&s, &p, &h, 61, &warm, &c).unwrap();
        assert!(second.objective <= second.initial_objective);
        let start = shift_warm_start(&first.controls, 4);
        let j0 = objective_value(&s, &h, &start, &p.prices(61), &p, Terms::Full).unwrap();
        assert!((j0 - second.initial_objective).abs() < 1e-12);
        for v in first.controls.iter().chain(&second.controls).flatten() {
            assert!((p.u_min..=p.u_max).contains(v));
        }
    }

    #[test]
    fn non_convex_surrogate_uses_multistart() {
        let s = small_surrogate(Architecture::Lstm, 3, 5);
        let p = MpcProblem {
            horizon: 2,
            solver: SolverConfig {
                max_iterations: 5,
                ..SolverConfig::default()
            },
            ..MpcProblem::default()
        };
        let h = history(3);
        let r = solve(&s, &p, &h, 0, &InitStrategy::default(), &TickClock::new(1e-3)).unwrap();
        assert!(r.feasible);
        let cold = objective_value(&s, &h, &[21.0; 8], &p.prices(0), &p, Terms::Full).unwrap();
        assert!(r.objective <= cold);
    }

    #[test]
    fn one_step_cost_objective_convexity() {
        let p = MpcProblem {
            horizon: 1,
            ..MpcProblem::default()
        };
        for arch in [Architecture::IcLstm, Architecture::Icrnn] {
            let s = small_surrogate(arch, 3, 6);
            let rep = objective_convexity(&s, &p, &history(3), 70, 200, 9, Terms::CostAndUpper).unwrap();
            assert_eq!(rep.violations, 0, "{rep:?}");
        }
        // attention weights are not convex in the keys, so the count is
        // reported rather than asserted
        let s = small_surrogate(Architecture::IcEot, 3, 6);
        let rep = objective_convexity(&s, &p, &history(3), 70, 200, 9, Terms::CostAndUpper).unwrap();
        assert_eq!(rep.probes, 200);
        assert!(rep.max_violation_magnitude.is_finite());
    }

    #[test]
    fn degree_hours_and_bill_arithmetic() {
        let mut rows = vec![vec![21.0; ZONES]; 6];
        for r in rows.iter_mut().take(4) {
            r[2] = 25.0;
        }
        let dh = degree_hours(rows.iter().map(|r| &r[..]), 19.0, 24.0);
        assert!((dh - 1.0).abs() < 1e-12);
        assert_eq!(bill([(1.0, 0.5), (2.0, 0.25)]), 1.0);
    }

    #[test]
    fn fixed_controller_closed_loop_accounting() {
        let params = RcParams::default();
        let p = MpcProblem::default();
        let cfg = ClosedLoopConfig {
            warmup_steps: 8,
            steps: 96,
            ..ClosedLoopConfig::default()
        };
        let run = closed_loop_run(&Controller::Fixed(21.0), &params, &p, &cfg, &TickClock::new(1.0)).unwrap();
        assert_eq!(run.trajectory.len(), 96);
        let bill: f64 = run.trajectory.iter().map(|r| r.energy_kwh * tariff_price(r.step, &p.tariff)).sum();
        assert!((bill - run.bill_eur).abs() < 1e-9);
        assert!(run.degree_hours.is_finite());
        assert_eq!(run.trajectory[0].step, 8);
        assert_eq!(run.trajectory[0].clock, "02:00");
    }

    #[test]
    fn mpc_closed_loop_runs_with_stub() {
        let params = RcParams::default();
        let p = MpcProblem {
            horizon: 2,
            ..MpcProblem::default()
        };
        let cfg = ClosedLoopConfig {
            warmup_steps: 4,
            steps: 6,
            ..ClosedLoopConfig::default()
        };
        let s = MeanEnergy(1.0);
        let run = closed_loop_run(&Controller::Mpc(&s), &params, &p, &cfg, &TickClock::new(1e-3)).unwrap();
        assert_eq!(run.solver_times.len(), 6);
        assert!(run.trajectory.iter().all(|r| r.setpoints == [16.0; 4]));
        let rows = bench_solver(&[&s], &[2], &params, &p, &cfg, &TickClock::new(1e-3)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].horizon, 2);
        assert!((rows[0].bill_eur - run.bill_eur).abs() < 1e-12);
    }
}
