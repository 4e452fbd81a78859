//! Mini-batch Adam training with non-negativity projection, early stopping
//! and per-epoch gradient telemetry.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clock::{elapsed, Clock};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Architecture, Model, ModelSpec};
use crate::param::ParamSet;
use crate::rng;
use crate::stats;
use crate::tensor::Tensor;

/// Consecutive non-finite epochs after which a run is declared failed.
pub const NAN_EPOCH_LIMIT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Global gradient-norm clip. Off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            validation_fraction: 0.2,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patience < 1 {
            return bad("patience must be ≥ 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be ≥ 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

/// One row of the training telemetry. Non-finite values are stored as NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Largest per-parameter gradient ℓ2 norm seen during the epoch, taken
    /// before clipping and projection.
    pub max_layer_grad_norm: f64,
    pub wall_time_seconds: f64,
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.iter().map(|p| alloc::vec![0.0; p.value().len()]).collect(),
            v: params.iter().map(|p| alloc::vec![0.0; p.value().len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One bias-corrected Adam update followed by projection of every
/// non-negative parameter onto `[0, ∞)`.
///
/// `grads` follows the order of `params`.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - libm::pow(b1, f64::from(state.t));
    let c2 = 1.0 - libm::pow(b2, f64::from(state.t));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        if g.len() != p.value().len() {
            return Err(Error::shape("adam", p.value().shape(), grads[i].shape()));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value_mut().data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= config.learning_rate * mh / (libm::sqrt(vh) + config.eps);
        }
        p.project();
    }
    Ok(())
}

/// Per-column affine map onto `[0, 1]`. Constant columns map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Contract("cannot fit a scaler on no rows".into()))?;
        let mut min = first.clone();
        let mut max = first.clone();
        for r in rows {
            if r.len() != min.len() {
                return Err(Error::shape("scaler", &[min.len()], &[r.len()]));
            }
            for (j, &v) in r.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(MinMax { min, max })
    }

    pub fn width(&self) -> usize {
        self.min.len()
    }

    /// Slope of column `j`.
    pub fn scale(&self, j: usize) -> f64 {
        let r = self.max[j] - self.min[j];
        if r > 0.0 {
            1.0 / r
        } else {
            1.0
        }
    }

    pub fn forward(&self, j: usize, v: f64) -> f64 {
        (v - self.min[j]) * self.scale(j)
    }

    pub fn inverse(&self, j: usize, v: f64) -> f64 {
        v / self.scale(j) + self.min[j]
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &v)| self.forward(j, v)).collect()
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, &v)| self.inverse(j, v)).collect()
    }
}

/// Input and target scalers persisted with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub inputs: MinMax,
    pub targets: MinMax,
}

impl Scaling {
    pub fn identity(inputs: usize, targets: usize) -> Self {
        let unit = |n: usize| MinMax {
            min: alloc::vec![0.0; n],
            max: alloc::vec![1.0; n],
        };
        Scaling {
            inputs: unit(inputs),
            targets: unit(targets),
        }
    }
}

/// Fixed-length windows over a multivariate series with one target row per
/// window, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    seq_len: usize,
    input_dim: usize,
    output_dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    /// `x` holds `n` windows of `seq_len × input_dim`, `y` holds `n` rows of
    /// `output_dim`.
    pub fn new(
        seq_len: usize,
        input_dim: usize,
        output_dim: usize,
        x: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        if seq_len == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::Contract("dataset dimensions must be positive".into()));
        }
        let n = y.len() / output_dim;
        if !y.len().is_multiple_of(output_dim) || x.len() != n * seq_len * input_dim {
            return Err(Error::shape(
                "dataset",
                &[n, seq_len, input_dim],
                &[x.len(), y.len()],
            ));
        }
        Ok(Dataset {
            seq_len,
            input_dim,
            output_dim,
            x,
            y,
        })
    }

    /// Sliding windows: window `i` covers `features[i..i+T]` and is paired
    /// with `targets[i+T−1]`.
    pub fn windows(features: &[Vec<f64>], targets: &[Vec<f64>], seq_len: usize) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::shape("windows", &[features.len()], &[targets.len()]));
        }
        if seq_len == 0 || features.len() < seq_len {
            return Err(Error::Contract(format!(
                "{} rows cannot fill a window of {seq_len}",
                features.len()
            )));
        }
        let d = features[0].len();
        let o = targets[0].len();
        let n = features.len() + 1 - seq_len;
        let mut x = Vec::with_capacity(n * seq_len * d);
        let mut y = Vec::with_capacity(n * o);
        for i in 0..n {
            for r in &features[i..i + seq_len] {
                if r.len() != d {
                    return Err(Error::shape("windows", &[d], &[r.len()]));
                }
                x.extend_from_slice(r);
            }
            y.extend_from_slice(&targets[i + seq_len - 1]);
        }
        Dataset::new(seq_len, d, o, x, y)
    }

    pub fn len(&self) -> usize {
        self.y.len() / self.output_dim
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.seq_len * self.input_dim;
        &self.x[i * w..(i + 1) * w]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.y[i * self.output_dim..(i + 1) * self.output_dim]
    }

    /// Stacks the given samples into `([B·T, d], [B, out])`.
    pub fn batch(&self, index: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut x = Vec::with_capacity(index.len() * self.seq_len * self.input_dim);
        let mut y = Vec::with_capacity(index.len() * self.output_dim);
        for &i in index {
            x.extend_from_slice(self.window(i));
            y.extend_from_slice(self.target(i));
        }
        Ok((
            Tensor::new(alloc::vec![index.len() * self.seq_len, self.input_dim], x)?,
            Tensor::new(alloc::vec![index.len(), self.output_dim], y)?,
        ))
    }

    /// Chronological split: the last `fraction` of samples validate.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        let n_val = ((n as f64 * fraction) as usize).max(1);
        if n_val >= n {
            return Err(Error::Contract(format!(
                "{n} samples leave nothing to train on after a {fraction} validation split"
            )));
        }
        Ok((self.subset(0..n - n_val), self.subset(n - n_val..n)))
    }

    pub fn subset(&self, range: core::ops::Range<usize>) -> Dataset {
        let w = self.seq_len * self.input_dim;
        Dataset {
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            x: self.x[range.start * w..range.end * w].to_vec(),
            y: self.y[range.start * self.output_dim..range.end * self.output_dim].to_vec(),
        }
    }
}

/// Tracks the best validation loss and counts non-improving epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records one validation loss; returns whether it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss.is_finite() && loss < self.best {
            self.best = loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or the initial ones if no
    /// epoch produced a finite validation loss.
    pub model: Model,
    pub telemetry: Vec<EpochTelemetry>,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: f64,
    /// Set when the run diverged.
    pub failure: Option<String>,
}

impl TrainOutcome {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn nan_epochs(&self) -> usize {
        self.telemetry
            .iter()
            .filter(|e| !e.train_loss.is_finite() || !e.validation_loss.is_finite())
            .count()
    }

    pub fn mean_epoch_time(&self) -> f64 {
        let t: Vec<f64> = self.telemetry.iter().map(|e| e.wall_time_seconds).collect();
        stats::mean(&t)
    }
}

struct StepResult {
    loss: f64,
    grads: Vec<Tensor>,
    max_norm: f64,
}

fn batch_step(model: &Model, x: Tensor, y: Tensor, batch: usize) -> Result<StepResult> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true)?;
    let xv = g.constant(x);
    let yv = g.constant(y);
    let pred = model.forward(&mut g, &b, xv, batch)?;
    let diff = g.sub(pred, yv)?;
    let sq = g.mul(diff, diff)?;
    let loss_v = g.mean_all(sq)?;
    let loss = g.value(loss_v).data()[0];
    let grads = g.backward(loss_v)?;
    let mut out = Vec::with_capacity(model.params().len());
    let mut max_norm: f64 = 0.0;
    for p in model.params().iter() {
        let t = grads
            .by_name(p.name())
            .cloned()
            .ok_or_else(|| Error::MissingParameter(p.name().into()))?;
        let n = t.l2_norm();
        max_norm = if n.is_finite() && !max_norm.is_nan() {
            max_norm.max(n)
        } else {
            f64::NAN
        };
        out.push(t);
    }
    Ok(StepResult {
        loss,
        grads: out,
        max_norm,
    })
}

/// Mean squared error of `model` over `data`, evaluated in batches.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.predict_batch(&x, chunk.len())?;
        total += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    Ok(total / (n * data.output_dim()) as f64)
}

fn clip(grads: &mut [Tensor], limit: f64) {
    let total = libm::sqrt(grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum());
    if total > limit {
        let s = limit / total;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Trains `model` on `train_set`, validating on `val_set` after every epoch.
///
/// A batch whose loss or gradient is non-finite leaves the parameters
/// untouched and marks the epoch as NaN. [`NAN_EPOCH_LIMIT`] consecutive NaN
/// epochs end the run with a failure.
pub fn train(
    model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let s = model.spec();
    if train_set.seq_len() != s.sequence_length
        || train_set.input_dim() != s.input_dim
        || train_set.output_dim() != s.output_dim
    {
        return Err(Error::shape(
            "train",
            &[s.sequence_length, s.input_dim, s.output_dim],
            &[train_set.seq_len(), train_set.input_dim(), train_set.output_dim()],
        ));
    }
    let mut model = model;
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut adam = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut shuffle = rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut telemetry = Vec::new();
    let mut nan_run = 0;
    let mut failure = None;

    for epoch in 0..config.max_epochs {
        let start = clock.now();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut max_norm: f64 = 0.0;
        let mut nan_epoch = false;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            let mut step = batch_step(&model, x, y, chunk.len())?;
            if max_norm.is_finite() {
                max_norm = if step.max_norm.is_finite() {
                    max_norm.max(step.max_norm)
                } else {
                    f64::NAN
                };
            }
            let finite = step.loss.is_finite() && step.grads.iter().all(Tensor::all_finite);
            if !finite {
                nan_epoch = true;
                continue;
            }
            loss_sum += step.loss * chunk.len() as f64;
            if let Some(c) = config.grad_clip {
                clip(&mut step.grads, c);
            }
            adam_step(model.params_mut(), &step.grads, &mut adam, config)?;
        }
        let train_loss = if nan_epoch {
            f64::NAN
        } else {
            loss_sum / train_set.len() as f64
        };
        let val = evaluate(&model, val_set, config.batch_size)?;
        let validation_loss = if val.is_finite() { val } else { f64::NAN };
        telemetry.push(EpochTelemetry {
            epoch,
            train_loss,
            validation_loss,
            max_layer_grad_norm: max_norm,
            wall_time_seconds: elapsed(clock, start),
        });
        if nan_epoch || !validation_loss.is_finite() {
            nan_run += 1;
            if nan_run >= NAN_EPOCH_LIMIT {
                failure = Some(format!(
                    "{nan_run} consecutive non-finite epochs ending at epoch {epoch}"
                ));
                break;
            }
        } else {
            nan_run = 0;
        }
        if stopper.observe(validation_loss) {
            best = model.clone();
            best_epoch = Some(epoch);
        }
        if stopper.should_stop() {
            break;
        }
    }
    if best_epoch.is_none() && failure.is_none() {
        failure = Some("no epoch produced a finite validation loss".into());
    }
    Ok(TrainOutcome {
        model: best,
        telemetry,
        best_epoch,
        best_validation_loss: stopper.best(),
        failure,
    })
}

/// One (architecture, sequence length) cell of a stability sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub architecture: Architecture,
    pub sequence_length: usize,
    pub seed: u64,
}

/// Cells in row-major (architecture, length) order; seeds are
/// `seed + index`.
pub fn sweep_cells(archs: &[Architecture], lengths: &[usize], seed: u64) -> Vec<SweepCell> {
    let mut v = Vec::new();
    for &a in archs {
        for &n in lengths {
            let index = v.len();
            v.push(SweepCell {
                index,
                architecture: a,
                sequence_length: n,
                seed: seed + index as u64,
            });
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub architecture: Architecture,
    pub sequence_length: usize,
    pub seed: u64,
    pub epochs: usize,
    pub nan_epochs: usize,
    pub median_grad_norm: f64,
    pub max_grad_norm: f64,
    /// `max / median` of the finite per-epoch gradient norms.
    pub spike_ratio: f64,
    /// Whether every epoch from the first on was non-finite.
    pub persistent_nan: bool,
    pub best_validation_loss: f64,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: SweepCell,
    pub telemetry: Vec<EpochTelemetry>,
    pub summary: CellSummary,
}

pub fn summarize(cell: &SweepCell, outcome: &TrainOutcome) -> CellSummary {
    let norms: Vec<f64> = outcome
        .telemetry
        .iter()
        .map(|e| e.max_layer_grad_norm)
        .collect();
    let median = stats::median_finite(&norms);
    let max = norms
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NAN, f64::max);
    let nan_epochs = outcome.nan_epochs();
    CellSummary {
        architecture: cell.architecture,
        sequence_length: cell.sequence_length,
        seed: cell.seed,
        epochs: outcome.telemetry.len(),
        nan_epochs,
        median_grad_norm: median,
        max_grad_norm: max,
        spike_ratio: if median > 0.0 { max / median } else { f64::NAN },
        persistent_nan: nan_epochs > 0 && nan_epochs == outcome.telemetry.len(),
        best_validation_loss: outcome.best_validation_loss,
        failure: outcome.failure.clone(),
    }
}

/// Trains one sweep cell. `data` builds the dataset for a sequence length;
/// `spec` builds the model spec for an architecture and length.
pub fn run_cell(
    cell: &SweepCell,
    data: &dyn Fn(usize) -> Result<Dataset>,
    spec: &dyn Fn(Architecture, usize) -> ModelSpec,
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<CellResult> {
    let ds = data(cell.sequence_length)?;
    let (tr, va) = ds.split(config.validation_fraction)?;
    let model = Model::init(spec(cell.architecture, cell.sequence_length), cell.seed)?;
    let cfg = TrainConfig {
        seed: cell.seed,
        ..config.clone()
    };
    let outcome = train(model, &tr, &va, &cfg, clock)?;
    let summary = summarize(cell, &outcome);
    Ok(CellResult {
        cell: cell.clone(),
        telemetry: outcome.telemetry,
        summary,
    })
}

/// Runs every cell in sequence. A cell whose setup fails is reported as a
/// failure rather than aborting the sweep.
pub fn stability_sweep(
    archs: &[Architecture],
    lengths: &[usize],
    data: &dyn Fn(usize) -> Result<Dataset>,
    spec: &dyn Fn(Architecture, usize) -> ModelSpec,
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Vec<CellResult> {
    sweep_cells(archs, lengths, config.seed)
        .iter()
        .map(|c| run_cell(c, data, spec, config, clock).unwrap_or_else(|e| failed_cell(c, e)))
        .collect()
}

pub fn failed_cell(cell: &SweepCell, e: Error) -> CellResult {
    CellResult {
        cell: cell.clone(),
        telemetry: Vec::new(),
        summary: CellSummary {
            architecture: cell.architecture,
            sequence_length: cell.sequence_length,
            seed: cell.seed,
            epochs: 0,
            nan_epochs: 0,
            median_grad_norm: f64::NAN,
            max_grad_norm: f64::NAN,
            spike_ratio: f64::NAN,
            persistent_nan: false,
            best_validation_loss: f64::NAN,
            failure: Some(format!("{e}")),
        },
    }
}
