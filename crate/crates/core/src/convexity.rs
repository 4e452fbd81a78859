//! Numerical convexity and monotonicity probes, and the bivariate toy
//! surfaces used to compare convex architectures.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{elapsed, Clock};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Model, ModelSpec};
use crate::rng;
use crate::stats;
use crate::tensor::Tensor;
use crate::train::{self, Dataset, EpochTelemetry, MinMax, TrainConfig};

/// Slack allowed by the midpoint probe.
pub const MIDPOINT_TOL: f64 = 1e-8;
/// Perturbation of the monotonicity probe.
pub const MONOTONE_DELTA: f64 = 1e-3;
/// Decrease tolerated by the monotonicity probe.
pub const MONOTONE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyFn {
    F1,
    F2,
    F3,
}

impl ToyFn {
    pub const ALL: [ToyFn; 3] = [ToyFn::F1, ToyFn::F2, ToyFn::F3];

    pub fn label(self) -> &'static str {
        match self {
            ToyFn::F1 => "f1",
            ToyFn::F2 => "f2",
            ToyFn::F3 => "f3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ToyFn::ALL.into_iter().find(|f| f.label().eq_ignore_ascii_case(s))
    }
}

/// `x^{4/3}` on the real branch, `(∛x)⁴`, defined for negative `x`.
pub fn pow_four_thirds(x: f64) -> f64 {
    let c = libm::cbrt(x);
    let c2 = c * c;
    c2 * c2
}

fn sq(v: f64) -> f64 {
    v * v
}

pub fn toy_function(id: ToyFn, x: f64, y: f64) -> f64 {
    match id {
        ToyFn::F1 => -libm::cos(4.0 * x * x + 4.0 * y * y),
        ToyFn::F2 => {
            let a = x * x + y * y;
            let b = sq(2.0 * x - 1.0) + sq(2.0 * y - 1.0) - 2.0;
            let c = -sq(2.0 * x + 1.0) - sq(2.0 * y + 1.0) + 4.0;
            a.min(b).max(c)
        }
        ToyFn::F3 => {
            x * x * (4.0 - 2.1 * x * x + pow_four_thirds(x)) - 4.0 * y * y * (1.0 - y * y) + x * y
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub x: f64,
    pub y: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceData {
    pub train: Vec<SurfacePoint>,
    pub test: Vec<SurfacePoint>,
}

/// `n_train + n_test` uniform samples over `[lo, hi]²`.
pub fn make_surface_dataset(
    id: ToyFn,
    range: (f64, f64),
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<SurfaceData> {
    if n_train + n_test < 4 {
        return Err(Error::Contract(format!(
            "need at least 4 surface samples, got {}",
            n_train + n_test
        )));
    }
    let (lo, hi) = range;
    if !(lo < hi) {
        return Err(Error::Contract(format!("empty sampling range [{lo}, {hi}]")));
    }
    let mut r = rng::seeded(seed);
    let mut pts: Vec<SurfacePoint> = (0..n_train + n_test)
        .map(|_| {
            let x = r.gen_range(lo..hi);
            let y = r.gen_range(lo..hi);
            SurfacePoint {
                x,
                y,
                f: toy_function(id, x, y),
            }
        })
        .collect();
    let test = pts.split_off(n_train);
    Ok(SurfaceData { train: pts, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub architecture: String,
    pub probes: usize,
    pub violations: usize,
    pub max_violation_magnitude: f64,
    pub seed: u64,
}

/// A vector-valued function under test.
pub type ProbeFn<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a;

/// Probes `f(λx + (1−λ)y) ≤ λf(x) + (1−λ)f(y)` at random `x, y` in
/// `[lo, hi]^dim` and `λ ∈ (0, 1)`. A non-finite output counts as a violation
/// of infinite magnitude.
pub fn midpoint_convexity_check(
    label: &str,
    f: &ProbeFn<'_>,
    dim: usize,
    probes: usize,
    seed: u64,
    range: (f64, f64),
) -> Result<ConvexityReport> {
    if probes == 0 || dim == 0 {
        return Err(Error::Contract("probes and dim must be ≥ 1".into()));
    }
    let mut r = rng::seeded(seed);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x: Vec<f64> = (0..dim).map(|_| r.gen_range(range.0..range.1)).collect();
        let y: Vec<f64> = (0..dim).map(|_| r.gen_range(range.0..range.1)).collect();
        let lam: f64 = r.gen_range(0.0..1.0);
        let m: Vec<f64> = x.iter().zip(&y).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let (fx, fy, fm) = (f(&x)?, f(&y)?, f(&m)?);
        let mut gap: f64 = f64::NEG_INFINITY;
        for k in 0..fm.len() {
            let g = fm[k] - (lam * fx[k] + (1.0 - lam) * fy[k]);
            gap = if g.is_finite() { gap.max(g) } else { f64::INFINITY };
        }
        if gap > MIDPOINT_TOL {
            violations += 1;
            worst = worst.max(gap);
        }
    }
    Ok(ConvexityReport {
        architecture: label.into(),
        probes,
        violations,
        max_violation_magnitude: worst,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub architecture: String,
    pub probes: usize,
    /// Probes in which some coordinate step decreased some output.
    pub flagged: usize,
    pub max_decrease: f64,
    pub seed: u64,
}

/// Steps every coordinate listed in `positive` by `+δ` from random points in
/// `[lo, hi]^dim` and flags any output decrease beyond tolerance.
pub fn monotonicity_check(
    label: &str,
    f: &ProbeFn<'_>,
    dim: usize,
    positive: &[usize],
    probes: usize,
    seed: u64,
    range: (f64, f64),
) -> Result<MonotonicityReport> {
    if probes == 0 || positive.iter().any(|&j| j >= dim) {
        return Err(Error::Contract(format!(
            "bad monotonicity probe: {probes} probes over {positive:?} of {dim}"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut flagged = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x: Vec<f64> = (0..dim).map(|_| r.gen_range(range.0..range.1)).collect();
        let fx = f(&x)?;
        let mut hit = false;
        for &j in positive {
            let mut xp = x.clone();
            xp[j] += MONOTONE_DELTA;
            let fp = f(&xp)?;
            for k in 0..fx.len() {
                let drop = fx[k] - fp[k];
                let drop = if drop.is_finite() { drop } else { f64::INFINITY };
                if drop > MONOTONE_TOL {
                    hit = true;
                    worst = worst.max(drop);
                }
            }
        }
        flagged += usize::from(hit);
    }
    Ok(MonotonicityReport {
        architecture: label.into(),
        probes,
        flagged,
        max_decrease: worst,
        seed,
    })
}

/// The model as a function of its flattened `[T, d_in]` input.
pub fn sequence_fn(model: &Model) -> impl Fn(&[f64]) -> Result<Vec<f64>> + '_ {
    move |v: &[f64]| {
        let s = model.spec();
        let x = Tensor::new(alloc::vec![s.sequence_length, s.input_dim], v.to_vec())?;
        model.predict(&x)
    }
}

/// The model as a function of its flattened expanded `[T, 2·d_in]` input.
pub fn expanded_fn(model: &Model) -> impl Fn(&[f64]) -> Result<Vec<f64>> + '_ {
    move |v: &[f64]| {
        let s = model.spec();
        let x = Tensor::new(alloc::vec![s.sequence_length, 2 * s.input_dim], v.to_vec())?;
        model.predict_expanded(&x)
    }
}

/// Indices of the `+x` half of each expanded token in a flattened
/// `[T, 2·d]` input.
pub fn positive_half(seq: usize, d: usize) -> Vec<usize> {
    (0..seq).flat_map(|t| (0..d).map(move |j| t * 2 * d + j)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub range: (f64, f64),
    pub grid: usize,
    pub model_dim: Option<usize>,
    pub ff_dim: Option<usize>,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_train: 2000,
            n_test: 500,
            range: (-1.0, 1.0),
            grid: 41,
            model_dim: None,
            ff_dim: None,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                max_epochs: 600,
                patience: 40,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub function: ToyFn,
    pub architecture: Architecture,
    pub test_mse: f64,
    pub r2: f64,
    pub training_time_seconds: f64,
    pub mean_epoch_time_seconds: f64,
    pub epochs: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub truth: f64,
    pub pred: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub report: FitReport,
    pub grid: Vec<GridPoint>,
    pub model: Model,
    pub target_scale: MinMax,
    pub telemetry: Vec<EpochTelemetry>,
}

impl FitOutcome {
    /// Unscaled prediction at one point.
    pub fn predict(&self, x: f64, y: f64) -> Result<f64> {
        let t = Tensor::new(alloc::vec![1, 2], alloc::vec![x, y])?;
        Ok(self.target_scale.inverse(0, self.model.predict(&t)?[0]))
    }
}

fn surface_set(pts: &[SurfacePoint], scale: &MinMax) -> Result<Dataset> {
    let x = pts.iter().flat_map(|p| [p.x, p.y]).collect();
    let y = pts.iter().map(|p| scale.forward(0, p.f)).collect();
    Dataset::new(1, 2, 1, x, y)
}

/// The model spec used for surface fits: inputs are `(x, y)` presented as a
/// length-1 sequence.
pub fn surface_spec(arch: Architecture, config: &FitConfig) -> ModelSpec {
    let mut s = ModelSpec::new(arch, 2, 1, 1);
    if let Some(d) = config.model_dim {
        s.model_dim = d;
    }
    if let Some(d) = config.ff_dim {
        s.ff_dim = d;
    }
    s
}

/// Fits `arch` to the toy surface `id` and evaluates it on held-out points
/// and on a `grid × grid` lattice over the sampling range.
pub fn fit_surface(
    arch: Architecture,
    id: ToyFn,
    config: &FitConfig,
    clock: &dyn Clock,
) -> Result<FitOutcome> {
    let data = make_surface_dataset(id, config.range, config.n_train, config.n_test, config.train.seed)?;
    let targets: Vec<Vec<f64>> = data.train.iter().map(|p| alloc::vec![p.f]).collect();
    let scale = MinMax::fit(&targets)?;
    let full = surface_set(&data.train, &scale)?;
    let (tr, va) = full.split(config.train.validation_fraction)?;
    let model = Model::init(surface_spec(arch, config), config.train.seed)?;
    let start = clock.now();
    let out = train::train(model, &tr, &va, &config.train, clock)?;
    let training_time = elapsed(clock, start);

    let test = surface_set(&data.test, &scale)?;
    let idx: Vec<usize> = (0..test.len()).collect();
    let (tx, _) = test.batch(&idx)?;
    let pred: Vec<f64> = out
        .model
        .predict_batch(&tx, idx.len())?
        .data()
        .iter()
        .map(|&v| scale.inverse(0, v))
        .collect();
    let truth: Vec<f64> = data.test.iter().map(|p| p.f).collect();

    let n = config.grid.max(2);
    let (lo, hi) = config.range;
    let mut gx = Vec::with_capacity(2 * n * n);
    let mut coords = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let y = lo + (hi - lo) * j as f64 / (n - 1) as f64;
            gx.extend_from_slice(&[x, y]);
            coords.push((x, y));
        }
    }
    let gp = out
        .model
        .predict_batch(&Tensor::new(alloc::vec![n * n, 2], gx)?, n * n)?;
    let grid = coords
        .iter()
        .zip(gp.data())
        .map(|(&(x, y), &p)| GridPoint {
            x,
            y,
            truth: toy_function(id, x, y),
            pred: scale.inverse(0, p),
        })
        .collect();

    let report = FitReport {
        function: id,
        architecture: arch,
        test_mse: stats::mse(&pred, &truth),
        r2: stats::r2(&pred, &truth),
        training_time_seconds: training_time,
        mean_epoch_time_seconds: out.mean_epoch_time(),
        epochs: out.telemetry.len(),
        failure: out.failure.clone(),
    };
    Ok(FitOutcome {
        report,
        grid,
        model: out.model,
        target_scale: scale,
        telemetry: out.telemetry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec;

    #[test]
    fn toy_values_at_origin() {
        assert_eq!(toy_function(ToyFn::F1, 0.0, 0.0), -1.0);
        assert_eq!(toy_function(ToyFn::F2, 0.0, 0.0), 2.0);
        assert_eq!(toy_function(ToyFn::F3, 0.0, 0.0), 0.0);
    }

    #[test]
    fn odd_root_branch() {
        assert!((pow_four_thirds(-8.0) - 16.0).abs() < 1e-12);
        assert!((pow_four_thirds(8.0) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn surface_samples_are_reproducible_and_finite() {
        let a = make_surface_dataset(ToyFn::F2, (-1.0, 1.0), 3, 1, 7).unwrap();
        let b = make_surface_dataset(ToyFn::F2, (-1.0, 1.0), 3, 1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), 4);
        assert!(make_surface_dataset(ToyFn::F2, (-1.0, 1.0), 2, 1, 7).is_err());
        let big = make_surface_dataset(ToyFn::F1, (-1.0, 1.0), 1000, 0, 1).unwrap();
        assert!(big.train.iter().all(|p| p.f.is_finite() && p.x.abs() <= 1.0));
    }

    #[test]
    fn f3_sample_mean_matches_quadrature() {
        let d = make_surface_dataset(ToyFn::F3, (-1.0, 1.0), 100_000, 0, 3).unwrap();
        let mc = d.train.iter().map(|p| p.f).sum::<f64>() / 1e5;
        let n = 400;
        let h = 2.0 / n as f64;
        let mut q = 0.0;
        for i in 0..=n {
            for j in 0..=n {
                let wx = if i == 0 || i == n { 0.5 } else { 1.0 };
                let wy = if j == 0 || j == n { 0.5 } else { 1.0 };
                q += wx * wy * toy_function(ToyFn::F3, -1.0 + i as f64 * h, -1.0 + j as f64 * h);
            }
        }
        q *= h * h / 4.0;
        assert!((mc - q).abs() < 1e-2, "mc {mc} quad {q}");
    }

    #[test]
    fn affine_has_no_violations_and_concave_has_some() {
        let affine = |v: &[f64]| Ok(vec![v.iter().sum::<f64>()]);
        let r = midpoint_convexity_check("affine", &affine, 3, 200, 1, (-2.0, 2.0)).unwrap();
        assert_eq!(r.violations, 0);
        let concave = |v: &[f64]| Ok(vec![-v.iter().map(|a| a * a).sum::<f64>()]);
        let r = midpoint_convexity_check("concave", &concave, 2, 200, 1, (-2.0, 2.0)).unwrap();
        assert!(r.violations > 0 && r.max_violation_magnitude > 0.0);
    }

    #[test]
    fn non_finite_output_is_a_violation() {
        let f = |_: &[f64]| Ok(vec![f64::NAN]);
        let r = midpoint_convexity_check("nan", &f, 1, 5, 0, (-2.0, 2.0)).unwrap();
        assert_eq!(r.violations, 5);
        assert_eq!(r.max_violation_magnitude, f64::INFINITY);
    }

    #[test]
    fn monotone_probe_controls() {
        let id = |v: &[f64]| Ok(vec![v[0] + v[1].max(0.0)]);
        let r = monotonicity_check("id", &id, 2, &[0, 1], 50, 0, (-2.0, 2.0)).unwrap();
        assert_eq!(r.flagged, 0);
        let neg = |v: &[f64]| Ok(vec![-0.5 * v[0]]);
        let r = monotonicity_check("neg", &neg, 2, &[0], 50, 0, (-2.0, 2.0)).unwrap();
        assert_eq!(r.flagged, 50);
    }

    #[test]
    fn positive_half_indices() {
        assert_eq!(positive_half(2, 2), vec![0, 1, 4, 5]);
    }

    #[test]
    fn grid_matches_direct_forward() {
        let cfg = FitConfig {
            n_train: 60,
            n_test: 20,
            grid: 5,
            model_dim: Some(4),
            ff_dim: Some(4),
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 16,
                ..FitConfig::default().train
            },
            ..FitConfig::default()
        };
        let out = fit_surface(
            Architecture::IcEot,
            ToyFn::F2,
            &cfg,
            &crate::clock::TickClock::new(1.0),
        )
        .unwrap();
        assert_eq!(out.grid.len(), 25);
        for p in out.grid.iter().step_by(7) {
            assert!((out.predict(p.x, p.y).unwrap() - p.pred).abs() < 1e-12);
            assert_eq!(p.truth, toy_function(ToyFn::F2, p.x, p.y));
        }
        assert!(out.report.r2 <= 1.0);
    }
}
