use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use iceot_core::building::{self, GeneratedData};
use iceot_core::clock::Clock;
use iceot_core::convexity::{self, ConvexityReport, ToyFn};
use iceot_core::mpc::{self, BenchRow, ClosedLoopResult, Controller, MpcProblem, NeuralSurrogate};
use iceot_core::nn::{Architecture, Model};
use iceot_core::train::{self, CellResult, CellSummary, EpochTelemetry, Scaling, SweepCell};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{num, read_table, Manifest, Output};
use crate::checkpoint::Checkpoint;
use crate::clock::SystemClock;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    FitSurface { function: ToyFn, arch: Architecture },
    GenData,
    SelectFeatures,
    Train,
    StabilitySweep,
    MpcRun,
    BenchSolver,
    VerifyConvexity,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::FitSurface { .. } => "fit-surface",
            Command::GenData => "gen-data",
            Command::SelectFeatures => "select-features",
            Command::Train => "train",
            Command::StabilitySweep => "stability-sweep",
            Command::MpcRun => "mpc-run",
            Command::BenchSolver => "bench-solver",
            Command::VerifyConvexity => "verify-convexity",
        }
    }

    /// Directory under `output_dir` that receives the artifacts.
    pub fn subdir(&self) -> String {
        match self {
            Command::FitSurface { function, arch } => {
                format!("fit-surface/{}-{}", function.label(), arch.label())
            }
            c => c.name().into(),
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Set when the run finished but a run-level failure occurred.
    pub failure: Option<String>,
}

/// Runs one command and writes its manifest. `jobs` bounds the worker
/// threads of the sweep and bench commands.
pub fn execute(command: Command, config: &RunConfig, jobs: usize) -> CliResult<RunOutcome> {
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be ≥ 1".into()));
    }
    let started = SystemTime::now();
    let t0 = Instant::now();
    let dir = config.output_dir.join(command.subdir());
    let mut out = Output::create(&dir)?;
    let failure = match command {
        Command::FitSurface { function, arch } => fit_surface(config, function, arch, &mut out)?,
        Command::GenData => gen_data(config, &mut out)?,
        Command::SelectFeatures => select_features(config, &mut out)?,
        Command::Train => train_surrogates(config, &mut out)?,
        Command::StabilitySweep => stability_sweep(config, jobs, &mut out)?,
        Command::MpcRun => mpc_run(config, &mut out)?,
        Command::BenchSolver => bench_solver(config, jobs, &mut out)?,
        Command::VerifyConvexity => verify_convexity(config, &mut out)?,
    };
    let status = if failure.is_some() { "failed" } else { "ok" };
    let manifest = out.finish(command.name(), config, started, t0.elapsed().as_secs_f64(), status)?;
    Ok(RunOutcome {
        dir,
        manifest,
        failure,
    })
}

pub const TELEMETRY_HEADER: [&str; 5] = ["epoch", "train_loss", "val_loss", "max_grad_norm", "wall_time_s"];

pub fn telemetry_rows(t: &[EpochTelemetry]) -> Vec<Vec<String>> {
    t.iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                num(e.train_loss),
                num(e.validation_loss),
                num(e.max_layer_grad_norm),
                num(e.wall_time_seconds),
            ]
        })
        .collect()
}

type Failure = Option<String>;

fn fit_surface(cfg: &RunConfig, function: ToyFn, arch: Architecture, out: &mut Output) -> CliResult<Failure> {
    let clock = SystemClock::new();
    let fit = convexity::fit_surface(arch, function, &cfg.fit_surface, &clock)?;
    out.write_json("fit_report.json", &fit.report)?;
    let grid: Vec<Vec<String>> = fit
        .grid
        .iter()
        .map(|p| vec![num(p.x), num(p.y), num(p.truth), num(p.pred)])
        .collect();
    out.write_csv("grid.csv", &["x", "y", "true", "pred"], &grid)?;
    out.write_csv("telemetry.csv", &TELEMETRY_HEADER, &telemetry_rows(&fit.telemetry))?;
    Ok(fit.report.failure.clone())
}

fn generate(cfg: &RunConfig, days: usize) -> CliResult<GeneratedData> {
    Ok(building::generate_dataset(
        days,
        &cfg.data.excitation,
        cfg.seed,
        &cfg.data.plant,
    )?)
}

fn gen_data(cfg: &RunConfig, out: &mut Output) -> CliResult<Failure> {
    let data = generate(cfg, cfg.data.days)?;
    let f = &data.features;
    let t = &data.targets;
    let header: Vec<&str> = f.names.iter().chain(&t.names).map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..f.rows())
        .map(|r| f.columns.iter().chain(&t.columns).map(|c| num(c[r])).collect())
        .collect();
    out.write_csv("dataset.csv", &header, &rows)?;
    Ok(None)
}

fn select_features(cfg: &RunConfig, out: &mut Output) -> CliResult<Failure> {
    let (table, targets) = match &cfg.selection.input {
        Some(path) => {
            let (names, cols) = read_table(path)?;
            let mut table = building::FeatureTable::default();
            let mut targets = Vec::new();
            for (n, c) in names.iter().zip(cols) {
                if cfg.selection.targets.contains(n) {
                    targets.push(c);
                } else {
                    table.push(n, c)?;
                }
            }
            if targets.len() != cfg.selection.targets.len() {
                return Err(CliError::Config(format!(
                    "selection.targets {:?} not all present in {}",
                    cfg.selection.targets,
                    path.display()
                )));
            }
            (table, targets)
        }
        None => {
            let d = generate(cfg, cfg.data.days)?;
            (d.features, d.targets.columns)
        }
    };
    let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let sel = building::select_features(&table, &refs, &cfg.selection.config)?;
    out.write_json("selection.json", &sel)?;
    let ranking: Vec<Vec<String>> = sel
        .audit
        .mi_ranking
        .iter()
        .enumerate()
        .map(|(i, s)| vec![(i + 1).to_string(), s.feature.clone(), num(s.mi)])
        .collect();
    out.write_csv("mi_ranking.csv", &["rank", "feature", "mi"], &ranking)?;
    let drops: Vec<Vec<String>> = sel
        .audit
        .pearson_drops
        .iter()
        .map(|d| vec![d.dropped.clone(), d.kept.clone(), num(d.rho), num(d.mi_dropped), num(d.mi_kept)])
        .collect();
    out.write_csv("pearson_drops.csv", &["dropped", "kept", "rho", "mi_dropped", "mi_kept"], &drops)?;
    let selected: Vec<Vec<String>> = sel.selected.iter().map(|s| vec![s.clone()]).collect();
    out.write_csv("selected_features.csv", &["feature"], &selected)?;
    out.write_text("dropped_features.md", &sel.audit.render_dropped())?;
    Ok(None)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub architecture: Architecture,
    pub sequence_length: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: f64,
    pub mean_epoch_time_s: f64,
    pub failure: Option<String>,
}

/// A building surrogate trained from the `surrogate` section.
pub struct TrainedSurrogate {
    pub model: Model,
    pub scaling: Scaling,
    pub telemetry: Vec<EpochTelemetry>,
    pub summary: TrainSummary,
}

pub fn train_surrogate(
    cfg: &RunConfig,
    data: &GeneratedData,
    arch: Architecture,
    clock: &dyn Clock,
) -> CliResult<TrainedSurrogate> {
    let n = cfg.surrogate.sequence_length;
    let (ds, scaling) = mpc::surrogate_data(data, n)?;
    let tc = &cfg.surrogate.train;
    let (tr, va) = ds.split(tc.validation_fraction)?;
    let model = Model::init(cfg.surrogate.spec(arch, n), tc.seed)?;
    let o = train::train(model, &tr, &va, tc, clock)?;
    let summary = TrainSummary {
        architecture: arch,
        sequence_length: n,
        epochs: o.telemetry.len(),
        best_epoch: o.best_epoch,
        best_validation_loss: o.best_validation_loss,
        mean_epoch_time_s: o.mean_epoch_time(),
        failure: o.failure.clone(),
    };
    Ok(TrainedSurrogate {
        model: o.model,
        scaling,
        telemetry: o.telemetry,
        summary,
    })
}

fn write_trained(out: &mut Output, t: &TrainedSurrogate) -> CliResult<()> {
    let label = t.summary.architecture.label();
    let ck = Checkpoint::new(&t.model, Some(&t.scaling));
    out.write_text(&format!("checkpoint_{label}.json"), &(ck.to_json() + "\n"))?;
    out.write_csv(&format!("telemetry_{label}.csv"), &TELEMETRY_HEADER, &telemetry_rows(&t.telemetry))?;
    Ok(())
}

fn train_surrogates(cfg: &RunConfig, out: &mut Output) -> CliResult<Failure> {
    let data = generate(cfg, cfg.data.days)?;
    let clock = SystemClock::new();
    let mut summaries = Vec::new();
    for &arch in &cfg.train.architectures {
        let t = train_surrogate(cfg, &data, arch, &clock)?;
        write_trained(out, &t)?;
        summaries.push(t.summary);
    }
    out.write_json("train_summary.json", &summaries)?;
    Ok(first_failure(summaries.iter().map(|s| (s.architecture, &s.failure))))
}

fn first_failure<'a>(it: impl IntoIterator<Item = (Architecture, &'a Option<String>)>) -> Failure {
    it.into_iter()
        .find_map(|(a, f)| f.as_ref().map(|m| format!("{} training failed: {m}", a.label())))
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))
}

pub fn sweep_telemetry_name(cell: &SweepCell) -> String {
    format!("telemetry_{}_n{}.csv", cell.architecture.label(), cell.sequence_length)
}

/// Runs every sweep cell on `jobs` threads; results come back in cell order.
pub fn run_sweep(cfg: &RunConfig, jobs: usize) -> CliResult<Vec<CellResult>> {
    let data = generate(cfg, cfg.data.days)?;
    let cells = train::sweep_cells(&cfg.sweep.architectures, &cfg.sweep.lengths, cfg.sweep.train.seed);
    let build = |n: usize| mpc::surrogate_data(&data, n).map(|d| d.0);
    let spec = |a: Architecture, n: usize| cfg.surrogate.spec(a, n);
    Ok(pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let clock = SystemClock::new();
                train::run_cell(c, &build, &spec, &cfg.sweep.train, &clock)
                    .unwrap_or_else(|e| train::failed_cell(c, e))
            })
            .collect()
    }))
}

fn stability_sweep(cfg: &RunConfig, jobs: usize, out: &mut Output) -> CliResult<Failure> {
    let results = run_sweep(cfg, jobs)?;
    for r in &results {
        out.write_csv(&sweep_telemetry_name(&r.cell), &TELEMETRY_HEADER, &telemetry_rows(&r.telemetry))?;
    }
    let summary: Vec<&CellSummary> = results.iter().map(|r| &r.summary).collect();
    out.write_json("sweep_summary.json", &summary)?;
    Ok(None)
}

pub const TRAJECTORY_HEADER: [&str; 19] = [
    "step", "clock", "price", "u1", "u2", "u3", "u4", "z1", "z2", "z3", "z4", "z5", "z6", "z7", "z8",
    "energy_kwh", "solver_time_s", "iterations", "objective",
];

pub fn trajectory_rows(r: &ClosedLoopResult) -> Vec<Vec<String>> {
    r.trajectory
        .iter()
        .map(|t| {
            let mut v = vec![t.step.to_string(), t.clock.clone(), num(t.price)];
            v.extend(t.setpoints.iter().map(|&x| num(x)));
            v.extend(t.zone_temps.iter().map(|&x| num(x)));
            v.push(num(t.energy_kwh));
            v.push(num(t.solver_time_s));
            v.push(t.iterations.to_string());
            v.push(num(t.objective));
            v
        })
        .collect()
}

/// Loads the surrogate for `arch` from `checkpoint`, or trains one and
/// writes it out.
fn surrogate_for(
    cfg: &RunConfig,
    arch: Architecture,
    checkpoint: Option<&PathBuf>,
    data: &mut Option<GeneratedData>,
    out: &mut Output,
) -> CliResult<(NeuralSurrogate, Failure)> {
    if let Some(path) = checkpoint {
        let ck = Checkpoint::load(path)?;
        if ck.spec.architecture != arch {
            return Err(CliError::Config(format!(
                "checkpoint {} holds {}, expected {}",
                path.display(),
                ck.spec.architecture.label(),
                arch.label()
            )));
        }
        let scaling = ck
            .scaling
            .clone()
            .ok_or_else(|| CliError::Config(format!("checkpoint {} has no scaling", path.display())))?;
        return Ok((NeuralSurrogate::new(ck.model()?, scaling)?, None));
    }
    if data.is_none() {
        *data = Some(generate(cfg, cfg.data.days)?);
    }
    let t = train_surrogate(cfg, data.as_ref().expect("generated"), arch, &SystemClock::new())?;
    write_trained(out, &t)?;
    let failure = first_failure([(arch, &t.summary.failure)]);
    Ok((NeuralSurrogate::new(t.model, t.scaling)?, failure))
}

#[derive(Clone, Debug, Serialize)]
pub struct MpcSummary {
    pub controller: String,
    pub horizon: usize,
    pub bill_eur: f64,
    pub degree_hours: f64,
    pub fallbacks: usize,
    pub mean_solver_time_s: f64,
    pub baseline_setpoint: f64,
    pub baseline_bill_eur: f64,
    pub baseline_degree_hours: f64,
    pub savings_eur: f64,
}

fn mpc_run(cfg: &RunConfig, out: &mut Output) -> CliResult<Failure> {
    let m = &cfg.mpc;
    let (sur, failure) = surrogate_for(cfg, m.architecture, m.checkpoint.as_ref(), &mut None, out)?;
    let clock = SystemClock::new();
    let plant = &cfg.data.plant;
    let run = mpc::closed_loop_run(&Controller::Mpc(&sur), plant, &m.problem, &m.closed_loop, &clock)?;
    let base = mpc::closed_loop_run(
        &Controller::Fixed(m.baseline_setpoint),
        plant,
        &m.problem,
        &m.closed_loop,
        &clock,
    )?;
    out.write_csv("trajectory_mpc.csv", &TRAJECTORY_HEADER, &trajectory_rows(&run))?;
    out.write_csv("trajectory_baseline.csv", &TRAJECTORY_HEADER, &trajectory_rows(&base))?;
    let s = MpcSummary {
        controller: run.controller.clone(),
        horizon: run.horizon,
        bill_eur: run.bill_eur,
        degree_hours: run.degree_hours,
        fallbacks: run.fallbacks,
        mean_solver_time_s: iceot_core::stats::mean(&run.solver_times),
        baseline_setpoint: m.baseline_setpoint,
        baseline_bill_eur: base.bill_eur,
        baseline_degree_hours: base.degree_hours,
        savings_eur: base.bill_eur - run.bill_eur,
    };
    out.write_json("mpc_summary.json", &s)?;
    Ok(failure)
}

pub const BENCH_HEADER: [&str; 6] = ["model", "horizon", "mean_time_s", "std_time_s", "bill_eur", "degree_hours"];

pub fn bench_rows(rows: &[BenchRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.horizon.to_string(),
                num(r.mean_time_s),
                num(r.std_time_s),
                num(r.bill_eur),
                num(r.degree_hours),
            ]
        })
        .collect()
}

fn bench_problem(cfg: &RunConfig) -> MpcProblem {
    let mut p = cfg.mpc.problem.clone();
    if let Some(k) = cfg.bench.max_iterations {
        p.solver.max_iterations = k;
    }
    p
}

fn bench_solver(cfg: &RunConfig, jobs: usize, out: &mut Output) -> CliResult<Failure> {
    let b = &cfg.bench;
    let mut data = None;
    let mut failure = None;
    let mut models = Vec::new();
    for &arch in &b.architectures {
        let (s, f) = surrogate_for(cfg, arch, b.checkpoints.get(arch.label()), &mut data, out)?;
        failure = failure.or(f);
        models.push(s);
    }
    let problem = bench_problem(cfg);
    let cells: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| b.horizons.iter().map(move |&n| (m, n)))
        .collect();
    let rows: Vec<BenchRow> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(m, n)| {
                let p = MpcProblem {
                    horizon: n,
                    ..problem.clone()
                };
                let clock = SystemClock::new();
                mpc::closed_loop_run(&Controller::Mpc(&models[m]), &cfg.data.plant, &p, &b.closed_loop, &clock)
                    .map(|r| mpc::bench_row(&r))
            })
            .collect::<iceot_core::Result<_>>()
    })?;
    out.write_csv("bench.csv", &BENCH_HEADER, &bench_rows(&rows))?;
    Ok(failure)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvexityRow {
    pub input_convex_by_construction: bool,
    pub training_failure: Option<String>,
    #[serde(flatten)]
    pub report: ConvexityReport,
}

/// Trains each architecture on building windows and probes its midpoint
/// convexity over the unit box of scaled inputs.
pub fn convexity_suite(cfg: &RunConfig) -> CliResult<Vec<ConvexityRow>> {
    let c = &cfg.convexity;
    let data = generate(cfg, c.days)?;
    let (ds, _) = mpc::surrogate_data(&data, c.sequence_length)?;
    let (tr, va) = ds.split(c.train.validation_fraction)?;
    let clock = SystemClock::new();
    let mut rows = Vec::new();
    for &arch in &c.architectures {
        let spec = cfg.surrogate.spec(arch, c.sequence_length);
        let o = train::train(Model::init(spec, c.train.seed)?, &tr, &va, &c.train, &clock)?;
        let f = convexity::sequence_fn(&o.model);
        let dim = c.sequence_length * building::MODEL_INPUTS;
        let report = convexity::midpoint_convexity_check(arch.label(), &f, dim, c.probes, cfg.seed, (0.0, 1.0))?;
        rows.push(ConvexityRow {
            input_convex_by_construction: arch.input_convex(),
            training_failure: o.failure.clone(),
            report,
        });
    }
    Ok(rows)
}

fn verify_convexity(cfg: &RunConfig, out: &mut Output) -> CliResult<Failure> {
    let rows = convexity_suite(cfg)?;
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.report.architecture.clone(),
                r.input_convex_by_construction.to_string(),
                r.report.probes.to_string(),
                r.report.violations.to_string(),
                num(r.report.max_violation_magnitude),
                r.report.seed.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "convexity.csv",
        &["architecture", "input_convex", "probes", "violations", "max_violation_magnitude", "seed"],
        &csv,
    )?;
    out.write_json("convexity.json", &rows)?;
    Ok(None)
}
