//! Experiment drivers: datasets, initial ensembles, the scaling sweeps and
//! flow diagnostics, each returning CSV tables plus pass/fail verdicts.

mod config;

pub use config::{
    DataConfig, ExperimentConfig, ExperimentKind, GridConfig, InitConfig, InitKind, LabelModel, ModelConfig, Sweep,
    ToleranceConfig, TrainConfig, SCHEMA_VERSION,
};

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::activation::{verify_assumptions, ActivationSpec, AssumptionReport, ProbeBox};
use crate::dataset::{AffineReadout, Dataset};
use crate::discrete::{self, step_count, LossCurve, ParamTensor};
use crate::error::{Error, Result};
use crate::linalg::{norm, rel_max_err};
use crate::measures::{self, EmpiricalMeasure};
use crate::odeflow::{
    dissipation_rate, forward_ode, meanfield_flow_step, FlowState, MomentRecord, ParamPathEnsemble, TrajectoryCache,
};

const STREAM_DATA: u64 = 1;
const STREAM_TEACHER: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_INSTANCE: u64 = 4;

/// A `u64` seed for an independent ChaCha stream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// `g(z) = (1/√d) Σ z_i`.
pub fn default_readout(d: usize) -> AffineReadout {
    AffineReadout::new(vec![1.0 / (d as f64).sqrt(); d], 0.0).expect("nonzero weights")
}

/// Depth-constant Gaussian teacher paths of the given scale.
pub fn teacher_ensemble(
    spec: &ActivationSpec,
    width: usize,
    scale: f64,
    nodes: usize,
    seed: u64,
) -> Result<ParamPathEnsemble> {
    measures::init_gaussian_paths(width, spec.k(), scale, 0.0, nodes, derive_seed(seed, STREAM_TEACHER))
}

/// Inputs uniform in the ball of radius `R_mu`; labels from a random
/// teacher network (integrated on `nodes` depth nodes) or a smooth function.
pub fn make_dataset(spec: &ActivationSpec, data: &DataConfig, nodes: usize, seed: u64) -> Result<Dataset> {
    let d = spec.d();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DATA));
    let mut xs = Vec::with_capacity(data.n * d);
    for _ in 0..data.n {
        let g: Vec<f64> = loop {
            let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if norm(&g) > 1e-12 {
                break g;
            }
        };
        let r = data.r_mu * rng.random::<f64>().powf(1.0 / d as f64);
        let mut x: Vec<f64> = g.iter().map(|v| v * r / norm(&g)).collect();
        let nx = norm(&x);
        if nx > data.r_mu {
            x.iter_mut().for_each(|v| *v *= data.r_mu / nx * (1.0 - f64::EPSILON));
        }
        xs.extend(x);
    }
    let readout = default_readout(d);
    let labels = match data.labels {
        LabelModel::TeacherNet => {
            let teacher = teacher_ensemble(spec, data.teacher_width, data.teacher_scale, nodes, seed)?;
            xs.chunks(d)
                .map(|x| Ok(readout.eval(forward_ode(&teacher, spec, x)?.output())))
                .collect::<Result<Vec<f64>>>()?
        }
        LabelModel::SmoothFunction => xs
            .chunks(d)
            .map(|x| {
                let u: f64 = x.iter().sum::<f64>() / (d as f64).sqrt();
                0.5 * (std::f64::consts::PI * u).sin() + 0.25 * x.iter().map(|v| v * v).sum::<f64>()
            })
            .collect(),
    };
    Dataset::new(d, xs, labels, readout, data.r_mu)
}

/// Initial particle paths per the `init` block.
pub fn init_ensemble(
    spec: &ActivationSpec,
    init: &InitConfig,
    width: usize,
    nodes: usize,
    seed: u64,
) -> Result<ParamPathEnsemble> {
    let seed = derive_seed(seed, STREAM_INIT);
    match init.kind {
        InitKind::Gaussian => {
            measures::init_gaussian_paths(width, spec.k(), init.scale, init.depth_variation, nodes, seed)
        }
        InitKind::Sphere => measures::init_separating_sphere(width, spec.k(), init.r0, nodes, seed),
        InitKind::Slab => measures::init_separating_slab(width, spec.k(), spec.k1(), init.theta2_box, nodes, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("log-log fit needs at least two distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(SlopeFit { slope, intercept, r2 })
}

/// Points used for slope fits: the smallest grid value is dropped once the
/// grid has at least four points.
pub fn fit_window(xs: &[f64], ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let skip = usize::from(xs.len() >= 4);
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().skip(skip).unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(id: &str, passed: bool, detail: String) -> Self {
        Self { id: id.to_string(), passed, detail }
    }
}

fn slope_verdict(id: &str, fit: &Result<SlopeFit>, tol: &ToleranceConfig, need_r2: bool) -> Verdict {
    match fit {
        Ok(f) => {
            let in_range = f.slope >= tol.slope_min && f.slope <= tol.slope_max;
            let r2_ok = !need_r2 || f.r2 >= tol.r2_min;
            Verdict::new(
                id,
                in_range && r2_ok,
                format!("slope {:.4} (range [{}, {}]), r2 {:.4}", f.slope, tol.slope_min, tol.slope_max, f.r2),
            )
        }
        Err(e) => Verdict::new(id, false, format!("fit undefined: {e}")),
    }
}

/// A CSV artifact: file name plus body with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub file_name: String,
    pub body: String,
}

fn csv_table<T: Serialize>(file_name: &str, rows: &[T], header: &[&str]) -> CsvTable {
    let mut w =
        csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    CsvTable {
        file_name: file_name.to_string(),
        body: String::from_utf8(w.into_inner().expect("flush")).expect("utf8"),
    }
}

// ---------------------------------------------------------------- consistency

/// One training run at one grid point and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub param_name: String,
    pub param_value: usize,
    pub seed: u64,
    pub s: f64,
    pub loss_discrete: f64,
    /// Continuous-path flow (depth sweep) or the large-width reference (width sweep).
    pub loss_continuous: f64,
    pub gap: f64,
    pub walltime_s: f64,
}

pub const SCALING_HEADER: [&str; 8] =
    ["param_name", "param_value", "seed", "s", "loss_discrete", "loss_continuous", "gap", "walltime_s"];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub param_name: String,
    pub param_value: usize,
    pub replicates: usize,
    pub mean_gap: f64,
    pub mean_loss_discrete: f64,
    pub std_loss_discrete: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub sweep: Sweep,
    pub table: ScalingTable,
    pub summary: Vec<GridSummary>,
    /// Fit of mean gap (depth) or loss std (width) against the grid value.
    pub fit: Option<SlopeFit>,
    pub fit_error: Option<String>,
    /// Loss of the `M_ref = 4 max M` run (width sweep only).
    pub reference_loss: Option<f64>,
    pub reference_width: Option<usize>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn run_discrete(
    params: &ParamTensor,
    spec: &ActivationSpec,
    data: &Dataset,
    train: &TrainConfig,
) -> Result<(f64, f64)> {
    let steps = step_count(train.s_total, train.h_s)?;
    let curve = discrete::train(params, spec, data, train.s_total, train.h_s, steps.max(1))?;
    let last = curve.last().expect("curve has endpoints");
    Ok((last.s, last.loss))
}

/// Runs the particle flow for the configured budget, returning the final state.
fn run_flow(ens: ParamPathEnsemble, spec: &ActivationSpec, data: &Dataset, train: &TrainConfig) -> Result<FlowState> {
    let steps = step_count(train.s_total, train.h_s)?;
    let mut state = FlowState::new(ens, spec, data)?.with_moment_ceiling(train.moment_ceiling);
    for _ in 0..steps {
        state = meanfield_flow_step(state, spec, data, train.h_s)?;
    }
    Ok(state)
}

fn summarize(name: &str, rows: &[ScalingRow], values: &[usize]) -> Vec<GridSummary> {
    values
        .iter()
        .map(|&v| {
            let at: Vec<&ScalingRow> = rows.iter().filter(|r| r.param_value == v).collect();
            let gaps: Vec<f64> = at.iter().map(|r| r.gap).collect();
            let losses: Vec<f64> = at.iter().map(|r| r.loss_discrete).collect();
            GridSummary {
                param_name: name.to_string(),
                param_value: v,
                replicates: at.len(),
                mean_gap: mean(&gaps),
                mean_loss_discrete: mean(&losses),
                std_loss_discrete: sample_std(&losses),
            }
        })
        .collect()
}

/// Depth sweep: discrete GD from `θ_{l,m}(0) = θ_m(0; l/L)` against the
/// continuous-path particle flow, gap at `s = S` per `L` and seed.
/// Width sweep: spread of the trained discrete loss over seeds per `M`.
pub fn experiment_consistency(cfg: &ExperimentConfig) -> Result<ConsistencyReport> {
    let spec = cfg.activation()?;
    let data = make_dataset(&spec, &cfg.data, cfg.grid.nodes, cfg.seed)?;
    let seeds: Vec<u64> = (0..cfg.replicates as u64).map(|r| cfg.seed + r).collect();
    match cfg.grid.sweep {
        Sweep::Depth => {
            let width = cfg.grid.widths[0];
            let per_seed = seeds
                .par_iter()
                .map(|&seed| {
                    let ens = init_ensemble(&spec, &cfg.init, width, cfg.grid.nodes, seed)?;
                    let continuous = run_flow(ens.clone(), &spec, &data, &cfg.train)?.loss();
                    cfg.grid
                        .depths
                        .par_iter()
                        .map(|&depth| {
                            let started = Instant::now();
                            let (s, loss_discrete) =
                                run_discrete(&ens.sample_layers(depth)?, &spec, &data, &cfg.train)?;
                            Ok(ScalingRow {
                                param_name: "L".into(),
                                param_value: depth,
                                seed,
                                s,
                                loss_discrete,
                                loss_continuous: continuous,
                                gap: (loss_discrete - continuous).abs(),
                                walltime_s: started.elapsed().as_secs_f64(),
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rows: Vec<ScalingRow> = per_seed.into_iter().flatten().collect();
            rows.sort_by_key(|a| (a.param_value, a.seed));
            let summary = summarize("L", &rows, &cfg.grid.depths);
            let xs: Vec<f64> = summary.iter().map(|g| g.param_value as f64).collect();
            let ys: Vec<f64> = summary.iter().map(|g| g.mean_gap).collect();
            let (wx, wy) = fit_window(&xs, &ys);
            let fit = fit_loglog_slope(&wx, &wy);
            Ok(ConsistencyReport {
                sweep: Sweep::Depth,
                table: ScalingTable { rows },
                summary,
                fit_error: fit.as_ref().err().map(|e| e.to_string()),
                fit: fit.ok(),
                reference_loss: None,
                reference_width: None,
            })
        }
        Sweep::Width => {
            let depth = cfg.grid.depths[0];
            let reference_width = 4 * cfg.grid.widths.iter().max().expect("nonempty");
            let reference = {
                let ens = init_ensemble(&spec, &cfg.init, reference_width, cfg.grid.nodes, cfg.seed)?;
                run_discrete(&ens.sample_layers(depth)?, &spec, &data, &cfg.train)?.1
            };
            let jobs: Vec<(usize, u64)> =
                cfg.grid.widths.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
            let mut rows = jobs
                .par_iter()
                .map(|&(width, seed)| {
                    let started = Instant::now();
                    let ens = init_ensemble(&spec, &cfg.init, width, cfg.grid.nodes, seed)?;
                    let (s, loss_discrete) = run_discrete(&ens.sample_layers(depth)?, &spec, &data, &cfg.train)?;
                    Ok(ScalingRow {
                        param_name: "M".into(),
                        param_value: width,
                        seed,
                        s,
                        loss_discrete,
                        loss_continuous: reference,
                        gap: (loss_discrete - reference).abs(),
                        walltime_s: started.elapsed().as_secs_f64(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.sort_by_key(|a| (a.param_value, a.seed));
            let summary = summarize("M", &rows, &cfg.grid.widths);
            let xs: Vec<f64> = summary.iter().map(|g| g.param_value as f64).collect();
            let ys: Vec<f64> = summary.iter().map(|g| g.std_loss_discrete).collect();
            let (wx, wy) = fit_window(&xs, &ys);
            let fit = fit_loglog_slope(&wx, &wy);
            Ok(ConsistencyReport {
                sweep: Sweep::Width,
                table: ScalingTable { rows },
                summary,
                fit_error: fit.as_ref().err().map(|e| e.to_string()),
                fit: fit.ok(),
                reference_loss: Some(reference),
                reference_width: Some(reference_width),
            })
        }
    }
}

impl ConsistencyReport {
    pub fn verdicts(&self, tol: &ToleranceConfig) -> Vec<Verdict> {
        let fit = match (&self.fit, &self.fit_error) {
            (Some(f), _) => Ok(*f),
            (None, e) => Err(Error::InvalidArgument(e.clone().unwrap_or_default())),
        };
        match self.sweep {
            Sweep::Depth => vec![slope_verdict("depth_gap_slope", &fit, tol, true)],
            Sweep::Width => vec![slope_verdict("width_std_slope", &fit, tol, false)],
        }
    }

    pub fn tables(&self) -> Vec<CsvTable> {
        vec![
            csv_table("consistency.csv", &self.table.rows, &SCALING_HEADER),
            csv_table(
                "consistency_summary.csv",
                &self.summary,
                &["param_name", "param_value", "replicates", "mean_gap", "mean_loss_discrete", "std_loss_discrete"],
            ),
        ]
    }
}

// ------------------------------------------------------------------ zero loss

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowRecord {
    pub step: usize,
    pub s: f64,
    pub loss: f64,
    pub dissipation: f64,
    pub max_second_moment: f64,
    pub support_radius_theta1: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZeroLossReport {
    pub activation: String,
    pub curve: LossCurve,
    pub records: Vec<FlowRecord>,
    pub steps_taken: usize,
    pub final_loss: f64,
    /// First recorded `s` with loss below the threshold.
    pub threshold_reached_at: Option<f64>,
    /// Moment or radius ceiling breach.
    pub falsification: Option<String>,
    /// Largest increase of `E` between consecutive recorded points.
    pub max_loss_increase: f64,
    pub loss_threshold: f64,
}

fn flow_record(state: &mut FlowState, step: usize, k1: usize) -> FlowRecord {
    state.record_diagnostics(k1);
    let m: MomentRecord = *state.diagnostics().last().expect("just recorded");
    FlowRecord {
        step,
        s: m.s,
        loss: m.loss,
        dissipation: dissipation_rate(state),
        max_second_moment: m.max_second_moment,
        support_radius_theta1: m.support_radius_theta1,
        min_radius: m.min_radius,
        max_radius: m.max_radius,
    }
}

/// Particle flow from the configured (separating) initializer, recording
/// loss, dissipation, moments and support radii; stops once the loss drops
/// below the threshold or the budget is spent.
pub fn experiment_zeroloss(cfg: &ExperimentConfig) -> Result<ZeroLossReport> {
    let spec = cfg.activation()?;
    let data = make_dataset(&spec, &cfg.data, cfg.grid.nodes, cfg.seed)?;
    let ens = init_ensemble(&spec, &cfg.init, cfg.grid.widths[0], cfg.grid.nodes, cfg.seed)?;
    zeroloss_from(ens, &spec, &data, cfg)
}

/// [`experiment_zeroloss`] from a given ensemble and dataset.
pub fn zeroloss_from(
    ens: ParamPathEnsemble,
    spec: &ActivationSpec,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<ZeroLossReport> {
    let steps = step_count(cfg.train.s_total, cfg.train.h_s)?;
    let threshold = cfg.tolerance.loss_threshold;
    let mut state = FlowState::new(ens, spec, data)?.with_moment_ceiling(cfg.train.moment_ceiling);
    let mut records = vec![flow_record(&mut state, 0, spec.k1())];
    let mut falsification = None;
    let mut taken = 0;
    let mut last_loss = state.loss();
    let mut max_increase = f64::NEG_INFINITY;
    while taken < steps && state.loss() >= threshold {
        match meanfield_flow_step(state.clone(), spec, data, cfg.train.h_s) {
            Ok(next) => state = next,
            Err(Error::MomentCeiling { moment, ceiling, s }) => {
                falsification = Some(format!("second moment {moment:.3e} exceeded ceiling {ceiling:.3e} at s = {s}"));
                break;
            }
            Err(e) => return Err(e),
        }
        taken += 1;
        if taken % cfg.train.record_every == 0 || taken == steps || state.loss() < threshold {
            let rec = flow_record(&mut state, taken, spec.k1());
            max_increase = max_increase.max(rec.loss - last_loss);
            last_loss = rec.loss;
            if rec.max_radius > cfg.train.radius_ceiling {
                falsification = Some(format!(
                    "particle radius {:.3e} exceeded ceiling {:.3e} at s = {}",
                    rec.max_radius, cfg.train.radius_ceiling, rec.s
                ));
                records.push(rec);
                break;
            }
            records.push(rec);
        }
    }
    let mut curve = LossCurve::default();
    for r in &records {
        curve.push(r.s, r.loss);
    }
    Ok(ZeroLossReport {
        activation: spec.name().to_string(),
        threshold_reached_at: records.iter().find(|r| r.loss < threshold).map(|r| r.s),
        final_loss: records.last().expect("initial record").loss,
        curve,
        records,
        steps_taken: taken,
        falsification,
        max_loss_increase: if max_increase.is_finite() { max_increase } else { 0.0 },
        loss_threshold: threshold,
    })
}

impl ZeroLossReport {
    pub fn verdicts(&self) -> Vec<Verdict> {
        vec![
            Verdict::new(
                "zero_loss",
                self.final_loss < self.loss_threshold,
                format!(
                    "final loss {:.3e} after {} steps (threshold {:.1e})",
                    self.final_loss, self.steps_taken, self.loss_threshold
                ),
            ),
            Verdict::new(
                "moments_bounded",
                self.falsification.is_none(),
                self.falsification.clone().unwrap_or_else(|| "no ceiling breach".into()),
            ),
        ]
    }

    pub fn tables(&self) -> Vec<CsvTable> {
        vec![csv_table(
            "zeroloss.csv",
            &self.records,
            &[
                "step",
                "s",
                "loss",
                "dissipation",
                "max_second_moment",
                "support_radius_theta1",
                "min_radius",
                "max_radius",
            ],
        )]
    }
}

// ---------------------------------------------------------------- dissipation

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DissipationRow {
    pub h_s: f64,
    pub step: usize,
    pub s: f64,
    pub loss: f64,
    pub loss_next: f64,
    pub dissipation: f64,
    pub residual: f64,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DissipationReport {
    pub rows: Vec<DissipationRow>,
    /// Max relative residual at `h_s` and at `h_s / 2`.
    pub max_relative: f64,
    pub max_relative_half: f64,
    pub shrink: f64,
}

/// Residual `|ΔE/Δs + D(s)|` per Euler step over `[0, S]` at `h_s` and `h_s/2`.
pub fn experiment_dissipation(cfg: &ExperimentConfig) -> Result<DissipationReport> {
    let spec = cfg.activation()?;
    let data = make_dataset(&spec, &cfg.data, cfg.grid.nodes, cfg.seed)?;
    let ens = init_ensemble(&spec, &cfg.init, cfg.grid.widths[0], cfg.grid.nodes, cfg.seed)?;
    dissipation_from(ens, &spec, &data, &cfg.train)
}

pub fn dissipation_from(
    ens: ParamPathEnsemble,
    spec: &ActivationSpec,
    data: &Dataset,
    train: &TrainConfig,
) -> Result<DissipationReport> {
    let mut rows = Vec::new();
    let mut maxima = [0.0f64; 2];
    for (slot, h) in [train.h_s, 0.5 * train.h_s].into_iter().enumerate() {
        let steps = step_count(train.s_total, h)?.max(1);
        let mut state = FlowState::new(ens.clone(), spec, data)?.with_moment_ceiling(train.moment_ceiling);
        for step in 0..steps {
            let d = dissipation_rate(&state);
            let (s, loss) = (state.s(), state.loss());
            state = meanfield_flow_step(state, spec, data, h)?;
            let residual = ((state.loss() - loss) / h + d).abs();
            let relative = residual / d.max(1e-8);
            maxima[slot] = maxima[slot].max(relative);
            rows.push(DissipationRow {
                h_s: h,
                step,
                s,
                loss,
                loss_next: state.loss(),
                dissipation: d,
                residual,
                relative_residual: relative,
            });
        }
    }
    let shrink = if maxima[1] == 0.0 { f64::INFINITY } else { maxima[0] / maxima[1] };
    Ok(DissipationReport { rows, max_relative: maxima[0], max_relative_half: maxima[1], shrink })
}

impl DissipationReport {
    pub fn verdicts(&self, tol: &ToleranceConfig) -> Vec<Verdict> {
        vec![
            Verdict::new(
                "dissipation_residual",
                self.max_relative <= tol.residual_rel,
                format!("max relative residual {:.3e} (limit {})", self.max_relative, tol.residual_rel),
            ),
            Verdict::new(
                "dissipation_order",
                self.shrink >= tol.shrink_min,
                format!("residual shrink {:.3} when h_s halves (min {})", self.shrink, tol.shrink_min),
            ),
        ]
    }

    pub fn tables(&self) -> Vec<CsvTable> {
        vec![csv_table(
            "dissipation.csv",
            &self.rows,
            &["h_s", "step", "s", "loss", "loss_next", "dissipation", "residual", "relative_residual"],
        )]
    }
}

// -------------------------------------------------------------- adjoint limit

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdjointRow {
    pub depth: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjointLimitReport {
    pub rows: Vec<AdjointRow>,
    pub fit: Option<SlopeFit>,
    pub fit_error: Option<String>,
}

/// Max over samples and layers of `|p_l − p((l+1)/L)|`, the discrete costate
/// against the continuous one on a grid that contains every `(l+1)/L`.
pub fn experiment_adjoint_limit(cfg: &ExperimentConfig) -> Result<AdjointLimitReport> {
    let spec = cfg.activation()?;
    let data = make_dataset(&spec, &cfg.data, cfg.grid.nodes, cfg.seed)?;
    let ens = init_ensemble(&spec, &cfg.init, cfg.grid.widths[0], cfg.grid.nodes, cfg.seed)?;
    adjoint_limit_from(&ens, &spec, &data, &cfg.grid.depths)
}

pub fn adjoint_limit_from(
    ens: &ParamPathEnsemble,
    spec: &ActivationSpec,
    data: &Dataset,
    depths: &[usize],
) -> Result<AdjointLimitReport> {
    let cache = TrajectoryCache::build(ens, spec, data)?;
    let intervals = ens.nodes() - 1;
    let rows = depths
        .par_iter()
        .map(|&depth| {
            if !intervals.is_multiple_of(depth) {
                return Err(Error::GridMismatch(format!("Nt − 1 = {intervals} is not a multiple of L = {depth}")));
            }
            let ratio = intervals / depth;
            let params = ens.sample_layers(depth)?;
            let mut max_error = 0.0f64;
            for (i, cont) in cache.trajectories().iter().enumerate() {
                let disc = discrete::adjoint(&params, spec, data.sample(i), data.label(i), data.readout())?;
                for l in 0..depth {
                    let pd = disc.costate(l).expect("costates filled");
                    let pc = cont.p((l + 1) * ratio).expect("costates filled");
                    for (a, b) in pd.iter().zip(pc) {
                        max_error = max_error.max((a - b).abs());
                    }
                }
            }
            Ok(AdjointRow { depth, max_error })
        })
        .collect::<Result<Vec<_>>>()?;
    let (fit, fit_error) = if rows.iter().all(|r| r.max_error == 0.0) {
        (None, None)
    } else {
        let xs: Vec<f64> = rows.iter().map(|r| r.depth as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.max_error).collect();
        let (wx, wy) = fit_window(&xs, &ys);
        match fit_loglog_slope(&wx, &wy) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(AdjointLimitReport { rows, fit, fit_error })
}

impl AdjointLimitReport {
    pub fn verdicts(&self, tol: &ToleranceConfig) -> Vec<Verdict> {
        if self.fit.is_none() && self.fit_error.is_none() {
            return vec![Verdict::new("adjoint_slope", true, "discrete and continuous costates agree exactly".into())];
        }
        let fit = self.fit.ok_or_else(|| Error::InvalidArgument(self.fit_error.clone().unwrap_or_default()));
        vec![slope_verdict("adjoint_slope", &fit, tol, false)]
    }

    pub fn tables(&self) -> Vec<CsvTable> {
        vec![csv_table("adjoint_limit.csv", &self.rows, &["depth", "max_error"])]
    }
}

// ----------------------------------------------------------------- grad check

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub instance: usize,
    pub seed: u64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub activation: String,
    pub rows: Vec<GradCheckRow>,
    pub max_relative_error: f64,
}

/// Central differences of the discrete loss in every parameter entry.
pub fn fd_gradient(params: &ParamTensor, spec: &ActivationSpec, data: &Dataset) -> Result<Vec<f64>> {
    (0..params.as_slice().len())
        .into_par_iter()
        .map(|i| {
            let v = params.as_slice()[i];
            let h = crate::activation::fd_step(v);
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus.as_mut_slice()[i] = v + h;
            minus.as_mut_slice()[i] = v - h;
            let width = plus.as_slice()[i] - minus.as_slice()[i];
            Ok((discrete::loss(&plus, spec, data)? - discrete::loss(&minus, spec, data)?) / width)
        })
        .collect()
}

/// Analytic discrete gradient against central differences on random
/// instances of shape `(depths[0], widths[0])`.
pub fn grad_check_with(spec: &ActivationSpec, cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    let (depth, width) = (cfg.grid.depths[0], cfg.grid.widths[0]);
    let rows = (0..cfg.tolerance.instances)
        .map(|instance| {
            let seed = derive_seed(cfg.seed, STREAM_INSTANCE + ((instance as u64) << 8));
            let data = make_dataset(spec, &cfg.data, cfg.grid.nodes, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..depth * width * spec.k()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let params = ParamTensor::from_vec(depth, width, spec.k(), values)?;
            let analytic = discrete::gradient(&params, spec, &data)?;
            let reference = fd_gradient(&params, spec, &data)?;
            Ok(GradCheckRow { instance, seed, relative_error: rel_max_err(analytic.as_slice(), &reference) })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_relative_error = rows.iter().map(|r| r.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport { activation: spec.name().to_string(), rows, max_relative_error })
}

pub fn experiment_grad_check(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    grad_check_with(&cfg.activation()?, cfg)
}

impl GradCheckReport {
    pub fn verdicts(&self, tol: &ToleranceConfig) -> Vec<Verdict> {
        vec![Verdict::new(
            "gradient_oracle",
            self.max_relative_error <= tol.grad_rel,
            format!(
                "max relative error {:.3e} over {} instances (limit {:.1e})",
                self.max_relative_error,
                self.rows.len(),
                tol.grad_rel
            ),
        )]
    }

    pub fn tables(&self) -> Vec<CsvTable> {
        vec![csv_table("grad_check.csv", &self.rows, &["instance", "seed", "relative_error"])]
    }
}

// ------------------------------------------------------------------- w2 check

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct W2Row {
    pub instance: usize,
    pub n: usize,
    pub k: usize,
    pub w2: f64,
    pub w2_bruteforce: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct W2CheckReport {
    pub rows: Vec<W2Row>,
    pub max_abs_diff: f64,
}

/// Hungarian W2 against exhaustive permutations on random instances, a
/// fraction of them with repeated points.
pub fn experiment_w2_check(cfg: &ExperimentConfig) -> Result<W2CheckReport> {
    let t = &cfg.tolerance;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INSTANCE));
    let mut rows = Vec::with_capacity(t.instances);
    for instance in 0..t.instances {
        let n = rng.random_range(1..=t.max_n);
        let k = rng.random_range(1..=t.max_k);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n * k).map(|_| rng.random_range(-1.0..=1.0)).collect() };
        let pa = draw(&mut rng);
        let mut pb = draw(&mut rng);
        if n > 1 && rng.random_bool(0.25) {
            let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
            let row = pb[src * k..(src + 1) * k].to_vec();
            pb[dst * k..(dst + 1) * k].copy_from_slice(&row);
        }
        let (a, b) = (EmpiricalMeasure::new(k, pa)?, EmpiricalMeasure::new(k, pb)?);
        let fast = measures::w2(&a, &b)?;
        let slow = measures::w2_bruteforce(&a, &b)?;
        rows.push(W2Row { instance, n, k, w2: fast, w2_bruteforce: slow, abs_diff: (fast - slow).abs() });
    }
    let max_abs_diff = rows.iter().map(|r| r.abs_diff).fold(0.0, f64::max);
    Ok(W2CheckReport { rows, max_abs_diff })
}

impl W2CheckReport {
    pub fn verdicts(&self, tol: &ToleranceConfig) -> Vec<Verdict> {
        vec![Verdict::new(
            "w2_oracle",
            self.max_abs_diff <= tol.w2_abs,
            format!("max |hungarian − brute force| {:.3e} over {} instances", self.max_abs_diff, self.rows.len()),
        )]
    }

    pub fn tables(&self) -> Vec<CsvTable> {
        vec![csv_table("w2_check.csv", &self.rows, &["instance", "n", "k", "w2", "w2_bruteforce", "abs_diff"])]
    }
}

// ---------------------------------------------------------------- assumptions

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionsReport {
    pub reports: Vec<AssumptionReport>,
}

pub fn experiment_assumptions(cfg: &ExperimentConfig) -> Result<AssumptionsReport> {
    let mut model = cfg.model.clone();
    let reports = cfg
        .model
        .probe_activations
        .iter()
        .map(|name| {
            model.activation = name.clone();
            let spec = ExperimentConfig { model: model.clone(), ..cfg.clone() }.activation()?;
            Ok(verify_assumptions(&spec, cfg.tolerance.probes, cfg.seed, ProbeBox::default()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AssumptionsReport { reports })
}

impl AssumptionsReport {
    pub fn verdicts(&self, tol: &ToleranceConfig) -> Vec<Verdict> {
        let mut out = Vec::new();
        for r in &self.reports {
            if let Some(h) = r.homogeneity_violation {
                out.push(Verdict::new(
                    &format!("homogeneity:{}", r.activation),
                    h <= tol.homogeneity_rel,
                    format!("max violation {h:.3e} over {} probes", r.probes),
                ));
            }
            let jac = r.jac_z_error.max(r.jac_theta_error);
            out.push(Verdict::new(
                &format!("jacobian:{}", r.activation),
                jac <= tol.jacobian_rel,
                format!("max Jacobian vs finite-difference error {jac:.3e}"),
            ));
        }
        out
    }

    pub fn tables(&self) -> Vec<CsvTable> {
        vec![csv_table(
            "assumptions.csv",
            &self.reports,
            &[
                "activation",
                "probes",
                "homogeneity_violation",
                "jac_z_error",
                "jac_theta_error",
                "growth_constant",
                "jac_z_growth",
                "jac_theta_growth",
            ],
        )]
    }
}

// ------------------------------------------------------------------ dispatch

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportBody {
    Consistency(ConsistencyReport),
    Zeroloss(ZeroLossReport),
    Dissipation(DissipationReport),
    AdjointLimit(AdjointLimitReport),
    GradCheck(GradCheckReport),
    W2Check(W2CheckReport),
    Assumptions(AssumptionsReport),
}

/// Everything one experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config_hash: String,
    pub verdicts: Vec<Verdict>,
    pub tables: Vec<CsvTable>,
    pub body: ReportBody,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let tol = &cfg.tolerance;
    let (verdicts, tables, body) = match cfg.experiment {
        ExperimentKind::Consistency => {
            let r = experiment_consistency(cfg)?;
            (r.verdicts(tol), r.tables(), ReportBody::Consistency(r))
        }
        ExperimentKind::Zeroloss => {
            let r = experiment_zeroloss(cfg)?;
            (r.verdicts(), r.tables(), ReportBody::Zeroloss(r))
        }
        ExperimentKind::Dissipation => {
            let r = experiment_dissipation(cfg)?;
            (r.verdicts(tol), r.tables(), ReportBody::Dissipation(r))
        }
        ExperimentKind::AdjointLimit => {
            let r = experiment_adjoint_limit(cfg)?;
            (r.verdicts(tol), r.tables(), ReportBody::AdjointLimit(r))
        }
        ExperimentKind::GradCheck => {
            let r = experiment_grad_check(cfg)?;
            (r.verdicts(tol), r.tables(), ReportBody::GradCheck(r))
        }
        ExperimentKind::W2Check => {
            let r = experiment_w2_check(cfg)?;
            (r.verdicts(tol), r.tables(), ReportBody::W2Check(r))
        }
        ExperimentKind::Assumptions => {
            let r = experiment_assumptions(cfg)?;
            (r.verdicts(tol), r.tables(), ReportBody::Assumptions(r))
        }
    };
    Ok(ExperimentOutput { config_hash: cfg.hash(), verdicts, tables, body })
}
