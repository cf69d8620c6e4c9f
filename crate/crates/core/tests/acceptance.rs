//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always print.

use std::sync::Arc;
use std::time::{Duration, Instant};

use mfrl::activation::{make_linear, verify_assumptions, Activation, ProbeBox};
use mfrl::harness::{
    dissipation_from, experiment_adjoint_limit, experiment_consistency, experiment_w2_check, experiment_zeroloss,
    grad_check_with, init_ensemble, make_dataset, ExperimentConfig, ExperimentKind, InitKind, Sweep,
};
use mfrl::odeflow::{forward_ode, ParamPathEnsemble};
use mfrl::{ActivationSpec, HomogeneityClass};

const GRAD_REL_TOL: f64 = 1e-6;
const HOMOGENEITY_TOL: f64 = 1e-12;
const HOMOGENEITY_PROBES: usize = 1000;
const W2_TOL: f64 = 1e-12;
const MONOTONE_SLACK: f64 = 1e-8;
const MONOTONE_STEPS: usize = 1000;
const MONOTONE_H: f64 = 1e-4;
const DISSIPATION_REL: f64 = 0.05;
const DISSIPATION_FLOOR: f64 = 1e-8;
const DISSIPATION_H: f64 = 1e-5;
const DISSIPATION_SHRINK: f64 = 1.5;
const DEPTH_SLOPE: (f64, f64) = (-1.5, -0.5);
const DEPTH_R2: f64 = 0.8;
const WIDTH_SLOPE: (f64, f64) = (-0.75, -0.25);
const WIDTH_SEEDS: usize = 8;
const ZERO_LOSS: f64 = 1e-3;
const ZERO_LOSS_BUDGET: f64 = 50.0;
const ADJOINT_SLOPE: (f64, f64) = (-1.5, -0.5);
const RK4_RATIO: (f64, f64) = (8.0, 32.0);

type Criterion = (u8, &'static str, fn() -> mfrl::Result<Outcome>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

fn timed(limit: Duration, mut o: Outcome, started: Instant) -> Outcome {
    let took = started.elapsed();
    o.detail = format!("{}; {:.2}s (limit {}s)", o.detail, took.as_secs_f64(), limit.as_secs());
    o.passed &= took <= limit;
    o
}

// f(z, θ) = θ₀ tanh(θ₁ z₀ + θ₂ z₁) c with a fixed direction c.
struct Ridge;

const RIDGE_DIR: [f64; 2] = [1.0, -0.5];

impl Activation for Ridge {
    fn eval(&self, z: &[f64], t: &[f64], out: &mut [f64]) {
        let a = t[0] * (t[1] * z[0] + t[2] * z[1]).tanh();
        out[0] = a * RIDGE_DIR[0];
        out[1] = a * RIDGE_DIR[1];
    }
    fn jac_z(&self, z: &[f64], t: &[f64], out: &mut [f64]) {
        let th = (t[1] * z[0] + t[2] * z[1]).tanh();
        let s = t[0] * (1.0 - th * th);
        for i in 0..2 {
            out[i * 2] = RIDGE_DIR[i] * s * t[1];
            out[i * 2 + 1] = RIDGE_DIR[i] * s * t[2];
        }
    }
    fn jac_theta(&self, z: &[f64], t: &[f64], out: &mut [f64]) {
        let th = (t[1] * z[0] + t[2] * z[1]).tanh();
        let s = t[0] * (1.0 - th * th);
        for i in 0..2 {
            out[i * 3] = RIDGE_DIR[i] * th;
            out[i * 3 + 1] = RIDGE_DIR[i] * s * z[0];
            out[i * 3 + 2] = RIDGE_DIR[i] * s * z[1];
        }
    }
}

fn gradient_oracle() -> mfrl::Result<Outcome> {
    let started = Instant::now();
    let spec = ActivationSpec::custom("ridge", 2, 3, 3, HomogeneityClass::Generic, Arc::new(Ridge))?;
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::GradCheck);
    cfg.grid.depths = vec![4];
    cfg.grid.widths = vec![3];
    cfg.data.n = 5;
    cfg.tolerance.instances = 20;
    let r = grad_check_with(&spec, &cfg)?;
    let o = outcome(
        r.rows.len() == 20 && r.max_relative_error <= GRAD_REL_TOL,
        format!("max rel err {:.3e} over {} instances (tol {GRAD_REL_TOL:.0e})", r.max_relative_error, r.rows.len()),
    );
    Ok(timed(Duration::from_secs(10), o, started))
}

fn homogeneity() -> mfrl::Result<Outcome> {
    let mut worst = Vec::new();
    for name in ["two_homog", "partial_one_homog"] {
        let spec = ActivationSpec::from_name(name, 2, mfrl::activation::DEFAULT_ETA)?;
        let r = verify_assumptions(&spec, HOMOGENEITY_PROBES, 2024, ProbeBox::default());
        worst.push((name, r.homogeneity_violation.unwrap_or(f64::INFINITY)));
    }
    let passed = worst.iter().all(|(_, v)| *v <= HOMOGENEITY_TOL);
    let detail = worst.iter().map(|(n, v)| format!("{n} {v:.3e}")).collect::<Vec<_>>().join(", ");
    Ok(outcome(passed, format!("{detail} over {HOMOGENEITY_PROBES} probes each (tol {HOMOGENEITY_TOL:.0e})")))
}

fn w2_oracle() -> mfrl::Result<Outcome> {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::W2Check);
    cfg.tolerance.instances = 100;
    cfg.tolerance.max_n = 6;
    cfg.tolerance.max_k = 4;
    let r = experiment_w2_check(&cfg)?;
    let o = outcome(
        r.rows.len() == 100 && r.max_abs_diff <= W2_TOL,
        format!("max |hungarian - brute| {:.3e} over {} instances", r.max_abs_diff, r.rows.len()),
    );
    Ok(timed(Duration::from_secs(5), o, started))
}

fn zeroloss_config(activation: &str, init: InitKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Zeroloss);
    cfg.model.activation = activation.into();
    cfg.model.d = 2;
    cfg.data.n = 8;
    cfg.init.kind = init;
    cfg.init.r0 = 1.0;
    cfg.grid.widths = vec![64];
    cfg.grid.nodes = 32;
    cfg
}

fn monotone_loss() -> mfrl::Result<Outcome> {
    let mut cfg = zeroloss_config("two_homog", InitKind::Sphere);
    cfg.train.h_s = MONOTONE_H;
    cfg.train.s_total = MONOTONE_STEPS as f64 * MONOTONE_H;
    cfg.train.record_every = 1;
    cfg.tolerance.loss_threshold = f64::MIN_POSITIVE;
    let r = experiment_zeroloss(&cfg)?;
    let first = r.curve.first().map_or(f64::NAN, |p| p.loss);
    Ok(outcome(
        r.steps_taken == MONOTONE_STEPS
            && r.records.len() == MONOTONE_STEPS + 1
            && r.max_loss_increase <= MONOTONE_SLACK,
        format!(
            "max per-step increase {:.3e} over {} steps (slack {MONOTONE_SLACK:.0e}); E {:.4e} -> {:.4e}",
            r.max_loss_increase, r.steps_taken, first, r.final_loss
        ),
    ))
}

fn dissipation() -> mfrl::Result<Outcome> {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Dissipation);
    cfg.model.activation = "linear".into();
    cfg.train.h_s = DISSIPATION_H;
    let spec = cfg.activation()?;
    let data = make_dataset(&spec, &cfg.data, cfg.grid.nodes, cfg.seed)?;
    let ens = init_ensemble(&spec, &cfg.init, cfg.grid.widths[0], cfg.grid.nodes, cfg.seed)?;
    let r = dissipation_from(ens, &spec, &data, &cfg.train)?;
    let bounded = r
        .rows
        .iter()
        .filter(|row| row.h_s == DISSIPATION_H)
        .all(|row| row.residual <= DISSIPATION_REL * row.dissipation.max(DISSIPATION_FLOOR));
    Ok(outcome(
        bounded && r.shrink >= DISSIPATION_SHRINK,
        format!(
            "max rel residual {:.3e} at h_s={DISSIPATION_H:.0e} (tol {DISSIPATION_REL}); shrink {:.3} on halving (min {DISSIPATION_SHRINK})",
            r.max_relative, r.shrink
        ),
    ))
}

fn depth_scaling() -> mfrl::Result<Outcome> {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Consistency);
    cfg.grid.sweep = Sweep::Depth;
    cfg.grid.widths = vec![32];
    cfg.grid.depths = vec![8, 16, 32, 64];
    let r = experiment_consistency(&cfg)?;
    let o = match r.fit {
        Some(f) => outcome(
            within(f.slope, DEPTH_SLOPE) && f.r2 >= DEPTH_R2,
            format!("slope {:.4} in [{}, {}], r2 {:.4} (min {DEPTH_R2})", f.slope, DEPTH_SLOPE.0, DEPTH_SLOPE.1, f.r2),
        ),
        None => outcome(false, format!("fit undefined: {:?}", r.fit_error)),
    };
    Ok(timed(Duration::from_secs(600), o, started))
}

fn width_scaling() -> mfrl::Result<Outcome> {
    let started = Instant::now();
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Consistency);
    cfg.grid.sweep = Sweep::Width;
    cfg.grid.widths = vec![16, 64, 256];
    cfg.grid.depths = vec![8];
    cfg.replicates = WIDTH_SEEDS;
    let r = experiment_consistency(&cfg)?;
    let o = match r.fit {
        Some(f) => outcome(
            within(f.slope, WIDTH_SLOPE),
            format!(
                "std slope {:.4} in [{}, {}] over {WIDTH_SEEDS} seeds; reference loss (M={}) {:.4e}",
                f.slope,
                WIDTH_SLOPE.0,
                WIDTH_SLOPE.1,
                r.reference_width.unwrap_or(0),
                r.reference_loss.unwrap_or(f64::NAN)
            ),
        ),
        None => outcome(false, format!("fit undefined: {:?}", r.fit_error)),
    };
    Ok(timed(Duration::from_secs(900), o, started))
}

fn zero_loss() -> mfrl::Result<Outcome> {
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut passed = true;
    for (activation, init) in [("two_homog", InitKind::Sphere), ("partial_one_homog", InitKind::Slab)] {
        let mut cfg = zeroloss_config(activation, init);
        cfg.train.s_total = ZERO_LOSS_BUDGET;
        cfg.tolerance.loss_threshold = ZERO_LOSS;
        let r = experiment_zeroloss(&cfg)?;
        let first = r.curve.first().map_or(f64::NAN, |p| p.loss);
        passed &= r.final_loss < ZERO_LOSS && r.falsification.is_none();
        parts.push(format!(
            "{activation}: E {first:.3e} -> {:.3e} at s={:.2}, {}",
            r.final_loss,
            r.curve.last().map_or(f64::NAN, |p| p.s),
            r.falsification.as_deref().unwrap_or("moments bounded")
        ));
    }
    Ok(timed(Duration::from_secs(600), outcome(passed, parts.join("; ")), started))
}

fn adjoint_limit() -> mfrl::Result<Outcome> {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::AdjointLimit);
    cfg.model.activation = "linear".into();
    cfg.grid.depths = vec![8, 16, 32, 64];
    let r = experiment_adjoint_limit(&cfg)?;
    let errors = r.rows.iter().map(|row| format!("{:.2e}", row.max_error)).collect::<Vec<_>>().join(" ");
    Ok(match r.fit {
        Some(f) => outcome(
            within(f.slope, ADJOINT_SLOPE),
            format!("slope {:.4} in [{}, {}]; errors {errors}", f.slope, ADJOINT_SLOPE.0, ADJOINT_SLOPE.1),
        ),
        None => outcome(false, format!("fit undefined: {:?}", r.fit_error)),
    })
}

fn rk4_order() -> mfrl::Result<Outcome> {
    let spec = make_linear(1);
    let a = 1.0f64;
    let errors = [5usize, 9, 17, 33]
        .iter()
        .map(|&nodes| {
            let ens = ParamPathEnsemble::constant(1, nodes, 1, &[a])?;
            Ok((forward_ode(&ens, &spec, &[1.0])?.output()[0] - a.exp()).abs())
        })
        .collect::<mfrl::Result<Vec<f64>>>()?;
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(outcome(
        ratios.iter().all(|&r| within(r, RK4_RATIO)),
        format!(
            "error ratios {} per halving (range [{}, {}])",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" "),
            RK4_RATIO.0,
            RK4_RATIO.1
        ),
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient oracle", gradient_oracle),
        (2, "homogeneity", homogeneity),
        (3, "w2 oracle equivalence", w2_oracle),
        (4, "monotone loss", monotone_loss),
        (5, "dissipation identity", dissipation),
        (6, "depth-consistency scaling", depth_scaling),
        (7, "width scaling", width_scaling),
        (8, "zero-loss trend", zero_loss),
        (9, "adjoint limit", adjoint_limit),
        (10, "rk4 order", rk4_order),
    ];
    let mut failures = 0;
    for (id, name, run) in criteria {
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        failures += usize::from(!o.passed);
        println!("{} [{id:>2}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
