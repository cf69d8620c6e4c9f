//! Continuous-depth state/costate ODEs on a uniform depth grid, the
//! first-variation gradient field, and the particle discretization of the
//! Wasserstein gradient flow in training time `s`.
//!
//! Parameter paths `θ_m(t)` are piecewise linear between the grid nodes
//! `t_j = j/(Nt−1)`. Both ODEs use classical RK4 with step `1/(Nt−1)`;
//! the costate solve reads `Z` at RK4 half-steps by linear interpolation of
//! the stored node values.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::Serialize;

use crate::activation::ActivationSpec;
use crate::dataset::{mean_half_sq, AffineReadout, Dataset};
use crate::discrete::{ParamTensor, STATE_GUARD};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, lerp_into, norm, norm_sq, unique_with_counts};
use crate::measures;

/// Default ceiling on the per-node second moment of the ensemble.
pub const DEFAULT_MOMENT_CEILING: f64 = 1e6;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// `M` particle paths sampled at `Nt` depth nodes; doubles as the atomic
/// measure `(1/M) Σ_m δ_{θ_m(t)}` at every depth.
///
/// Every construction or mutation draws a fresh generation id, which
/// trajectory caches use to detect staleness.
#[derive(Debug, Clone)]
pub struct ParamPathEnsemble {
    particles: usize,
    nodes: usize,
    k: usize,
    // particle-major: [m][j][k]
    values: Vec<f64>,
    generation: u64,
}

impl PartialEq for ParamPathEnsemble {
    fn eq(&self, other: &Self) -> bool {
        self.particles == other.particles
            && self.nodes == other.nodes
            && self.k == other.k
            && self.values == other.values
    }
}

impl ParamPathEnsemble {
    /// `values` is particle-major `M × Nt × k`.
    pub fn new(particles: usize, nodes: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if particles == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("M and k must be positive (got {particles}, {k})")));
        }
        if nodes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 depth nodes, got {nodes}")));
        }
        if values.len() != particles * nodes * k {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                particles * nodes * k,
                values.len()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::InvalidArgument("path values must be finite".into()));
        }
        Ok(Self { particles, nodes, k, values, generation: next_generation() })
    }

    /// Depth-constant paths from `M × k` initial values.
    pub fn constant(particles: usize, nodes: usize, k: usize, points: &[f64]) -> Result<Self> {
        if points.len() != particles * k {
            return Err(Error::ShapeMismatch(format!("expected {} point values, got {}", particles * k, points.len())));
        }
        let mut values = Vec::with_capacity(particles * nodes * k);
        for p in points.chunks(k) {
            for _ in 0..nodes {
                values.extend_from_slice(p);
            }
        }
        Self::new(particles, nodes, k, values)
    }

    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn nodes(&self) -> usize {
        self.nodes
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn generation(&self) -> u64 {
        self.generation
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn step(&self) -> f64 {
        1.0 / (self.nodes - 1) as f64
    }
    pub fn time(&self, j: usize) -> f64 {
        j as f64 / (self.nodes - 1) as f64
    }

    #[inline]
    pub fn node(&self, m: usize, j: usize) -> &[f64] {
        let o = (m * self.nodes + j) * self.k;
        &self.values[o..o + self.k]
    }

    pub fn path(&self, m: usize) -> &[f64] {
        let n = self.nodes * self.k;
        &self.values[m * n..(m + 1) * n]
    }

    /// Applies `update` to the raw values and bumps the generation.
    pub fn update(&mut self, update: impl FnOnce(&mut [f64])) -> Result<()> {
        update(&mut self.values);
        self.generation = next_generation();
        if !all_finite(&self.values) {
            return Err(Error::InvalidArgument("path values became non-finite".into()));
        }
        Ok(())
    }

    /// Piecewise-linear `θ_m(t)`.
    pub fn theta_at(&self, m: usize, t: f64, out: &mut [f64]) {
        let (j, w) = locate(self.nodes, t);
        lerp_into(self.node(m, j), self.node(m, j + 1), w, out);
    }

    /// `θ_{l,m} = θ_m(l/L)`.
    pub fn sample_layers(&self, depth: usize) -> Result<ParamTensor> {
        if depth == 0 {
            return Err(Error::InvalidArgument("depth must be positive".into()));
        }
        let mut p = ParamTensor::zeros(depth, self.particles, self.k);
        for l in 0..depth {
            let t = l as f64 / depth as f64;
            for m in 0..self.particles {
                self.theta_at(m, t, p.get_mut(l, m));
            }
        }
        Ok(p)
    }

    /// The same paths on a grid of `nodes` points (linear interpolation).
    pub fn resampled(&self, nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 depth nodes, got {nodes}")));
        }
        let mut values = vec![0.0; self.particles * nodes * self.k];
        for m in 0..self.particles {
            for j in 0..nodes {
                let t = j as f64 / (nodes - 1) as f64;
                let o = (m * nodes + j) * self.k;
                self.theta_at(m, t, &mut values[o..o + self.k]);
            }
        }
        Self::new(self.particles, nodes, self.k, values)
    }

    /// Relabels particles: particle `m` of the result is `self[perm[m]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.particles];
        if perm.len() != self.particles
            || perm.iter().any(|&p| p >= self.particles || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidArgument("not a permutation of the particle indices".into()));
        }
        let values = perm.iter().flat_map(|&m| self.path(m).iter().copied()).collect();
        Self::new(self.particles, self.nodes, self.k, values)
    }

    /// Two copies of every particle: `M → 2M`.
    pub fn duplicated(&self) -> Self {
        let mut values = self.values.clone();
        values.extend_from_slice(&self.values);
        Self::new(2 * self.particles, self.nodes, self.k, values).expect("duplicating a valid ensemble")
    }

    /// Largest per-node second moment `(1/M) Σ_m |θ_m(t_j)|²`.
    pub fn max_second_moment(&self) -> f64 {
        (0..self.nodes)
            .map(|j| (0..self.particles).map(|m| norm_sq(self.node(m, j))).sum::<f64>() / self.particles as f64)
            .fold(0.0, f64::max)
    }
}

// Segment index and weight for depth t on an n-node uniform grid.
fn locate(nodes: usize, t: f64) -> (usize, f64) {
    let pos = t.clamp(0.0, 1.0) * (nodes - 1) as f64;
    let j = (pos.floor() as usize).min(nodes - 2);
    (j, pos - j as f64)
}

/// `Z(t_j)` and (once the costate solve ran) `p(t_j)` on the depth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTrajectory {
    d: usize,
    nodes: usize,
    z: Vec<f64>,
    p: Option<Vec<f64>>,
}

impl GridTrajectory {
    pub fn nodes(&self) -> usize {
        self.nodes
    }
    pub fn z(&self, j: usize) -> &[f64] {
        &self.z[j * self.d..(j + 1) * self.d]
    }
    pub fn output(&self) -> &[f64] {
        self.z(self.nodes - 1)
    }
    pub fn p(&self, j: usize) -> Option<&[f64]> {
        self.p.as_ref().map(|p| &p[j * self.d..(j + 1) * self.d])
    }
    pub fn z_at(&self, t: f64, out: &mut [f64]) {
        let (j, w) = locate(self.nodes, t);
        lerp_into(self.z(j), self.z(j + 1), w, out);
    }
    pub fn p_at(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let p = self.p.as_ref().ok_or_else(|| Error::InvalidArgument("costate not computed".into()))?;
        let (j, w) = locate(self.nodes, t);
        let d = self.d;
        lerp_into(&p[j * d..(j + 1) * d], &p[(j + 1) * d..(j + 2) * d], w, out);
        Ok(())
    }
}

// Canonical particle groups and RK4 midpoint parameters for one ensemble.
struct SolvePlan {
    groups: Vec<(usize, f64)>,
    // [m][j][k] at (t_j + t_{j+1}) / 2
    mid: Vec<f64>,
    mass: f64,
}

impl SolvePlan {
    fn new(ens: &ParamPathEnsemble) -> Self {
        let groups = unique_with_counts(ens.particles, |m| ens.path(m));
        let (n, k) = (ens.nodes, ens.k);
        let mut mid = vec![0.0; ens.particles * (n - 1) * k];
        for &(m, _) in &groups {
            for j in 0..n - 1 {
                let o = (m * (n - 1) + j) * k;
                lerp_into(ens.node(m, j), ens.node(m, j + 1), 0.5, &mut mid[o..o + k]);
            }
        }
        Self { groups, mid, mass: ens.particles as f64 }
    }

    #[inline]
    fn mid(&self, ens: &ParamPathEnsemble, m: usize, j: usize) -> &[f64] {
        let o = (m * (ens.nodes - 1) + j) * ens.k;
        &self.mid[o..o + ens.k]
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Node(usize),
    Mid(usize),
}

fn stage_theta<'a>(plan: &'a SolvePlan, ens: &'a ParamPathEnsemble, m: usize, stage: Stage) -> &'a [f64] {
    match stage {
        Stage::Node(j) => ens.node(m, j),
        Stage::Mid(j) => plan.mid(ens, m, j),
    }
}

// out = (1/M) Σ_m f(z, θ_m(stage))
fn state_rhs(
    plan: &SolvePlan,
    ens: &ParamPathEnsemble,
    spec: &ActivationSpec,
    z: &[f64],
    stage: Stage,
    out: &mut [f64],
    tmp: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for &(m, count) in &plan.groups {
        spec.eval(z, stage_theta(plan, ens, m, stage), tmp);
        for (o, f) in out.iter_mut().zip(tmp.iter()) {
            *o += count * f;
        }
    }
    out.iter_mut().for_each(|o| *o /= plan.mass);
}

// out = −(1/M) Σ_m (∂z f(z, θ_m(stage)))ᵀ p
#[allow(clippy::too_many_arguments)]
fn costate_rhs(
    plan: &SolvePlan,
    ens: &ParamPathEnsemble,
    spec: &ActivationSpec,
    z: &[f64],
    p: &[f64],
    stage: Stage,
    out: &mut [f64],
    tmp: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for &(m, count) in &plan.groups {
        tmp.iter_mut().for_each(|v| *v = 0.0);
        spec.add_vjp_z(z, stage_theta(plan, ens, m, stage), p, tmp);
        for (o, v) in out.iter_mut().zip(tmp.iter()) {
            *o += count * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= -plan.mass);
}

fn forward_with(plan: &SolvePlan, ens: &ParamPathEnsemble, spec: &ActivationSpec, x: &[f64]) -> Result<GridTrajectory> {
    let d = spec.d();
    let n = ens.nodes;
    let h = ens.step();
    let mut z = vec![0.0; n * d];
    z[..d].copy_from_slice(x);
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut probe, mut tmp) = (vec![0.0; d], vec![0.0; d]);
    for j in 0..n - 1 {
        let (head, tail) = z.split_at_mut((j + 1) * d);
        let zj = &head[j * d..];
        state_rhs(plan, ens, spec, zj, Stage::Node(j), &mut k1, &mut tmp);
        for i in 0..d {
            probe[i] = zj[i] + 0.5 * h * k1[i];
        }
        state_rhs(plan, ens, spec, &probe, Stage::Mid(j), &mut k2, &mut tmp);
        for i in 0..d {
            probe[i] = zj[i] + 0.5 * h * k2[i];
        }
        state_rhs(plan, ens, spec, &probe, Stage::Mid(j), &mut k3, &mut tmp);
        for i in 0..d {
            probe[i] = zj[i] + h * k3[i];
        }
        state_rhs(plan, ens, spec, &probe, Stage::Node(j + 1), &mut k4, &mut tmp);
        for i in 0..d {
            tail[i] = zj[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !all_finite(&tail[..d]) || norm(&tail[..d]) > STATE_GUARD {
            return Err(Error::BlowUp { stage: "forward_ode", index: j + 1 });
        }
    }
    Ok(GridTrajectory { d, nodes: n, z, p: None })
}

fn adjoint_with(
    plan: &SolvePlan,
    ens: &ParamPathEnsemble,
    spec: &ActivationSpec,
    mut traj: GridTrajectory,
    y: f64,
    readout: &AffineReadout,
) -> Result<GridTrajectory> {
    let d = spec.d();
    let n = ens.nodes;
    let h = -ens.step();
    let mut p = vec![0.0; n * d];
    let mismatch = readout.eval(traj.output()) - y;
    for (pi, w) in p[(n - 1) * d..].iter_mut().zip(readout.grad()) {
        *pi = mismatch * w;
    }
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut probe, mut tmp, mut zmid) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for j in (0..n - 1).rev() {
        let (head, tail) = p.split_at_mut((j + 1) * d);
        let pn = &tail[..d];
        let (z0, z1) = (traj.z(j), traj.z(j + 1));
        lerp_into(z0, z1, 0.5, &mut zmid);
        costate_rhs(plan, ens, spec, z1, pn, Stage::Node(j + 1), &mut k1, &mut tmp);
        for i in 0..d {
            probe[i] = pn[i] + 0.5 * h * k1[i];
        }
        costate_rhs(plan, ens, spec, &zmid, &probe, Stage::Mid(j), &mut k2, &mut tmp);
        for i in 0..d {
            probe[i] = pn[i] + 0.5 * h * k2[i];
        }
        costate_rhs(plan, ens, spec, &zmid, &probe, Stage::Mid(j), &mut k3, &mut tmp);
        for i in 0..d {
            probe[i] = pn[i] + h * k3[i];
        }
        costate_rhs(plan, ens, spec, z0, &probe, Stage::Node(j), &mut k4, &mut tmp);
        let pj = &mut head[j * d..];
        for i in 0..d {
            pj[i] = pn[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !all_finite(pj) {
            return Err(Error::BlowUp { stage: "adjoint_ode", index: j });
        }
    }
    traj.p = Some(p);
    Ok(traj)
}

fn check_compat(ens: &ParamPathEnsemble, spec: &ActivationSpec) -> Result<()> {
    if ens.k != spec.k() {
        return Err(Error::ShapeMismatch(format!("ensemble has k = {}, activation needs {}", ens.k, spec.k())));
    }
    Ok(())
}

/// Integrates `dz/dt = (1/M) Σ_m f(z, θ_m(t))` from `z(0) = x`.
pub fn forward_ode(ens: &ParamPathEnsemble, spec: &ActivationSpec, x: &[f64]) -> Result<GridTrajectory> {
    check_compat(ens, spec)?;
    if x.len() != spec.d() {
        return Err(Error::ShapeMismatch(format!("input has length {}, d = {}", x.len(), spec.d())));
    }
    forward_with(&SolvePlan::new(ens), ens, spec, x)
}

/// Integrates `dpᵀ/dt = −pᵀ (1/M) Σ_m ∂z f(Z, θ_m(t))` backward from
/// `p(1) = (g(Z(1)) − y) ∇g`, reusing the state trajectory `z_traj`.
pub fn adjoint_ode(
    ens: &ParamPathEnsemble,
    spec: &ActivationSpec,
    z_traj: GridTrajectory,
    y: f64,
    readout: &AffineReadout,
) -> Result<GridTrajectory> {
    check_compat(ens, spec)?;
    if z_traj.nodes != ens.nodes || z_traj.d != spec.d() {
        return Err(Error::GridMismatch("state trajectory does not match the ensemble grid".into()));
    }
    adjoint_with(&SolvePlan::new(ens), ens, spec, z_traj, y, readout)
}

/// `E = mean_i ½ (g(Z(1; x_i)) − y_i)²` for the particle measure.
pub fn loss_continuous(ens: &ParamPathEnsemble, spec: &ActivationSpec, data: &Dataset) -> Result<f64> {
    check_compat(ens, spec)?;
    let plan = SolvePlan::new(ens);
    let residuals = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let traj = forward_with(&plan, ens, spec, data.sample(i))?;
            Ok(data.readout().eval(traj.output()) - data.label(i))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_half_sq(&residuals))
}

/// State and costate trajectories for every sample, tagged with the
/// generation of the ensemble they were computed from.
#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    generation: u64,
    nodes: usize,
    groups: Vec<(usize, f64)>,
    trajectories: Vec<GridTrajectory>,
}

impl TrajectoryCache {
    pub fn build(ens: &ParamPathEnsemble, spec: &ActivationSpec, data: &Dataset) -> Result<Self> {
        check_compat(ens, spec)?;
        let plan = SolvePlan::new(ens);
        let trajectories = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let traj = forward_with(&plan, ens, spec, data.sample(i))?;
                adjoint_with(&plan, ens, spec, traj, data.label(i), data.readout())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { generation: ens.generation, nodes: ens.nodes, groups: plan.groups, trajectories })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
    pub fn trajectories(&self) -> &[GridTrajectory] {
        &self.trajectories
    }

    pub fn ensure_fresh(&self, ens: &ParamPathEnsemble) -> Result<()> {
        if self.generation != ens.generation {
            return Err(Error::StaleCache { cache: self.generation, ensemble: ens.generation });
        }
        Ok(())
    }

    /// Mean half squared mismatch from the cached outputs.
    pub fn loss(&self, data: &Dataset) -> f64 {
        let residuals: Vec<f64> = self
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| data.readout().eval(t.output()) - data.label(i))
            .collect();
        mean_half_sq(&residuals)
    }
}

#[derive(Clone, Copy)]
enum Depth {
    Node(usize),
    Time(f64),
}

// out = mean_i (∂θ f(Z_i, θ))ᵀ p_i, with Z, p read at `depth`.
fn field_from(trajs: &[GridTrajectory], spec: &ActivationSpec, theta: &[f64], depth: Depth, out: &mut [f64]) {
    let d = spec.d();
    out.iter_mut().for_each(|o| *o = 0.0);
    let (mut z, mut p) = (vec![0.0; d], vec![0.0; d]);
    for traj in trajs {
        match depth {
            Depth::Node(j) => spec.add_vjp_theta(traj.z(j), theta, traj.p(j).expect("costates filled"), out),
            Depth::Time(t) => {
                traj.z_at(t, &mut z);
                traj.p_at(t, &mut p).expect("costates filled");
                spec.add_vjp_theta(&z, theta, &p, out);
            }
        }
    }
    let n = trajs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
}

/// `∇θ (δE/δρ)(θ, t) = mean_x[(∂θ f(Z(t;x), θ))ᵀ p(t;x)]` with `Z`, `p`
/// interpolated from `cache`, which must be fresh for `ens`.
pub fn frechet_gradient(
    ens: &ParamPathEnsemble,
    spec: &ActivationSpec,
    theta: &[f64],
    t: f64,
    cache: &TrajectoryCache,
) -> Result<Vec<f64>> {
    cache.ensure_fresh(ens)?;
    if theta.len() != spec.k() {
        return Err(Error::ShapeMismatch(format!("theta has length {}, k = {}", theta.len(), spec.k())));
    }
    let mut out = vec![0.0; spec.k()];
    field_from(&cache.trajectories, spec, theta, Depth::Time(t), &mut out);
    Ok(out)
}

/// The gradient field evaluated at every particle node, `M × Nt × k`.
pub fn node_field(ens: &ParamPathEnsemble, spec: &ActivationSpec, cache: &TrajectoryCache) -> Result<Vec<f64>> {
    cache.ensure_fresh(ens)?;
    let (n, k) = (ens.nodes, ens.k);
    let mut field = vec![0.0; ens.values.len()];
    field.par_chunks_mut(n * k).enumerate().for_each(|(m, chunk)| {
        for j in 0..n {
            field_from(&cache.trajectories, spec, ens.node(m, j), Depth::Node(j), &mut chunk[j * k..(j + 1) * k]);
        }
    });
    Ok(field)
}

/// Per-snapshot moment and support diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRecord {
    pub s: f64,
    pub loss: f64,
    pub max_second_moment: f64,
    pub support_radius_theta1: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

/// A particle ensemble at training time `s` together with its trajectory
/// cache, node field and loss, all computed from the same generation.
#[derive(Debug, Clone)]
pub struct FlowState {
    ensemble: ParamPathEnsemble,
    s: f64,
    cache: TrajectoryCache,
    field: Vec<f64>,
    loss: f64,
    moment_ceiling: f64,
    diagnostics: Vec<MomentRecord>,
}

impl FlowState {
    pub fn new(ensemble: ParamPathEnsemble, spec: &ActivationSpec, data: &Dataset) -> Result<Self> {
        Self::at(ensemble, 0.0, DEFAULT_MOMENT_CEILING, Vec::new(), spec, data)
    }

    fn at(
        ensemble: ParamPathEnsemble,
        s: f64,
        moment_ceiling: f64,
        diagnostics: Vec<MomentRecord>,
        spec: &ActivationSpec,
        data: &Dataset,
    ) -> Result<Self> {
        let cache = TrajectoryCache::build(&ensemble, spec, data)?;
        let field = node_field(&ensemble, spec, &cache)?;
        let loss = cache.loss(data);
        if !loss.is_finite() {
            return Err(Error::BlowUp { stage: "loss", index: 0 });
        }
        Ok(Self { ensemble, s, cache, field, loss, moment_ceiling, diagnostics })
    }

    pub fn with_moment_ceiling(mut self, ceiling: f64) -> Self {
        self.moment_ceiling = ceiling;
        self
    }

    pub fn ensemble(&self) -> &ParamPathEnsemble {
        &self.ensemble
    }
    pub fn s(&self) -> f64 {
        self.s
    }
    pub fn loss(&self) -> f64 {
        self.loss
    }
    pub fn cache(&self) -> &TrajectoryCache {
        &self.cache
    }
    pub fn moment_ceiling(&self) -> f64 {
        self.moment_ceiling
    }
    /// Node field `M × Nt × k` of the current ensemble.
    pub fn field(&self) -> &[f64] {
        &self.field
    }
    pub fn diagnostics(&self) -> &[MomentRecord] {
        &self.diagnostics
    }

    /// Appends a moment/support snapshot of the current ensemble.
    pub fn record_diagnostics(&mut self, k1: usize) {
        let pm = measures::PathMeasure::from_ensemble(&self.ensemble);
        let (min_radius, max_radius) = pm.radius_range();
        self.diagnostics.push(MomentRecord {
            s: self.s,
            loss: self.loss,
            max_second_moment: self.ensemble.max_second_moment(),
            support_radius_theta1: measures::support_radius_theta1(&pm, k1),
            min_radius,
            max_radius,
        });
    }

    fn advance(self, spec: &ActivationSpec, data: &Dataset, h_s: f64, field: &[f64]) -> Result<Self> {
        if !(h_s > 0.0) {
            return Err(Error::InvalidArgument(format!("h_s must be positive, got {h_s}")));
        }
        let FlowState { mut ensemble, s, moment_ceiling, diagnostics, .. } = self;
        ensemble
            .update(|vals| {
                for (v, f) in vals.iter_mut().zip(field) {
                    *v -= h_s * f;
                }
            })
            .map_err(|_| Error::BlowUp { stage: "flow_step", index: 0 })?;
        let s = s + h_s;
        let moment = ensemble.max_second_moment();
        if !(moment <= moment_ceiling) {
            return Err(Error::MomentCeiling { moment, ceiling: moment_ceiling, s });
        }
        Self::at(ensemble, s, moment_ceiling, diagnostics, spec, data)
    }
}

/// One explicit Euler step `θ_m(t_j) ← θ_m(t_j) − h_s ∇θ(δE/δρ)(θ_m(t_j), t_j)`
/// with the field frozen at the current measure.
pub fn meanfield_flow_step(state: FlowState, spec: &ActivationSpec, data: &Dataset, h_s: f64) -> Result<FlowState> {
    let field = state.field.clone();
    state.advance(spec, data, h_s, &field)
}

/// `D(s) = ∫₀¹ (1/M) Σ_m |∇θ(δE/δρ)(θ_m(t), t)|² dt` by the trapezoid rule
/// over the depth grid.
pub fn dissipation_rate(state: &FlowState) -> f64 {
    let ens = &state.ensemble;
    let (n, k) = (ens.nodes, ens.k);
    let h = ens.step();
    let mut total = 0.0;
    for j in 0..n {
        let mut node = 0.0;
        for &(m, count) in &state.cache.groups {
            let o = (m * n + j) * k;
            node += count * norm_sq(&state.field[o..o + k]);
        }
        let w = if j == 0 || j == n - 1 { 0.5 * h } else { h };
        total += w * node / ens.particles as f64;
    }
    total
}

/// A gradient field frozen from another (typically finer) particle run.
#[derive(Debug, Clone)]
pub struct ReferenceField {
    nodes: usize,
    trajectories: Vec<GridTrajectory>,
}

impl ReferenceField {
    pub fn from_state(state: &FlowState) -> Self {
        Self { nodes: state.cache.nodes, trajectories: state.cache.trajectories.clone() }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Field at every node of `ens`; the reference grid must refine it.
    pub fn on_ensemble(&self, ens: &ParamPathEnsemble, spec: &ActivationSpec) -> Result<Vec<f64>> {
        let (n, k) = (ens.nodes, ens.k);
        if !(self.nodes - 1).is_multiple_of(n - 1) {
            return Err(Error::GridMismatch(format!(
                "reference grid with {} nodes does not refine ensemble grid with {n} nodes",
                self.nodes
            )));
        }
        if k != spec.k() {
            return Err(Error::ShapeMismatch(format!("ensemble has k = {k}, activation needs {}", spec.k())));
        }
        let ratio = (self.nodes - 1) / (n - 1);
        let mut field = vec![0.0; ens.values.len()];
        field.par_chunks_mut(n * k).enumerate().for_each(|(m, chunk)| {
            for j in 0..n {
                field_from(
                    &self.trajectories,
                    spec,
                    ens.node(m, j),
                    Depth::Node(j * ratio),
                    &mut chunk[j * k..(j + 1) * k],
                );
            }
        });
        Ok(field)
    }
}

/// One Euler step of a sibling ensemble driven by a reference field instead
/// of its own.
pub fn coupled_reference_flow(
    state: FlowState,
    spec: &ActivationSpec,
    data: &Dataset,
    reference: &ReferenceField,
    h_s: f64,
) -> Result<FlowState> {
    if reference.trajectories.len() != data.len() {
        return Err(Error::GridMismatch(format!(
            "reference field built from {} samples, dataset has {}",
            reference.trajectories.len(),
            data.len()
        )));
    }
    let field = reference.on_ensemble(&state.ensemble, spec)?;
    state.advance(spec, data, h_s, &field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{make_linear, make_zero};
    use approx::assert_relative_eq;

    fn unit_readout() -> AffineReadout {
        AffineReadout::new(vec![1.0], 0.0).unwrap()
    }

    fn linear_path(nodes: usize, f: impl Fn(f64) -> f64) -> ParamPathEnsemble {
        let vals = (0..nodes).map(|j| f(j as f64 / (nodes - 1) as f64)).collect();
        ParamPathEnsemble::new(1, nodes, 1, vals).unwrap()
    }

    #[test]
    fn zero_activation_keeps_state_and_costate() {
        let spec = make_zero(2, 3);
        let ens = ParamPathEnsemble::constant(2, 5, 3, &[0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        let readout = AffineReadout::new(vec![2.0, -1.0], 0.5).unwrap();
        let x = [0.3, 0.4];
        let traj = forward_ode(&ens, &spec, &x).unwrap();
        for j in 0..5 {
            assert_eq!(traj.z(j), &x);
        }
        let traj = adjoint_ode(&ens, &spec, traj, 1.0, &readout).unwrap();
        let mismatch = readout.eval(&x) - 1.0;
        for j in 0..5 {
            assert_eq!(traj.p(j).unwrap(), &[mismatch * 2.0, -mismatch]);
        }
    }

    #[test]
    fn linear_constant_gain_matches_exponential() {
        let spec = make_linear(1);
        let ens = linear_path(65, |_| 1.0);
        let traj = forward_ode(&ens, &spec, &[1.0]).unwrap();
        assert!((traj.output()[0] - std::f64::consts::E).abs() <= 1e-7);
        let traj = adjoint_ode(&ens, &spec, traj, 0.0, &unit_readout()).unwrap();
        let p1 = traj.p(64).unwrap()[0];
        for j in 0..65 {
            let t = j as f64 / 64.0;
            assert!((traj.p(j).unwrap()[0] - p1 * (1.0 - t).exp()).abs() <= 1e-7);
        }
    }

    #[test]
    fn linear_in_depth_gain() {
        let spec = make_linear(1);
        let coarse = forward_ode(&linear_path(33, |t| t), &spec, &[1.0]).unwrap();
        let dense = forward_ode(&linear_path(1025, |t| t), &spec, &[1.0]).unwrap();
        let exact = 0.5f64.exp();
        assert!((coarse.output()[0] - exact).abs() < 1e-8);
        assert!((dense.output()[0] - exact).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_costate_vanishes() {
        let spec = make_linear(1);
        let ens = linear_path(9, |t| 0.3 + t);
        let traj = forward_ode(&ens, &spec, &[0.7]).unwrap();
        let y = traj.output()[0];
        let traj = adjoint_ode(&ens, &spec, traj, y, &unit_readout()).unwrap();
        for j in 0..9 {
            assert_eq!(traj.p(j).unwrap(), &[0.0]);
        }
    }

    #[test]
    fn interpolation_hits_nodes() {
        let ens = ParamPathEnsemble::new(1, 3, 1, vec![0.0, 1.0, 4.0]).unwrap();
        let mut out = [0.0];
        ens.theta_at(0, 0.5, &mut out);
        assert_eq!(out, [1.0]);
        ens.theta_at(0, 0.75, &mut out);
        assert_eq!(out, [2.5]);
        ens.theta_at(0, 1.0, &mut out);
        assert_eq!(out, [4.0]);
    }

    #[test]
    fn frechet_field_constant_in_depth_for_linear_gain() {
        let spec = make_linear(1);
        let ens = linear_path(65, |_| 1.0);
        let data = Dataset::new(1, vec![0.8], vec![0.1], unit_readout(), 1.0).unwrap();
        let cache = TrajectoryCache::build(&ens, &spec, &data).unwrap();
        let p1 = cache.trajectories()[0].p(64).unwrap()[0];
        let expected = 0.8 * p1 * std::f64::consts::E;
        for i in 0..=16 {
            let t = i as f64 / 16.0;
            let v = frechet_gradient(&ens, &spec, &[1.0], t, &cache).unwrap();
            assert!((v[0] - expected).abs() <= 1e-6, "t={t}: {} vs {expected}", v[0]);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = make_linear(1);
        let mut ens = linear_path(5, |_| 1.0);
        let data = Dataset::new(1, vec![0.8], vec![0.1], unit_readout(), 1.0).unwrap();
        let cache = TrajectoryCache::build(&ens, &spec, &data).unwrap();
        ens.update(|v| v[0] += 0.1).unwrap();
        let err = frechet_gradient(&ens, &spec, &[1.0], 0.5, &cache).unwrap_err();
        assert!(matches!(err, Error::StaleCache { .. }));
        assert!(node_field(&ens, &spec, &cache).is_err());
    }

    #[test]
    fn euler_step_moves_against_field() {
        let spec = make_linear(1);
        let ens = linear_path(2, |_| 0.5);
        let data = Dataset::new(1, vec![0.8], vec![0.1], unit_readout(), 1.0).unwrap();
        let state = FlowState::new(ens.clone(), &spec, &data).unwrap();
        let v = state.field().to_vec();
        let next = meanfield_flow_step(state, &spec, &data, 0.01).unwrap();
        for (j, fv) in v.iter().enumerate() {
            assert_relative_eq!(next.ensemble().node(0, j)[0], 0.5 - 0.01 * fv, max_relative = 1e-15);
        }
        assert_eq!(next.s(), 0.01);
    }

    #[test]
    fn perfect_fit_state_is_stationary() {
        let spec = make_linear(2);
        let ens = ParamPathEnsemble::constant(3, 6, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, 0.0]).unwrap();
        let readout = AffineReadout::new(vec![1.0, 1.0], 0.0).unwrap();
        let xs = vec![0.2, 0.1, -0.3, 0.5];
        let ys: Vec<f64> = xs.chunks(2).map(|x| readout.eval(forward_ode(&ens, &spec, x).unwrap().output())).collect();
        let data = Dataset::new(2, xs, ys, readout, 1.0).unwrap();
        let state = FlowState::new(ens.clone(), &spec, &data).unwrap();
        assert_eq!(state.loss(), 0.0);
        assert_eq!(dissipation_rate(&state), 0.0);
        let next = meanfield_flow_step(state, &spec, &data, 0.1).unwrap();
        assert_eq!(next.ensemble(), &ens);
    }

    #[test]
    fn moment_ceiling_is_a_falsification_event() {
        let spec = make_linear(1);
        let ens = linear_path(3, |_| 1.0);
        let data = Dataset::new(1, vec![1.0], vec![-5.0], unit_readout(), 1.0).unwrap();
        let state = FlowState::new(ens, &spec, &data).unwrap().with_moment_ceiling(1.0);
        let err = meanfield_flow_step(state, &spec, &data, 0.5).unwrap_err();
        assert!(matches!(err, Error::MomentCeiling { .. }));
    }

    #[test]
    fn reference_grid_must_refine() {
        let spec = make_linear(1);
        let data = Dataset::new(1, vec![0.5], vec![0.0], unit_readout(), 1.0).unwrap();
        let fine = FlowState::new(linear_path(7, |_| 0.2), &spec, &data).unwrap();
        let reference = ReferenceField::from_state(&fine);
        let coarse = FlowState::new(linear_path(5, |_| 0.2), &spec, &data).unwrap();
        let err = coupled_reference_flow(coarse, &spec, &data, &reference, 0.1).unwrap_err();
        assert!(matches!(err, Error::GridMismatch(_)));
        let coarse = FlowState::new(linear_path(4, |_| 0.2), &spec, &data).unwrap();
        assert!(coupled_reference_flow(coarse, &spec, &data, &reference, 0.1).is_ok());
    }

    #[test]
    fn sampled_layers_follow_paths() {
        let ens = ParamPathEnsemble::new(1, 3, 1, vec![0.0, 1.0, 4.0]).unwrap();
        let p = ens.sample_layers(4).unwrap();
        assert_eq!(p.as_slice(), &[0.0, 0.5, 1.0, 2.5]);
    }
}
