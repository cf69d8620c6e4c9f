//! Finite ResNet `z_{l+1} = z_l + (1/(ML)) Σ_m f(z_l, θ_{l,m})`: forward pass,
//! loss, exact discrete adjoint and gradient, and the rescaled gradient flow
//! `dΘ/ds = −ML ∇E` integrated with explicit Euler.

use rayon::prelude::*;
use serde::Serialize;

use crate::activation::ActivationSpec;
use crate::dataset::{mean_half_sq, AffineReadout, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm, unique_with_counts};

/// States beyond this norm are treated as a blow-up.
pub const STATE_GUARD: f64 = 1e8;

/// Parameters `θ_{l,m} ∈ ℝ^k`, stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    depth: usize,
    width: usize,
    k: usize,
    data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(depth: usize, width: usize, k: usize) -> Self {
        Self { depth, width, k, data: vec![0.0; depth * width * k] }
    }

    pub fn from_vec(depth: usize, width: usize, k: usize, data: Vec<f64>) -> Result<Self> {
        if depth == 0 || width == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("L, M, k must be positive (got {depth}, {width}, {k})")));
        }
        if data.len() != depth * width * k {
            return Err(Error::ShapeMismatch(format!("expected {} entries, got {}", depth * width * k, data.len())));
        }
        if !all_finite(&data) {
            return Err(Error::InvalidArgument("parameter entries must be finite".into()));
        }
        Ok(Self { depth, width, k, data })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, l: usize, m: usize) -> &[f64] {
        let o = (l * self.width + m) * self.k;
        &self.data[o..o + self.k]
    }

    #[inline]
    pub fn get_mut(&mut self, l: usize, m: usize) -> &mut [f64] {
        let o = (l * self.width + m) * self.k;
        &mut self.data[o..o + self.k]
    }

    /// Checks that the tensor can drive `spec`.
    pub fn check(&self, spec: &ActivationSpec) -> Result<()> {
        if self.k != spec.k() {
            return Err(Error::ShapeMismatch(format!("tensor has k = {}, activation needs {}", self.k, spec.k())));
        }
        Ok(())
    }

    /// Appends a copy of every column: `M → 2M`.
    pub fn duplicated_columns(&self) -> Self {
        let mut out = Self::zeros(self.depth, 2 * self.width, self.k);
        for l in 0..self.depth {
            for m in 0..self.width {
                out.get_mut(l, m).copy_from_slice(self.get(l, m));
                out.get_mut(l, m + self.width).copy_from_slice(self.get(l, m));
            }
        }
        out
    }
}

/// States `z_0..z_L` and (optionally) costates `p_0..p_{L-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTrajectory {
    d: usize,
    states: Vec<f64>,
    costates: Option<Vec<f64>>,
}

impl DiscreteTrajectory {
    pub fn depth(&self) -> usize {
        self.states.len() / self.d - 1
    }
    pub fn state(&self, l: usize) -> &[f64] {
        &self.states[l * self.d..(l + 1) * self.d]
    }
    pub fn output(&self) -> &[f64] {
        self.state(self.depth())
    }
    /// `p_l`, the sensitivity of the loss to `z_{l+1}`.
    pub fn costate(&self, l: usize) -> Option<&[f64]> {
        self.costates.as_ref().map(|c| &c[l * self.d..(l + 1) * self.d])
    }
}

// Per-layer canonical summation order with multiplicities.
struct LayerPlan {
    layers: Vec<Vec<(usize, f64)>>,
    scale: f64,
}

impl LayerPlan {
    fn new(params: &ParamTensor) -> Self {
        let layers = (0..params.depth).map(|l| unique_with_counts(params.width, |m| params.get(l, m))).collect();
        Self { layers, scale: (params.width * params.depth) as f64 }
    }
}

fn check_state(z: &[f64], stage: &'static str, index: usize) -> Result<()> {
    if !all_finite(z) || norm(z) > STATE_GUARD {
        return Err(Error::BlowUp { stage, index });
    }
    Ok(())
}

fn forward_with(
    plan: &LayerPlan,
    params: &ParamTensor,
    spec: &ActivationSpec,
    x: &[f64],
) -> Result<DiscreteTrajectory> {
    let d = spec.d();
    let depth = params.depth;
    let mut states = vec![0.0; (depth + 1) * d];
    states[..d].copy_from_slice(x);
    let mut acc = vec![0.0; d];
    let mut fval = vec![0.0; d];
    for l in 0..depth {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let z = &states[l * d..(l + 1) * d];
        for &(m, count) in &plan.layers[l] {
            spec.eval(z, params.get(l, m), &mut fval);
            for (a, f) in acc.iter_mut().zip(&fval) {
                *a += count * f;
            }
        }
        let (head, tail) = states.split_at_mut((l + 1) * d);
        let zl = &head[l * d..];
        for i in 0..d {
            tail[i] = zl[i] + acc[i] / plan.scale;
        }
        check_state(&tail[..d], "forward", l + 1)?;
    }
    Ok(DiscreteTrajectory { d, states, costates: None })
}

fn adjoint_with(
    plan: &LayerPlan,
    params: &ParamTensor,
    spec: &ActivationSpec,
    mut traj: DiscreteTrajectory,
    y: f64,
    readout: &AffineReadout,
) -> Result<DiscreteTrajectory> {
    let d = spec.d();
    let depth = params.depth;
    let mut costates = vec![0.0; depth * d];
    let mismatch = readout.eval(traj.output()) - y;
    for (p, w) in costates[(depth - 1) * d..].iter_mut().zip(readout.grad()) {
        *p = mismatch * w;
    }
    let mut acc = vec![0.0; d];
    let mut vjp = vec![0.0; d];
    for l in (0..depth.saturating_sub(1)).rev() {
        // p_l = p_{l+1} (I + (1/(ML)) Σ_m ∂z f(z_{l+1}, θ_{l+1,m}))
        let z = traj.state(l + 1);
        let (head, tail) = costates.split_at_mut((l + 1) * d);
        let next = &tail[..d];
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(m, count) in &plan.layers[l + 1] {
            vjp.iter_mut().for_each(|v| *v = 0.0);
            spec.add_vjp_z(z, params.get(l + 1, m), next, &mut vjp);
            for (a, v) in acc.iter_mut().zip(&vjp) {
                *a += count * v;
            }
        }
        let cur = &mut head[l * d..];
        for i in 0..d {
            cur[i] = next[i] + acc[i] / plan.scale;
        }
        if !all_finite(cur) {
            return Err(Error::BlowUp { stage: "adjoint", index: l });
        }
    }
    traj.costates = Some(costates);
    Ok(traj)
}

/// Runs the residual recursion from `z_0 = x`.
pub fn forward(params: &ParamTensor, spec: &ActivationSpec, x: &[f64]) -> Result<DiscreteTrajectory> {
    params.check(spec)?;
    if x.len() != spec.d() {
        return Err(Error::ShapeMismatch(format!("input has length {}, d = {}", x.len(), spec.d())));
    }
    forward_with(&LayerPlan::new(params), params, spec, x)
}

/// Forward pass followed by the backward costate recursion for one sample.
pub fn adjoint(
    params: &ParamTensor,
    spec: &ActivationSpec,
    x: &[f64],
    y: f64,
    readout: &AffineReadout,
) -> Result<DiscreteTrajectory> {
    params.check(spec)?;
    let plan = LayerPlan::new(params);
    let traj = forward_with(&plan, params, spec, x)?;
    adjoint_with(&plan, params, spec, traj, y, readout)
}

/// `E(Θ) = mean_i ½ (g(z_L(x_i)) − y_i)²`.
pub fn loss(params: &ParamTensor, spec: &ActivationSpec, data: &Dataset) -> Result<f64> {
    params.check(spec)?;
    let plan = LayerPlan::new(params);
    let residuals = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let traj = forward_with(&plan, params, spec, data.sample(i))?;
            Ok(data.readout().eval(traj.output()) - data.label(i))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_half_sq(&residuals))
}

// mean_x[∂θ f(z_l, θ_{l,m})ᵀ p_l]; the gradient is this divided by ML.
fn descent_field(params: &ParamTensor, spec: &ActivationSpec, data: &Dataset) -> Result<ParamTensor> {
    params.check(spec)?;
    let plan = LayerPlan::new(params);
    let per_sample = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let traj = forward_with(&plan, params, spec, data.sample(i))?;
            let traj = adjoint_with(&plan, params, spec, traj, data.label(i), data.readout())?;
            let mut g = ParamTensor::zeros(params.depth, params.width, params.k);
            for l in 0..params.depth {
                let z = traj.state(l);
                let p = traj.costate(l).expect("costates filled");
                for m in 0..params.width {
                    spec.add_vjp_theta(z, params.get(l, m), p, g.get_mut(l, m));
                }
            }
            Ok(g)
        })
        .collect::<Result<Vec<ParamTensor>>>()?;
    let mut total = ParamTensor::zeros(params.depth, params.width, params.k);
    for g in &per_sample {
        for (t, v) in total.data.iter_mut().zip(&g.data) {
            *t += v;
        }
    }
    let n = data.len() as f64;
    total.data.iter_mut().for_each(|t| *t /= n);
    Ok(total)
}

/// `∂E/∂θ_{l,m} = (1/(ML)) mean_x[∂θ f(z_l, θ_{l,m})ᵀ p_l]`.
pub fn gradient(params: &ParamTensor, spec: &ActivationSpec, data: &Dataset) -> Result<ParamTensor> {
    let mut g = descent_field(params, spec, data)?;
    let scale = (params.width * params.depth) as f64;
    g.data.iter_mut().for_each(|v| *v /= scale);
    Ok(g)
}

/// One explicit Euler step of `dΘ/ds = −ML ∇E`.
pub fn flow_step(params: &ParamTensor, spec: &ActivationSpec, data: &Dataset, h_s: f64) -> Result<ParamTensor> {
    if !(h_s > 0.0) {
        return Err(Error::InvalidArgument(format!("h_s must be positive, got {h_s}")));
    }
    let field = descent_field(params, spec, data)?;
    let mut next = params.clone();
    for (t, v) in next.data.iter_mut().zip(&field.data) {
        *t -= h_s * v;
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossPoint {
    pub s: f64,
    pub loss: f64,
}

/// `(s, E(s))` samples of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn push(&mut self, s: f64, loss: f64) {
        self.points.push(LossPoint { s, loss });
    }
    pub fn first(&self) -> Option<LossPoint> {
        self.points.first().copied()
    }
    pub fn last(&self) -> Option<LossPoint> {
        self.points.last().copied()
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Number of Euler steps covering `[0, s_total]` at step `h_s`.
pub fn step_count(s_total: f64, h_s: f64) -> Result<usize> {
    if !(s_total >= 0.0) || !s_total.is_finite() {
        return Err(Error::InvalidArgument(format!("training budget must be finite and nonnegative, got {s_total}")));
    }
    if !(h_s > 0.0) {
        return Err(Error::InvalidArgument(format!("h_s must be positive, got {h_s}")));
    }
    Ok((s_total / h_s).round() as usize)
}

/// Integrates the flow over `[0, s_total]`, returning the final parameters
/// and the loss sampled every `record_every` steps (plus the endpoints).
pub fn train_to(
    params0: &ParamTensor,
    spec: &ActivationSpec,
    data: &Dataset,
    s_total: f64,
    h_s: f64,
    record_every: usize,
) -> Result<(ParamTensor, LossCurve)> {
    let steps = step_count(s_total, h_s)?;
    let every = record_every.max(1);
    let mut params = params0.clone();
    let mut curve = LossCurve::default();
    let e0 = loss(&params, spec, data)?;
    curve.push(0.0, e0);
    for step in 1..=steps {
        params = flow_step(&params, spec, data, h_s)?;
        if step % every == 0 || step == steps {
            let e = loss(&params, spec, data)?;
            if !e.is_finite() {
                return Err(Error::BlowUp { stage: "train", index: step });
            }
            curve.push(step as f64 * h_s, e);
        }
    }
    Ok((params, curve))
}

pub fn train(
    params0: &ParamTensor,
    spec: &ActivationSpec,
    data: &Dataset,
    s_total: f64,
    h_s: f64,
    record_every: usize,
) -> Result<LossCurve> {
    train_to(params0, spec, data, s_total, h_s, record_every).map(|(_, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{make_zero, Activation, ActivationSpec, HomogeneityClass};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    /// f(z, θ) = θ² z with d = k = 1.
    struct SquareGain;

    impl Activation for SquareGain {
        fn eval(&self, z: &[f64], t: &[f64], out: &mut [f64]) {
            out[0] = t[0] * t[0] * z[0];
        }
        fn jac_z(&self, _z: &[f64], t: &[f64], out: &mut [f64]) {
            out[0] = t[0] * t[0];
        }
        fn jac_theta(&self, z: &[f64], t: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * t[0] * z[0];
        }
    }

    fn square_gain() -> ActivationSpec {
        ActivationSpec::custom("square_gain", 1, 1, 1, HomogeneityClass::TwoHomogeneous, Arc::new(SquareGain)).unwrap()
    }

    fn identity_readout() -> AffineReadout {
        AffineReadout::new(vec![1.0], 0.0).unwrap()
    }

    #[test]
    fn single_step_by_hand() {
        let p = ParamTensor::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let t = forward(&p, &square_gain(), &[1.0]).unwrap();
        assert_eq!(t.output(), &[2.0]);
        assert_eq!(t.state(0), &[1.0]);
    }

    #[test]
    fn two_layer_scalar_recurrence() {
        // independent scalar recurrence
        let (theta0, theta1) = ([1.0f64, 2.0], [0.0f64, 1.0]);
        let mut z = 1.0f64;
        z += (theta0.iter().map(|t| t * t).sum::<f64>() * z) / 4.0;
        assert_eq!(z, 2.25);
        z += (theta1.iter().map(|t| t * t).sum::<f64>() * z) / 4.0;
        assert_eq!(z, 2.8125);

        let p = ParamTensor::from_vec(2, 2, 1, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let t = forward(&p, &square_gain(), &[1.0]).unwrap();
        assert_eq!(t.output(), &[2.8125]);
    }

    #[test]
    fn zero_activation_is_identity() {
        let spec = make_zero(3, 2);
        let p = ParamTensor::from_vec(4, 3, 2, vec![0.7; 24]).unwrap();
        let x = [0.1, -0.2, 0.3];
        let t = adjoint(&p, &spec, &x, 0.5, &AffineReadout::new(vec![1.0, 2.0, -1.0], 0.25).unwrap()).unwrap();
        assert_eq!(t.output(), &x);
        let g = 0.1 - 0.4 - 0.3 + 0.25;
        for l in 0..4 {
            let c = t.costate(l).unwrap();
            assert_eq!(c, &[(g - 0.5) * 1.0, (g - 0.5) * 2.0, -(g - 0.5)]);
        }
    }

    #[test]
    fn hand_adjoint_two_layers() {
        let p = ParamTensor::from_vec(2, 1, 1, vec![1.0, 1.0]).unwrap();
        let t = adjoint(&p, &square_gain(), &[1.0], 0.0, &identity_readout()).unwrap();
        assert_eq!(t.output(), &[2.25]);
        assert_eq!(t.costate(1).unwrap(), &[2.25]);
        assert_eq!(t.costate(0).unwrap(), &[3.375]);
    }

    #[test]
    fn perfect_fit_has_zero_costates_and_gradient() {
        let spec = square_gain();
        let p = ParamTensor::from_vec(3, 2, 1, vec![0.3, -0.5, 0.2, 0.9, -0.1, 0.4]).unwrap();
        let xs = vec![0.2, -0.7, 0.5];
        let ys: Vec<f64> = xs.iter().map(|x| forward(&p, &spec, &[*x]).unwrap().output()[0]).collect();
        let data = Dataset::new(1, xs, ys, identity_readout(), 1.0).unwrap();
        assert_eq!(loss(&p, &spec, &data).unwrap(), 0.0);
        let g = gradient(&p, &spec, &data).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
        let next = flow_step(&p, &spec, &data, 0.1).unwrap();
        assert_eq!(next, p);
        let t = adjoint(&p, &spec, &[0.2], data.label(0), data.readout()).unwrap();
        for l in 0..3 {
            assert_eq!(t.costate(l).unwrap(), &[0.0]);
        }
    }

    #[test]
    fn loss_arithmetic() {
        let spec = make_zero(1, 1);
        let p = ParamTensor::from_vec(1, 1, 1, vec![0.0]).unwrap();
        let single = Dataset::new(1, vec![1.0], vec![0.0], identity_readout(), 1.0).unwrap();
        assert_eq!(loss(&p, &spec, &single).unwrap(), 0.5);
        let two = Dataset::new(1, vec![1.0, 0.5], vec![0.0, 3.5], identity_readout(), 1.0).unwrap();
        assert_eq!(loss(&p, &spec, &two).unwrap(), 2.5);
    }

    #[test]
    fn euler_step_moves_by_scaled_gradient() {
        let spec = square_gain();
        let p = ParamTensor::from_vec(2, 3, 1, vec![0.3, -0.5, 0.2, 0.9, -0.1, 0.4]).unwrap();
        let data = Dataset::new(1, vec![0.5, -0.25], vec![1.0, 0.0], identity_readout(), 1.0).unwrap();
        let g = gradient(&p, &spec, &data).unwrap();
        let next = flow_step(&p, &spec, &data, 0.1).unwrap();
        for i in 0..6 {
            assert_relative_eq!(
                next.as_slice()[i],
                p.as_slice()[i] - 0.1 * 6.0 * g.as_slice()[i],
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn duplicated_columns_leave_states_bitwise_equal() {
        let spec = crate::activation::make_generic_tanh(2);
        let vals: Vec<f64> = (0..3 * 2 * 5).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let p = ParamTensor::from_vec(3, 2, 5, vals).unwrap();
        let x = [0.3, -0.6];
        let a = forward(&p, &spec, &x).unwrap();
        let b = forward(&p.duplicated_columns(), &spec, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn costates_scale_with_mismatch() {
        let spec = crate::activation::make_generic_tanh(2);
        let vals: Vec<f64> = (0..4 * 3 * 5).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect();
        let p = ParamTensor::from_vec(4, 3, 5, vals).unwrap();
        let readout = AffineReadout::new(vec![0.5, -1.0], 0.0).unwrap();
        let x = [0.2, 0.4];
        let out = readout.eval(forward(&p, &spec, &x).unwrap().output());
        let base = adjoint(&p, &spec, &x, out - 1.0, &readout).unwrap();
        for c in [2.0, -0.5, 4.0] {
            let scaled = adjoint(&p, &spec, &x, out - c, &readout).unwrap();
            for l in 0..4 {
                let (a, b) = (base.costate(l).unwrap(), scaled.costate(l).unwrap());
                for (u, v) in a.iter().zip(b) {
                    assert_relative_eq!(c * u, *v, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_budget_records_only_initial_loss() {
        let spec = square_gain();
        let p = ParamTensor::from_vec(1, 1, 1, vec![0.5]).unwrap();
        let data = Dataset::new(1, vec![0.5], vec![1.0], identity_readout(), 1.0).unwrap();
        let curve = train(&p, &spec, &data, 0.0, 1e-3, 10).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!(curve.first().unwrap().s, 0.0);
    }

    #[test]
    fn blow_up_reports_layer() {
        let spec = square_gain();
        let p = ParamTensor::from_vec(3, 1, 1, vec![1.0, 1e5, 1.0]).unwrap();
        let err = forward(&p, &spec, &[1.0]).unwrap_err();
        assert_eq!(err, Error::BlowUp { stage: "forward", index: 2 });
    }

    #[test]
    fn rejects_nonpositive_step() {
        let spec = square_gain();
        let p = ParamTensor::from_vec(1, 1, 1, vec![0.5]).unwrap();
        let data = Dataset::new(1, vec![0.5], vec![1.0], identity_readout(), 1.0).unwrap();
        assert!(flow_step(&p, &spec, &data, 0.0).is_err());
        assert!(flow_step(&p, &spec, &data, -1.0).is_err());
    }
}
