//! Activation families `f(z, θ)`: value, both Jacobians, and runtime checks
//! of the growth, Jacobian and homogeneity properties.
//!
//! Jacobians are stored row-major: `jac_z` is `d × d` with entry `(i, j)` =
//! `∂f_i/∂z_j`, `jac_theta` is `d × k` with entry `(i, j)` = `∂f_i/∂θ_j`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{norm, rel_max_err};

/// Names accepted by [`ActivationSpec::from_name`].
pub const ACTIVATION_NAMES: &[&str] = &["two_homog", "partial_one_homog", "generic_tanh", "linear", "zero"];

/// Default regularization width of the smoothed ReLU.
pub const DEFAULT_ETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HomogeneityClass {
    /// `f(x, λθ) = λ² f(x, θ)`.
    TwoHomogeneous,
    /// `f(x, (θ₁, θ₂)) = θ₁ f(x, (1, θ₂))` with scalar `θ₁`.
    PartiallyOneHomogeneous,
    Generic,
}

/// A concrete activation function. Implementors must fill `out` completely.
pub trait Activation: Send + Sync {
    fn eval(&self, z: &[f64], theta: &[f64], out: &mut [f64]);
    fn jac_z(&self, z: &[f64], theta: &[f64], out: &mut [f64]);
    fn jac_theta(&self, z: &[f64], theta: &[f64], out: &mut [f64]);

    /// `out += (∂z f)ᵀ p`.
    fn add_vjp_z(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let d = z.len();
        let mut jac = vec![0.0; d * d];
        self.jac_z(z, theta, &mut jac);
        for (i, &pi) in p.iter().enumerate() {
            let row = &jac[i * d..(i + 1) * d];
            for (o, &j) in out.iter_mut().zip(row) {
                *o += pi * j;
            }
        }
    }

    /// `out += (∂θ f)ᵀ p`.
    fn add_vjp_theta(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let k = theta.len();
        let mut jac = vec![0.0; z.len() * k];
        self.jac_theta(z, theta, &mut jac);
        for (i, &pi) in p.iter().enumerate() {
            let row = &jac[i * k..(i + 1) * k];
            for (o, &j) in out.iter_mut().zip(row) {
                *o += pi * j;
            }
        }
    }
}

/// An activation bound to its dimensions and homogeneity class.
///
/// Cheap to clone; the underlying function is shared and immutable.
#[derive(Clone)]
pub struct ActivationSpec {
    name: String,
    d: usize,
    k: usize,
    k1: usize,
    class: HomogeneityClass,
    func: Arc<dyn Activation>,
}

impl fmt::Debug for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActivationSpec")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("k", &self.k)
            .field("k1", &self.k1)
            .field("class", &self.class)
            .finish()
    }
}

impl ActivationSpec {
    /// Wraps a user-supplied activation.
    pub fn custom(
        name: impl Into<String>,
        d: usize,
        k: usize,
        k1: usize,
        class: HomogeneityClass,
        func: Arc<dyn Activation>,
    ) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("d and k must be positive, got d={d}, k={k}")));
        }
        if k1 == 0 || k1 > k {
            return Err(Error::InvalidArgument(format!("k1 must lie in [1, {k}], got {k1}")));
        }
        if class == HomogeneityClass::PartiallyOneHomogeneous && k1 != 1 {
            return Err(Error::InvalidArgument("partially 1-homogeneous activations need k1 = 1".into()));
        }
        Ok(Self { name: name.into(), d, k, k1, class, func })
    }

    /// Looks up a built-in activation by its config name.
    pub fn from_name(name: &str, d: usize, eta: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("d must be positive".into()));
        }
        match name {
            "two_homog" => Ok(make_two_homogeneous(d)),
            "partial_one_homog" => make_partially_one_homogeneous(d, eta),
            "generic_tanh" => Ok(make_generic_tanh(d)),
            "linear" => Ok(make_linear(d)),
            "zero" => Ok(make_zero(d, 1)),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?}; valid names: {}",
                ACTIVATION_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn k1(&self) -> usize {
        self.k1
    }
    pub fn class(&self) -> HomogeneityClass {
        self.class
    }

    #[inline]
    pub fn eval(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.d);
        debug_assert_eq!(theta.len(), self.k);
        self.func.eval(z, theta, out)
    }

    pub fn jac_z(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d * self.d);
        self.func.jac_z(z, theta, out)
    }

    pub fn jac_theta(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d * self.k);
        self.func.jac_theta(z, theta, out)
    }

    #[inline]
    pub fn add_vjp_z(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        self.func.add_vjp_z(z, theta, p, out)
    }

    #[inline]
    pub fn add_vjp_theta(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        self.func.add_vjp_theta(z, theta, p, out)
    }

    pub fn eval_vec(&self, z: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.eval(z, theta, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// 2-homogeneous: f(x, θ) = σ(A x + b) exp(-|x|²), σ(u) = max(u, 0)²

#[derive(Debug)]
struct TwoHomogeneous {
    d: usize,
}

#[inline]
fn relu_sq(u: f64) -> f64 {
    let r = u.max(0.0);
    r * r
}

#[inline]
fn relu_sq_prime(u: f64) -> f64 {
    2.0 * u.max(0.0)
}

impl TwoHomogeneous {
    // θ = (A row-major d×d, b); returns pre-activation u = A z + b.
    fn preact(&self, z: &[f64], theta: &[f64], u: &mut [f64]) {
        let d = self.d;
        let (a, b) = theta.split_at(d * d);
        for i in 0..d {
            let row = &a[i * d..(i + 1) * d];
            u[i] = row.iter().zip(z).map(|(aij, zj)| aij * zj).sum::<f64>() + b[i];
        }
    }
}

impl Activation for TwoHomogeneous {
    fn eval(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        self.preact(z, theta, out);
        let damp = (-z.iter().map(|v| v * v).sum::<f64>()).exp();
        for o in out.iter_mut() {
            *o = relu_sq(*o) * damp;
        }
    }

    fn jac_z(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.d;
        let mut u = vec![0.0; d];
        self.preact(z, theta, &mut u);
        let damp = (-z.iter().map(|v| v * v).sum::<f64>()).exp();
        let a = &theta[..d * d];
        for i in 0..d {
            let s = relu_sq(u[i]);
            let sp = relu_sq_prime(u[i]);
            for j in 0..d {
                out[i * d + j] = damp * (sp * a[i * d + j] - 2.0 * s * z[j]);
            }
        }
    }

    fn jac_theta(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.d;
        let k = d * d + d;
        let mut u = vec![0.0; d];
        self.preact(z, theta, &mut u);
        let damp = (-z.iter().map(|v| v * v).sum::<f64>()).exp();
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            let sp = relu_sq_prime(u[i]) * damp;
            for j in 0..d {
                out[i * k + i * d + j] = sp * z[j];
            }
            out[i * k + d * d + i] = sp;
        }
    }

    fn add_vjp_z(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let d = self.d;
        let mut u = vec![0.0; d];
        self.preact(z, theta, &mut u);
        let damp = (-z.iter().map(|v| v * v).sum::<f64>()).exp();
        let a = &theta[..d * d];
        let mut ps = 0.0;
        for i in 0..d {
            let w = p[i] * relu_sq_prime(u[i]) * damp;
            ps += p[i] * relu_sq(u[i]);
            if w != 0.0 {
                for j in 0..d {
                    out[j] += w * a[i * d + j];
                }
            }
        }
        let c = -2.0 * damp * ps;
        for j in 0..d {
            out[j] += c * z[j];
        }
    }

    fn add_vjp_theta(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let d = self.d;
        let mut u = vec![0.0; d];
        self.preact(z, theta, &mut u);
        let damp = (-z.iter().map(|v| v * v).sum::<f64>()).exp();
        for i in 0..d {
            let w = p[i] * relu_sq_prime(u[i]) * damp;
            if w == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += w * z[j];
            }
            out[d * d + i] += w;
        }
    }
}

/// The 2-homogeneous activation `σ(θ_A x + θ_b)·exp(−|x|²)` with
/// `σ(u) = max(u, 0)²`; `θ = (θ_A ∈ ℝ^{d×d}, θ_b ∈ ℝ^d)`, so `k = d² + d`.
///
/// Homogeneity holds for `λ ≥ 0`; `σ` is one-sided, so negative `λ` does not
/// reproduce `λ² f`.
pub fn make_two_homogeneous(d: usize) -> ActivationSpec {
    let k = d * d + d;
    ActivationSpec {
        name: "two_homog".into(),
        d,
        k,
        k1: k,
        class: HomogeneityClass::TwoHomogeneous,
        func: Arc::new(TwoHomogeneous { d }),
    }
}

// ---------------------------------------------------------------------------
// Partially 1-homogeneous: f = θ₁ σ_η(φ(θ_W) x + φ(θ_c)), φ(v) = v tanh|v| / |v|

/// Smoothed ReLU: 0 below `−η`, `(u+η)²/(4η)` on `[−η, η]`, `u` above `η`.
pub fn smooth_relu(u: f64, eta: f64) -> f64 {
    if u < -eta {
        0.0
    } else if u <= eta {
        (u + eta) * (u + eta) / (4.0 * eta)
    } else {
        u
    }
}

pub fn smooth_relu_prime(u: f64, eta: f64) -> f64 {
    if u < -eta {
        0.0
    } else if u <= eta {
        (u + eta) / (2.0 * eta)
    } else {
        1.0
    }
}

// q(r) = tanh(r)/r, extended by q(0) = 1.
fn sat_ratio(r: f64) -> f64 {
    if r < 1e-4 {
        1.0 - r * r / 3.0
    } else {
        r.tanh() / r
    }
}

// q'(r)/r, with the small-r series -2/3 + 8r²/15.
fn sat_ratio_slope(r: f64) -> f64 {
    if r < 1e-3 {
        -2.0 / 3.0 + 8.0 * r * r / 15.0
    } else {
        let c = r.cosh();
        (r / (c * c) - r.tanh()) / (r * r * r)
    }
}

#[derive(Debug)]
struct PartialOneHomogeneous {
    d: usize,
    eta: f64,
}

struct SaturatedBlock {
    scale: f64,
    slope: f64,
}

impl SaturatedBlock {
    fn new(v: &[f64]) -> Self {
        let r = norm(v);
        Self { scale: sat_ratio(r), slope: sat_ratio_slope(r) }
    }
}

impl PartialOneHomogeneous {
    // Layout: θ = (θ₁, θ_W row-major d×d, θ_c ∈ ℝ^d).
    fn split<'a>(&self, theta: &'a [f64]) -> (f64, &'a [f64], &'a [f64]) {
        let d = self.d;
        (theta[0], &theta[1..1 + d * d], &theta[1 + d * d..])
    }

    fn preact(&self, z: &[f64], w: &[f64], c: &[f64], bw: &SaturatedBlock, bc: &SaturatedBlock, u: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let row = &w[i * d..(i + 1) * d];
            let wz: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            u[i] = bw.scale * wz + bc.scale * c[i];
        }
    }
}

impl Activation for PartialOneHomogeneous {
    fn eval(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let (t1, w, c) = self.split(theta);
        let (bw, bc) = (SaturatedBlock::new(w), SaturatedBlock::new(c));
        self.preact(z, w, c, &bw, &bc, out);
        for o in out.iter_mut() {
            *o = t1 * smooth_relu(*o, self.eta);
        }
    }

    fn jac_z(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (t1, w, c) = self.split(theta);
        let (bw, bc) = (SaturatedBlock::new(w), SaturatedBlock::new(c));
        let mut u = vec![0.0; d];
        self.preact(z, w, c, &bw, &bc, &mut u);
        for i in 0..d {
            let g = t1 * smooth_relu_prime(u[i], self.eta) * bw.scale;
            for j in 0..d {
                out[i * d + j] = g * w[i * d + j];
            }
        }
    }

    fn jac_theta(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.d;
        let k = 1 + d * d + d;
        let (t1, w, c) = self.split(theta);
        let (bw, bc) = (SaturatedBlock::new(w), SaturatedBlock::new(c));
        let mut u = vec![0.0; d];
        self.preact(z, w, c, &bw, &bc, &mut u);
        let wz: Vec<f64> = (0..d).map(|i| w[i * d..(i + 1) * d].iter().zip(z).map(|(a, b)| a * b).sum()).collect();
        for i in 0..d {
            let row = &mut out[i * k..(i + 1) * k];
            row[0] = smooth_relu(u[i], self.eta);
            let g = t1 * smooth_relu_prime(u[i], self.eta);
            // ∂u_i/∂W_ab = q δ_ia z_b + (W z)_i W_ab q'/r
            for a in 0..d {
                for b in 0..d {
                    let mut du = bw.slope * wz[i] * w[a * d + b];
                    if a == i {
                        du += bw.scale * z[b];
                    }
                    row[1 + a * d + b] = g * du;
                }
            }
            // ∂u_i/∂c_a = q δ_ia + c_i c_a q'/r
            for a in 0..d {
                let mut du = bc.slope * c[i] * c[a];
                if a == i {
                    du += bc.scale;
                }
                row[1 + d * d + a] = g * du;
            }
        }
    }

    fn add_vjp_z(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (t1, w, c) = self.split(theta);
        let (bw, bc) = (SaturatedBlock::new(w), SaturatedBlock::new(c));
        let mut u = vec![0.0; d];
        self.preact(z, w, c, &bw, &bc, &mut u);
        for i in 0..d {
            let g = p[i] * t1 * smooth_relu_prime(u[i], self.eta) * bw.scale;
            if g == 0.0 {
                continue;
            }
            for j in 0..d {
                out[j] += g * w[i * d + j];
            }
        }
    }

    fn add_vjp_theta(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (t1, w, c) = self.split(theta);
        let (bw, bc) = (SaturatedBlock::new(w), SaturatedBlock::new(c));
        let mut u = vec![0.0; d];
        self.preact(z, w, c, &bw, &bc, &mut u);
        // h_i = p_i θ₁ σ'(u_i) is the sensitivity of pᵀf to u_i.
        let mut h = vec![0.0; d];
        for i in 0..d {
            out[0] += p[i] * smooth_relu(u[i], self.eta);
            h[i] = p[i] * t1 * smooth_relu_prime(u[i], self.eta);
        }
        let mut hwz = 0.0;
        for i in 0..d {
            let wz: f64 = w[i * d..(i + 1) * d].iter().zip(z).map(|(a, b)| a * b).sum();
            hwz += h[i] * wz;
        }
        let hc: f64 = h.iter().zip(c).map(|(a, b)| a * b).sum();
        for a in 0..d {
            for b in 0..d {
                out[1 + a * d + b] += bw.scale * h[a] * z[b] + bw.slope * hwz * w[a * d + b];
            }
        }
        for a in 0..d {
            out[1 + d * d + a] += bc.scale * h[a] + bc.slope * hc * c[a];
        }
    }
}

/// The partially 1-homogeneous activation
/// `θ₁·σ_η(φ(θ_W) x + φ(θ_c))` with `φ(v) = v·tanh(|v|)/|v|` and the smoothed
/// ReLU `σ_η`. `θ₁` is a scalar, so `k = 1 + d² + d` and `k1 = 1`.
pub fn make_partially_one_homogeneous(d: usize, eta: f64) -> Result<ActivationSpec> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidArgument(format!("eta must lie in (0, 1], got {eta}")));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("d must be positive".into()));
    }
    Ok(ActivationSpec {
        name: "partial_one_homog".into(),
        d,
        k: 1 + d * d + d,
        k1: 1,
        class: HomogeneityClass::PartiallyOneHomogeneous,
        func: Arc::new(PartialOneHomogeneous { d, eta }),
    })
}

// ---------------------------------------------------------------------------
// Conventional residual unit: f = u tanh(wᵀz + b), θ = (w, u, b)

#[derive(Debug)]
struct GenericTanh {
    d: usize,
}

impl GenericTanh {
    fn act(&self, z: &[f64], theta: &[f64]) -> f64 {
        let d = self.d;
        let w = &theta[..d];
        (w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + theta[2 * d]).tanh()
    }
}

impl Activation for GenericTanh {
    fn eval(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let t = self.act(z, theta);
        let u = &theta[self.d..2 * self.d];
        for (o, ui) in out.iter_mut().zip(u) {
            *o = ui * t;
        }
    }

    fn jac_z(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.d;
        let t = self.act(z, theta);
        let s = 1.0 - t * t;
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = theta[d + i] * s * theta[j];
            }
        }
    }

    fn jac_theta(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = self.d;
        let k = 2 * d + 1;
        let t = self.act(z, theta);
        let s = 1.0 - t * t;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            let ui = theta[d + i];
            for j in 0..d {
                out[i * k + j] = ui * s * z[j];
            }
            out[i * k + d + i] = t;
            out[i * k + 2 * d] = ui * s;
        }
    }

    fn add_vjp_z(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let d = self.d;
        let t = self.act(z, theta);
        let pu: f64 = p.iter().zip(&theta[d..2 * d]).map(|(a, b)| a * b).sum();
        let c = pu * (1.0 - t * t);
        for j in 0..d {
            out[j] += c * theta[j];
        }
    }

    fn add_vjp_theta(&self, z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        let d = self.d;
        let t = self.act(z, theta);
        let pu: f64 = p.iter().zip(&theta[d..2 * d]).map(|(a, b)| a * b).sum();
        let c = pu * (1.0 - t * t);
        for j in 0..d {
            out[j] += c * z[j];
            out[d + j] += p[j] * t;
        }
        out[2 * d] += c;
    }
}

/// `f(z, θ) = u·tanh(wᵀz + b)` with `θ = (w, u, b)`, `k = 2d + 1`.
pub fn make_generic_tanh(d: usize) -> ActivationSpec {
    let k = 2 * d + 1;
    ActivationSpec {
        name: "generic_tanh".into(),
        d,
        k,
        k1: k,
        class: HomogeneityClass::Generic,
        func: Arc::new(GenericTanh { d }),
    }
}

// ---------------------------------------------------------------------------
// Linear test activation: f(z, θ) = θ ⊙ z, k = d

#[derive(Debug)]
struct Linear;

impl Activation for Linear {
    fn eval(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        for ((o, t), zi) in out.iter_mut().zip(theta).zip(z) {
            *o = t * zi;
        }
    }

    fn jac_z(&self, z: &[f64], theta: &[f64], out: &mut [f64]) {
        let d = z.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            out[i * d + i] = theta[i];
        }
    }

    fn jac_theta(&self, z: &[f64], _theta: &[f64], out: &mut [f64]) {
        let d = z.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            out[i * d + i] = z[i];
        }
    }

    fn add_vjp_z(&self, _z: &[f64], theta: &[f64], p: &[f64], out: &mut [f64]) {
        for ((o, t), pi) in out.iter_mut().zip(theta).zip(p) {
            *o += t * pi;
        }
    }

    fn add_vjp_theta(&self, z: &[f64], _theta: &[f64], p: &[f64], out: &mut [f64]) {
        for ((o, zi), pi) in out.iter_mut().zip(z).zip(p) {
            *o += zi * pi;
        }
    }
}

/// Componentwise linear activation `f(z, θ) = θ ⊙ z` (`k = d`). Its
/// state and costate ODEs have closed forms, which makes it the reference
/// problem for solver-order and dissipation checks.
pub fn make_linear(d: usize) -> ActivationSpec {
    ActivationSpec { name: "linear".into(), d, k: d, k1: d, class: HomogeneityClass::Generic, func: Arc::new(Linear) }
}

#[derive(Debug)]
struct Zero;

impl Activation for Zero {
    fn eval(&self, _z: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn jac_z(&self, _z: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn jac_theta(&self, _z: &[f64], _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn add_vjp_z(&self, _z: &[f64], _theta: &[f64], _p: &[f64], _out: &mut [f64]) {}
    fn add_vjp_theta(&self, _z: &[f64], _theta: &[f64], _p: &[f64], _out: &mut [f64]) {}
}

/// `f ≡ 0`: the identity residual network.
pub fn make_zero(d: usize, k: usize) -> ActivationSpec {
    ActivationSpec { name: "zero".into(), d, k, k1: k, class: HomogeneityClass::Generic, func: Arc::new(Zero) }
}

// ---------------------------------------------------------------------------
// Assumption checks

/// Relative finite-difference step for an argument of magnitude `|arg|`.
pub fn fd_step(arg: f64) -> f64 {
    1e-5 * (1.0 + arg.abs())
}

/// Central-difference Jacobian of `f` in `z` (`wrt_theta = false`) or `θ`.
pub fn fd_jacobian(spec: &ActivationSpec, z: &[f64], theta: &[f64], wrt_theta: bool) -> Vec<f64> {
    let d = spec.d();
    let n = if wrt_theta { spec.k() } else { d };
    let mut jac = vec![0.0; d * n];
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let shifted = |j: usize, delta: f64| {
        let (mut zs, mut ts) = (z.to_vec(), theta.to_vec());
        let arg = if wrt_theta { &mut ts } else { &mut zs };
        arg[j] += delta;
        let at = arg[j];
        (zs, ts, at)
    };
    for j in 0..n {
        let h = fd_step(if wrt_theta { theta[j] } else { z[j] });
        let (zp, tp, plus) = shifted(j, h);
        let (zm, tm, minus) = shifted(j, -h);
        spec.eval(&zp, &tp, &mut fp);
        spec.eval(&zm, &tm, &mut fm);
        let width = plus - minus;
        for i in 0..d {
            jac[i * n + j] = (fp[i] - fm[i]) / width;
        }
    }
    jac
}

/// Sampling boxes for [`verify_assumptions`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProbeBox {
    /// Coordinates of `x` drawn uniformly from `[-x_box, x_box]`.
    pub x_box: f64,
    pub theta_box: f64,
    /// Homogeneity scales drawn from `[0, lambda_max]`.
    pub lambda_max: f64,
}

impl Default for ProbeBox {
    fn default() -> Self {
        Self { x_box: 2.0, theta_box: 2.0, lambda_max: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub activation: String,
    pub probes: usize,
    /// `None` for [`HomogeneityClass::Generic`].
    pub homogeneity_violation: Option<f64>,
    pub jac_z_error: f64,
    pub jac_theta_error: f64,
    /// Fitted `C₁` in `|f| ≤ C₁(|θ|²+1)(|x|+1)`.
    pub growth_constant: f64,
    /// Fitted constants in `|∂x f| ≤ C(|θ|²+1)` and `|∂θ f| ≤ C(|θ|+1)`.
    pub jac_z_growth: f64,
    pub jac_theta_growth: f64,
}

/// Probes the activation at random `(x, θ, λ)` and reports the worst
/// homogeneity violation, Jacobian-vs-finite-difference error, and the
/// smallest growth constants consistent with the probes.
///
/// The homogeneity violation is normwise relative with a floor of
/// `1e-8·λ²(|θ|²+1)(|x|+1)`, so probes where `f` cancels to near zero are
/// measured against the growth envelope instead of against rounding noise.
pub fn verify_assumptions(spec: &ActivationSpec, probes: usize, seed: u64, bounds: ProbeBox) -> AssumptionReport {
    let (d, k, k1) = (spec.d(), spec.k(), spec.k1());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AssumptionReport {
        activation: spec.name().to_string(),
        probes,
        homogeneity_violation: match spec.class() {
            HomogeneityClass::Generic => None,
            _ => Some(0.0),
        },
        jac_z_error: 0.0,
        jac_theta_error: 0.0,
        growth_constant: 0.0,
        jac_z_growth: 0.0,
        jac_theta_growth: 0.0,
    };
    let mut f0 = vec![0.0; d];
    let mut f1 = vec![0.0; d];
    let mut jz = vec![0.0; d * d];
    let mut jt = vec![0.0; d * k];
    for _ in 0..probes {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-bounds.x_box..=bounds.x_box)).collect();
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-bounds.theta_box..=bounds.theta_box)).collect();
        let lambda = rng.random_range(0.0..=bounds.lambda_max);
        let (xn, tn) = (norm(&x), norm(&theta));

        spec.eval(&x, &theta, &mut f0);
        let fnorm = norm(&f0);
        report.growth_constant = report.growth_constant.max(fnorm / ((tn * tn + 1.0) * (xn + 1.0)));

        match spec.class() {
            HomogeneityClass::TwoHomogeneous => {
                let scaled: Vec<f64> = theta.iter().map(|t| lambda * t).collect();
                spec.eval(&x, &scaled, &mut f1);
                let l2 = lambda * lambda;
                let diff = f1.iter().zip(&f0).map(|(a, b)| (a - l2 * b).powi(2)).sum::<f64>().sqrt();
                let floor = 1e-8 * l2 * (tn * tn + 1.0) * (xn + 1.0);
                let v = if diff == 0.0 { 0.0 } else { diff / (l2 * fnorm).max(floor) };
                let h = report.homogeneity_violation.get_or_insert(0.0);
                *h = h.max(v);
            }
            HomogeneityClass::PartiallyOneHomogeneous => {
                let mut unit = theta.clone();
                unit[..k1].iter_mut().for_each(|t| *t = 1.0);
                spec.eval(&x, &unit, &mut f1);
                let diff = f0.iter().zip(&f1).map(|(a, b)| (a - theta[0] * b).powi(2)).sum::<f64>().sqrt();
                let floor = 1e-8 * (tn * tn + 1.0) * (xn + 1.0);
                let v = if diff == 0.0 { 0.0 } else { diff / fnorm.max(floor) };
                let h = report.homogeneity_violation.get_or_insert(0.0);
                *h = h.max(v);
            }
            HomogeneityClass::Generic => {}
        }

        spec.jac_z(&x, &theta, &mut jz);
        spec.jac_theta(&x, &theta, &mut jt);
        let fz = fd_jacobian(spec, &x, &theta, false);
        let ft = fd_jacobian(spec, &x, &theta, true);
        report.jac_z_error = report.jac_z_error.max(rel_max_err(&jz, &fz));
        report.jac_theta_error = report.jac_theta_error.max(rel_max_err(&jt, &ft));
        report.jac_z_growth = report.jac_z_growth.max(norm(&jz) / (tn * tn + 1.0));
        report.jac_theta_growth = report.jac_theta_growth.max(norm(&jt) / (tn + 1.0));
    }
    report
}
