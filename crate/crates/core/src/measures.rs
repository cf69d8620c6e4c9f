//! Equal-weight empirical measures on parameter space: Wasserstein-2 by
//! optimal assignment, the path metrics `d₁`/`d₂`, moments, and the
//! separating initializers.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm, norm_sq};
use crate::odeflow::ParamPathEnsemble;

/// Largest `n` accepted by [`w2_bruteforce`].
pub const BRUTEFORCE_MAX: usize = 8;

/// Name of the generator behind every seeded draw, for run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8";

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    k: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    /// `points` is row-major `n × k`.
    pub fn new(k: usize, points: Vec<f64>) -> Result<Self> {
        if k == 0 || points.is_empty() || !points.len().is_multiple_of(k) {
            return Err(Error::ShapeMismatch(format!("{} values do not form points of dimension {k}", points.len())));
        }
        if !all_finite(&points) {
            return Err(Error::InvalidArgument("measure points must be finite".into()));
        }
        Ok(Self { k, points })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.k
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.k..(i + 1) * self.k]
    }
    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.k)
    }

    pub fn translated(&self, c: &[f64]) -> Result<Self> {
        if c.len() != self.k {
            return Err(Error::ShapeMismatch(format!("shift has length {}, k = {}", c.len(), self.k)));
        }
        let points = self.points.iter().enumerate().map(|(i, v)| v + c[i % self.k]).collect();
        Self::new(self.k, points)
    }

    /// `(1/n) Σ |θ_i|²`.
    pub fn second_moment(&self) -> f64 {
        self.points().map(norm_sq).sum::<f64>() / self.len() as f64
    }
}

/// One empirical slice per depth node, all of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMeasure {
    slices: Vec<EmpiricalMeasure>,
}

impl PathMeasure {
    pub fn new(slices: Vec<EmpiricalMeasure>) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::InvalidArgument("path measure needs a slice".into()))?;
        let (n, k) = (first.len(), first.k);
        if slices.iter().any(|s| s.len() != n || s.k != k) {
            return Err(Error::ShapeMismatch("slices must share size and dimension".into()));
        }
        Ok(Self { slices })
    }

    pub fn from_ensemble(ens: &ParamPathEnsemble) -> Self {
        let slices = (0..ens.nodes())
            .map(|j| {
                let pts = (0..ens.particles()).flat_map(|m| ens.node(m, j).iter().copied()).collect();
                EmpiricalMeasure::new(ens.k(), pts).expect("ensemble values are finite")
            })
            .collect();
        Self { slices }
    }

    pub fn nodes(&self) -> usize {
        self.slices.len()
    }
    pub fn slice(&self, j: usize) -> &EmpiricalMeasure {
        &self.slices[j]
    }

    /// Smallest and largest `|θ|` over all points and nodes.
    pub fn radius_range(&self) -> (f64, f64) {
        self.slices
            .iter()
            .flat_map(|s| s.points())
            .map(norm)
            .fold((f64::INFINITY, 0.0), |(lo, hi), r| (lo.min(r), hi.max(r)))
    }

    /// `max_j W2(slice_j, slice_{j+1})`, a discrete continuity proxy.
    pub fn max_adjacent_w2(&self) -> f64 {
        self.slices.windows(2).map(|w| w2(&w[0], &w[1]).expect("slices share size")).fold(0.0, f64::max)
    }
}

fn cost_matrix(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch { left: a.len(), right: b.len() });
    }
    if a.k != b.k {
        return Err(Error::ShapeMismatch(format!("point dimensions {} and {}", a.k, b.k)));
    }
    let n = a.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    Ok(c)
}

// Minimum-cost perfect assignment on a square cost matrix via shortest
// augmenting paths with row/column potentials. Returns row -> column.
fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    assign
}

// Sum of assigned costs in row order so equal assignments give equal values.
fn assignment_value(n: usize, cost: &[f64], assign: &[usize]) -> f64 {
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (total / n as f64).max(0.0).sqrt()
}

/// Wasserstein-2 distance between equal-size, equal-weight measures.
pub fn w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    let cost = cost_matrix(a, b)?;
    let n = a.len();
    Ok(assignment_value(n, &cost, &hungarian(n, &cost)))
}

/// Exhaustive minimum over all `n!` assignments; `n ≤ 8`.
pub fn w2_bruteforce(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    let n = a.len();
    if n > BRUTEFORCE_MAX {
        return Err(Error::TooLarge { n, max: BRUTEFORCE_MAX });
    }
    let cost = cost_matrix(a, b)?;
    Ok((0..n).permutations(n).map(|perm| assignment_value(n, &cost, &perm)).fold(f64::INFINITY, f64::min))
}

/// `sup_t W2` realized as the maximum over depth nodes.
pub fn d1(pa: &PathMeasure, pb: &PathMeasure) -> Result<f64> {
    if pa.nodes() != pb.nodes() {
        return Err(Error::GridMismatch(format!("{} vs {} depth nodes", pa.nodes(), pb.nodes())));
    }
    pa.slices.iter().zip(&pb.slices).try_fold(0.0, |acc, (a, b)| Ok(f64::max(acc, w2(a, b)?)))
}

/// `d₁` maximized over the recorded training-time snapshots; a lower bound
/// on the supremum over all `s`.
pub fn d2(a: &[PathMeasure], b: &[PathMeasure]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch { left: a.len(), right: b.len() });
    }
    a.iter().zip(b).try_fold(0.0, |acc, (x, y)| Ok(f64::max(acc, d1(x, y)?)))
}

pub fn second_moment(pm: &PathMeasure, j: usize) -> f64 {
    pm.slices[j].second_moment()
}

/// `max |θ_[1]|` over every point and node, `θ_[1]` being the first `k1`
/// coordinates.
pub fn support_radius_theta1(pm: &PathMeasure, k1: usize) -> f64 {
    pm.slices.iter().flat_map(|s| s.points()).map(|p| norm(&p[..k1.min(p.len())])).fold(0.0, f64::max)
}

fn check_init(particles: usize, k: usize, r0: f64, nodes: usize) -> Result<()> {
    if particles == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("M and k must be positive (got {particles}, {k})")));
    }
    if !(r0 > 0.0) || !r0.is_finite() {
        return Err(Error::InvalidArgument(format!("r0 must be positive, got {r0}")));
    }
    if nodes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 depth nodes, got {nodes}")));
    }
    Ok(())
}

/// Depth-constant paths with `θ_m` uniform on the sphere of radius `r0`
/// (normalized Gaussian draws).
pub fn init_separating_sphere(
    particles: usize,
    k: usize,
    r0: f64,
    nodes: usize,
    seed: u64,
) -> Result<ParamPathEnsemble> {
    check_init(particles, k, r0, nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(particles * k);
    for _ in 0..particles {
        let g = loop {
            let g: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            if norm(&g) > 1e-12 {
                break g;
            }
        };
        let r = norm(&g);
        points.extend(g.iter().map(|v| r0 * v / r));
    }
    ParamPathEnsemble::constant(particles, nodes, k, &points)
}

/// Depth-constant paths with `θ_[1] = 0` (the first `k1` coordinates) and
/// the rest uniform in `[−box, box]`.
pub fn init_separating_slab(
    particles: usize,
    k: usize,
    k1: usize,
    theta2_box: f64,
    nodes: usize,
    seed: u64,
) -> Result<ParamPathEnsemble> {
    check_init(particles, k, theta2_box, nodes)?;
    if k1 > k {
        return Err(Error::InvalidArgument(format!("k1 = {k1} exceeds k = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![0.0; particles * k];
    for p in points.chunks_mut(k) {
        for v in &mut p[k1..] {
            *v = rng.random_range(-theta2_box..=theta2_box);
        }
    }
    ParamPathEnsemble::constant(particles, nodes, k, &points)
}

/// I.i.d. Gaussian paths `θ_m(t) = σ ξ_m + σ_t η_m cos(π t)`; smooth in
/// depth with Lipschitz constant `π σ_t |η_m|`.
pub fn init_gaussian_paths(
    particles: usize,
    k: usize,
    scale: f64,
    depth_variation: f64,
    nodes: usize,
    seed: u64,
) -> Result<ParamPathEnsemble> {
    check_init(particles, k, scale, nodes)?;
    if !(depth_variation >= 0.0) {
        return Err(Error::InvalidArgument(format!("depth variation must be nonnegative, got {depth_variation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(particles * nodes * k);
    for _ in 0..particles {
        let xi: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let eta: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..nodes {
            let c = (std::f64::consts::PI * j as f64 / (nodes - 1) as f64).cos();
            values.extend(xi.iter().zip(&eta).map(|(x, e)| scale * x + depth_variation * e * c));
        }
    }
    ParamPathEnsemble::new(particles, nodes, k, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(1, v.to_vec()).unwrap()
    }

    #[test]
    fn two_point_example() {
        assert_eq!(w2(&m1(&[0.0, 1.0]), &m1(&[0.5, 1.5])).unwrap(), 0.5);
        assert_eq!(w2(&m1(&[0.0, 1.0]), &m1(&[1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(matches!(w2(&m1(&[0.0]), &m1(&[0.0, 1.0])), Err(Error::SizeMismatch { .. })));
        let big = m1(&[0.0; 9]);
        assert!(matches!(w2_bruteforce(&big, &big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn single_point_is_distance() {
        let a = EmpiricalMeasure::new(2, vec![0.0, 0.0]).unwrap();
        let b = EmpiricalMeasure::new(2, vec![3.0, 4.0]).unwrap();
        assert_eq!(w2_bruteforce(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn moments_and_radii() {
        let pm = PathMeasure::new(vec![EmpiricalMeasure::new(2, vec![1.0, 0.0, 0.0, 2.0]).unwrap()]).unwrap();
        assert_eq!(second_moment(&pm, 0), 2.5);
        let pm = PathMeasure::new(vec![EmpiricalMeasure::new(3, vec![3.0, 4.0, 100.0]).unwrap()]).unwrap();
        assert_eq!(support_radius_theta1(&pm, 2), 5.0);
    }

    #[test]
    fn d1_shift_at_one_node() {
        let a = PathMeasure::new(vec![m1(&[0.0, 1.0]), m1(&[2.0, 3.0])]).unwrap();
        let b = PathMeasure::new(vec![m1(&[0.0, 1.0]), m1(&[2.5, 3.5])]).unwrap();
        assert_eq!(d1(&a, &b).unwrap(), 0.5);
        assert_eq!(d2(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap(), 0.5);
        assert_eq!(d2(&[a.clone(), a.clone()], &[a.clone(), b]).unwrap(), 0.5);
        let short = PathMeasure::new(vec![m1(&[0.0, 1.0])]).unwrap();
        assert!(d1(&a, &short).is_err());
    }

    #[test]
    fn sphere_init() {
        let ens = init_separating_sphere(50, 4, 1.5, 3, 7).unwrap();
        let pm = PathMeasure::from_ensemble(&ens);
        let (lo, hi) = pm.radius_range();
        assert!((lo - 1.5).abs() <= 1e-12 && (hi - 1.5).abs() <= 1e-12);
        assert!((second_moment(&pm, 1) - 2.25).abs() <= 1e-12);
        assert_eq!(ens, init_separating_sphere(50, 4, 1.5, 3, 7).unwrap());
        assert_eq!(pm.max_adjacent_w2(), 0.0);
    }

    #[test]
    fn slab_init() {
        let (k, b) = (5, 0.8);
        let ens = init_separating_slab(4000, k, 1, b, 2, 3).unwrap();
        let pm = PathMeasure::from_ensemble(&ens);
        assert_eq!(support_radius_theta1(&pm, 1), 0.0);
        let direct: f64 = (0..4000).map(|m| norm_sq(ens.node(m, 0))).sum::<f64>() / 4000.0;
        assert_eq!(second_moment(&pm, 0), direct);
        let expected = (k - 1) as f64 * b * b / 3.0;
        assert!((direct - expected).abs() < 0.05 * expected);
        assert_eq!(ens, init_separating_slab(4000, k, 1, b, 2, 3).unwrap());
    }

    fn measure(n: usize, k: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        prop::collection::vec(-3.0f64..3.0, n * k).prop_map(move |v| EmpiricalMeasure::new(k, v).unwrap())
    }

    fn pair() -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure, EmpiricalMeasure)> {
        (1usize..=6, 1usize..=4).prop_flat_map(|(n, k)| (measure(n, k), measure(n, k), measure(n, k)))
    }

    proptest! {
        #[test]
        fn hungarian_matches_bruteforce((a, b, _) in pair()) {
            let fast = w2(&a, &b).unwrap();
            let slow = w2_bruteforce(&a, &b).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-12, "{} vs {}", fast, slow);
        }

        #[test]
        fn metric_axioms((a, b, c) in pair()) {
            prop_assert_eq!(w2(&a, &a).unwrap(), 0.0);
            let ab = w2(&a, &b).unwrap();
            prop_assert!((ab - w2(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!(w2(&a, &c).unwrap() <= ab + w2(&b, &c).unwrap() + 1e-12);
        }

        #[test]
        fn translation((a, b, _) in pair(), shift in -2.0f64..2.0) {
            let c = vec![shift; a.k()];
            let moved = a.translated(&c).unwrap();
            prop_assert!((w2(&a, &moved).unwrap() - norm(&c)).abs() <= 1e-12);
            let moved_b = b.translated(&c).unwrap();
            prop_assert!((w2(&moved, &moved_b).unwrap() - w2(&a, &b).unwrap()).abs() <= 1e-12);
        }
    }
}
