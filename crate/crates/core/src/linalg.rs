//! Small dense-vector helpers over `&[f64]`.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = (1 - w) a + w b`
#[inline]
pub fn lerp_into(a: &[f64], b: &[f64], w: f64, out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + w * (y - x);
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Groups `n` items (each viewed as a slice) into distinct values.
///
/// Returns `(representative index, multiplicity)` in lexicographic order of
/// the item values. Summing `multiplicity · term(representative)` in this
/// order makes a particle average independent of labelling and exactly
/// invariant under duplicating every item.
pub fn unique_with_counts<'a, F>(n: usize, item: F) -> Vec<(usize, f64)>
where
    F: Fn(usize) -> &'a [f64],
{
    let cmp = |a: usize, b: usize| {
        item(a)
            .iter()
            .zip(item(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp(a, b).then(a.cmp(&b)));
    let mut groups: Vec<(usize, f64)> = Vec::with_capacity(n);
    for idx in order {
        match groups.last_mut() {
            Some((rep, count)) if cmp(*rep, idx).is_eq() => *count += 1.0,
            _ => groups.push((idx, 1.0)),
        }
    }
    groups
}

/// `max|a − b| / max(|a|, |b|)`, zero when the vectors agree exactly.
pub fn rel_max_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        return 0.0;
    }
    let scale = analytic.iter().chain(reference).map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_groups_duplicates_in_value_order() {
        let data = [[2.0, 0.0], [1.0, 5.0], [2.0, 0.0], [1.0, 4.0]];
        let g = unique_with_counts(4, |i| &data[i][..]);
        assert_eq!(g, vec![(3, 1.0), (1, 1.0), (0, 2.0)]);
    }

    #[test]
    fn lerp_endpoints() {
        let mut out = [0.0; 2];
        lerp_into(&[1.0, 2.0], &[3.0, -2.0], 0.0, &mut out);
        assert_eq!(out, [1.0, 2.0]);
        lerp_into(&[1.0, 2.0], &[3.0, -2.0], 0.5, &mut out);
        assert_eq!(out, [2.0, 0.0]);
    }
}
