//! Central finite differences and the relative-error measure used to judge them.

use rand::seq::index::sample;
use rand::Rng;

use crate::nnkit::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central difference of `f` along coordinate `i` of a plain vector.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, h: f64, mut f: F) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let fp = f(&p);
    p[i] = x[i] - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Gradient of `f` at `x` by central differences on every coordinate.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    (0..x.len()).map(|i| central_difference(x, i, h, &mut f)).collect()
}

/// Worst relative error between two gradient vectors.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Up to `count` distinct `(param, index)` coordinates drawn uniformly from
/// the flattened store, in a stable order.
pub fn sample_coordinates<R: Rng>(store: &ParamStore, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let flat: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    let mut picks = sample(rng, flat.len(), count.min(flat.len())).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|k| flat[k]).collect()
}

/// Central differences of a loss over selected store coordinates. The
/// store is restored exactly afterwards.
pub fn numeric_param_gradient<F: FnMut(&ParamStore) -> f64>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    mut loss: F,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&(id, i)| {
            let orig = store.flat_get(id, i);
            store.flat_set(id, i, orig + h);
            let fp = loss(store);
            store.flat_set(id, i, orig - h);
            let fm = loss(store);
            store.flat_set(id, i, orig);
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
