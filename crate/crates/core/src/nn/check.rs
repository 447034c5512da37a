//! Finite-difference verification of parameter gradients.

use super::params::{Bound, ParamId, ParamStore};
use crate::autograd::{Tape, Var};

/// Worst relative error between the analytic gradient of `loss` and central
/// differences with step `h`, over the listed `(tensor, flat index)`
/// coordinates. Magnitudes below `floor` are compared absolutely.
pub fn param_gradient_error<L>(store: &ParamStore<f64>, coords: &[(ParamId, usize)], h: f64, floor: f64, loss: L) -> f64
where
    L: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let grads = bound.grads(&loss(&tape, &bound).backward());

    let mut work = store.clone();
    let mut eval = |id: ParamId, idx: usize, delta: f64| {
        let slot = &mut work.get_mut(id).as_slice_mut().expect("standard layout")[idx];
        let orig = *slot;
        *slot = orig + delta;
        let tape = Tape::inference();
        let value = loss(&tape, &work.bind(&tape, false)).item();
        work.get_mut(id).as_slice_mut().expect("standard layout")[idx] = orig;
        value
    };
    let mut worst: f64 = 0.0;
    for &(id, idx) in coords {
        let numeric = (eval(id, idx, h) - eval(id, idx, -h)) / (2.0 * h);
        let analytic = grads[id.0].as_slice().expect("standard layout")[idx];
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

/// Every coordinate of every tensor in `store`.
pub fn all_coords<F: crate::autograd::Real>(store: &ParamStore<F>) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, _, v)| (0..v.len()).map(move |i| (id, i)))
        .collect()
}
