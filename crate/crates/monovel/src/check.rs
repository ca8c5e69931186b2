//! Numerical gradient verification.
//!
//! Analytic gradients from the tape are compared against central finite
//! differences of a scalar-valued function. Multi-output blocks are reduced
//! to a scalar by a fixed random linear functional before checking, so a
//! single relative-error number covers every output element.

/// Relative L2 distance `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
///
/// The floor guards against a meaningless blow-up when both vectors are
/// essentially zero.
pub fn rel_l2_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_l2_error: length mismatch");
    let mut d2 = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        d2 += (x - y) * (x - y);
        na2 += x * x;
        nb2 += y * y;
    }
    d2.sqrt() / na2.sqrt().max(nb2.sqrt()).max(1e-12)
}

/// Central-difference gradient of `f` at `x` with the given step size.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let fp = f(&xs);
        xs[i] = orig - step;
        let fm = f(&xs);
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

/// Relative L2 error between an analytic gradient and the central-difference
/// gradient of `f` at `x`.
pub fn fd_rel_error<F: FnMut(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    let fd = central_diff(f, x, step);
    rel_l2_error(analytic, &fd)
}

/// Like [`fd_rel_error`] but restricted to the coordinates in `idxs` — the
/// practical form for blocks with thousands of weights, where a fresh random
/// subset per instance covers the full vector across instances.
pub fn fd_rel_error_subset<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    idxs: &[usize],
    step: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "fd_rel_error_subset: length mismatch");
    let mut xs = x.to_vec();
    let mut fd = Vec::with_capacity(idxs.len());
    let mut ana = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let orig = xs[i];
        xs[i] = orig + step;
        let fp = f(&xs);
        xs[i] = orig - step;
        let fm = f(&xs);
        xs[i] = orig;
        fd.push((fp - fm) / (2.0 * step));
        ana.push(analytic[i]);
    }
    rel_l2_error(&ana, &fd)
}

/// Step size used by gradient checks throughout the crate.
pub const FD_STEP: f64 = 1e-3;

/// Relative-error ceiling for a passing gradient check.
pub const FD_TOL: f64 = 1e-4;
