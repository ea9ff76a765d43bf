//! Shared test-only oracles: central finite differences against analytic
//! gradients. Kept independent of the engine's backward path — everything
//! here evaluates losses as black boxes.

use crate::params::ParameterVector;
use crate::rng::stream_rng;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error between a finite-difference estimate and an analytic value.
pub fn rel_err(fd: f64, analytic: f64) -> f64 {
    let scale = fd.abs().max(analytic.abs()).max(1e-8);
    (fd - analytic).abs() / scale
}

/// Central finite difference of `loss` along coordinate `idx`.
pub fn fd_coordinate<F>(params: &ParameterVector, idx: usize, loss: &mut F) -> f64
where
    F: FnMut(&ParameterVector) -> f64,
{
    let mut plus = params.clone();
    plus.values_mut()[idx] += FD_STEP;
    let mut minus = params.clone();
    minus.values_mut()[idx] -= FD_STEP;
    (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
}

/// Central finite difference of `loss` along an arbitrary direction.
pub fn fd_directional<F>(params: &ParameterVector, direction: &[f64], loss: &mut F) -> f64
where
    F: FnMut(&ParameterVector) -> f64,
{
    let mut plus = params.clone();
    let mut minus = params.clone();
    for ((p, m), d) in plus
        .values_mut()
        .iter_mut()
        .zip(minus.values_mut())
        .zip(direction)
    {
        *p += FD_STEP * d;
        *m -= FD_STEP * d;
    }
    (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
}

/// Check analytic gradients against finite differences: one random
/// directional derivative plus `coords_per_segment` sampled coordinates from
/// every segment eligible under `include_coord`. Panics with context on any
/// relative error above `tol`.
pub fn assert_grad_matches_fd<F, G>(
    params: &ParameterVector,
    grads: &ParameterVector,
    mut loss: F,
    include_coord: G,
    coords_per_segment: usize,
    tol: f64,
    seed: u64,
) where
    F: FnMut(&ParameterVector) -> f64,
    G: Fn(usize) -> bool,
{
    let mut rng = stream_rng(seed, &[0xfd]);
    // Directional derivative over the eligible coordinates.
    let mut direction = vec![0.0; params.len()];
    for (i, d) in direction.iter_mut().enumerate() {
        if include_coord(i) {
            *d = rng.gen_range(-1.0..1.0);
        }
    }
    let norm = crate::math::l2_norm(&direction);
    if norm > 0.0 {
        for d in &mut direction {
            *d /= norm;
        }
        let fd = fd_directional(params, &direction, &mut loss);
        let analytic = crate::math::dot(grads.values(), &direction);
        let err = rel_err(fd, analytic);
        assert!(
            err <= tol,
            "directional derivative mismatch: fd={fd}, analytic={analytic}, rel_err={err}"
        );
    }
    // Per-segment coordinate samples.
    for seg in params.layout().segments() {
        for _ in 0..coords_per_segment {
            let idx = seg.offset + rng.gen_range(0..seg.len);
            if !include_coord(idx) {
                continue;
            }
            let fd = fd_coordinate(params, idx, &mut loss);
            let analytic = grads.values()[idx];
            // Skip structurally dead coordinates (e.g. a conv bias feeding a
            // batch norm); the threshold sits above central-difference noise.
            if fd.abs() < 1e-7 && analytic.abs() < 1e-7 {
                continue;
            }
            let err = rel_err(fd, analytic);
            assert!(
                err <= tol,
                "coordinate {} ({}) mismatch: fd={fd}, analytic={analytic}, rel_err={err}",
                idx,
                seg.name
            );
        }
    }
}
