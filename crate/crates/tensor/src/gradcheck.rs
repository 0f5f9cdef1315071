//! Finite-difference gradient checking primitives.
//!
//! The reference derivative is the central difference
//! (f(x + h) - f(x - h)) / 2h with h = 1e-5 by default, and analytic and
//! numeric values are compared with a scale-aware relative error:
//! |a - n| / max(1, |a|, |n|).

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central difference of a scalar function at `x0`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Scale-aware relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}
