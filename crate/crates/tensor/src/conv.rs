//! Linear (non-circular) 1-D convolution with two interchangeable backends.
//!
//! `conv1d_naive` is the direct O(I_s * I_t) double sum and serves as the
//! reference the FFT backend is checked against. `conv1d_fft` zero-pads to
//! the next power of two, packs both real inputs into one complex transform
//! (x in the real lane, y in the imaginary lane, spectra separated by
//! Hermitian symmetry), multiplies pointwise, and inverts. Results agree to
//! [`IMAG_TOLERANCE`] absolute.

use num_complex::Complex64;
use thiserror::Error;

use crate::fft::{FftError, FftPlan};

/// Largest tolerated |imaginary| residue when reading real results off the
/// inverse transform; exceeding it indicates a broken transform, so it is
/// asserted rather than returned.
pub const IMAG_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConvError {
    #[error("convolution input '{0}' is empty")]
    EmptyInput(&'static str),
    #[error("plan of size {plan} too small, need {needed}")]
    PlanTooSmall { plan: usize, needed: usize },
    #[error("correlation kernel (len {kernel}) longer than signal (len {signal})")]
    KernelTooLong { kernel: usize, signal: usize },
    #[error(transparent)]
    Fft(#[from] FftError),
}

/// Backend selector for convolution-bearing operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvBackend {
    Naive,
    Fft,
}

impl std::fmt::Display for ConvBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConvBackend::Naive => write!(f, "naive"),
            ConvBackend::Fft => write!(f, "fft"),
        }
    }
}

impl std::str::FromStr for ConvBackend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(ConvBackend::Naive),
            "fft" => Ok(ConvBackend::Fft),
            other => Err(format!("unknown conv backend '{other}' (expected 'naive' or 'fft')")),
        }
    }
}

/// Output length of a linear convolution: I_s + I_t - 1.
pub fn conv_output_len(i_s: usize, i_t: usize) -> usize {
    i_s + i_t - 1
}

/// Direct double-sum convolution: out[n] = sum over a + b = n of x[a] * y[b].
pub fn conv1d_naive(x: &[f64], y: &[f64]) -> Result<Vec<f64>, ConvError> {
    check_nonempty(x, y)?;
    let n_out = conv_output_len(x.len(), y.len());
    let mut out = vec![0.0; n_out];
    for (n, slot) in out.iter_mut().enumerate() {
        let a_lo = n.saturating_sub(y.len() - 1);
        let a_hi = n.min(x.len() - 1);
        let mut acc = 0.0;
        for a in a_lo..=a_hi {
            acc += x[a] * y[n - a];
        }
        *slot = acc;
    }
    Ok(out)
}

/// FFT-backed convolution with a throwaway plan.
pub fn conv1d_fft(x: &[f64], y: &[f64]) -> Result<Vec<f64>, ConvError> {
    check_nonempty(x, y)?;
    let n_out = conv_output_len(x.len(), y.len());
    let plan = FftPlan::new(n_out.next_power_of_two())?;
    conv1d_fft_with_plan(x, y, &plan)
}

/// FFT-backed convolution reusing a caller-provided plan. The plan may be
/// any power of two at least as large as the output length; extra padding
/// does not change a linear convolution.
pub fn conv1d_fft_with_plan(x: &[f64], y: &[f64], plan: &FftPlan) -> Result<Vec<f64>, ConvError> {
    check_nonempty(x, y)?;
    let n_out = conv_output_len(x.len(), y.len());
    let n = plan.size();
    if n < n_out {
        return Err(ConvError::PlanTooSmall {
            plan: n,
            needed: n_out,
        });
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (slot, &v) in buf.iter_mut().zip(x.iter()) {
        slot.re = v;
    }
    for (slot, &v) in buf.iter_mut().zip(y.iter()) {
        slot.im = v;
    }
    plan.fft(&mut buf)?;
    // Z[k] = X[k] + i Y[k] with X, Y spectra of real signals, so
    // X[k] = (Z[k] + conj(Z[n-k])) / 2 and Y[k] = (Z[k] - conj(Z[n-k])) / (2i).
    // The product spectrum is itself Hermitian; fill both halves per pair.
    let mask = n - 1;
    for k in 0..=n / 2 {
        let k2 = (n - k) & mask;
        let zk = buf[k];
        let zk2c = buf[k2].conj();
        let xk = (zk + zk2c) * 0.5;
        let yk = (zk - zk2c) * Complex64::new(0.0, -0.5);
        let pk = xk * yk;
        buf[k] = pk;
        if k2 != k {
            buf[k2] = pk.conj();
        }
    }
    plan.ifft(&mut buf)?;
    let mut out = Vec::with_capacity(n_out);
    let mut worst_im: f64 = 0.0;
    for v in buf.iter().take(n_out) {
        worst_im = worst_im.max(v.im.abs());
        out.push(v.re);
    }
    assert!(
        worst_im < IMAG_TOLERANCE,
        "imaginary residue {worst_im:e} exceeds {IMAG_TOLERANCE:e}"
    );
    Ok(out)
}

/// Valid cross-correlation: out[a] = sum over b of g[a + b] * y[b], with
/// a in 0..(g.len() - y.len() + 1). This is the adjoint of convolution with
/// respect to its first argument and is used by the backward pass.
pub fn correlate(g: &[f64], y: &[f64], backend: ConvBackend) -> Result<Vec<f64>, ConvError> {
    match backend {
        ConvBackend::Naive => correlate_naive(g, y),
        ConvBackend::Fft => {
            let n_conv = conv_output_len(g.len(), y.len());
            let plan = FftPlan::new(n_conv.next_power_of_two())?;
            correlate_fft_with_plan(g, y, &plan)
        }
    }
}

/// Direct double-sum correlation.
pub fn correlate_naive(g: &[f64], y: &[f64]) -> Result<Vec<f64>, ConvError> {
    check_corr_args(g, y)?;
    let n_out = g.len() - y.len() + 1;
    let mut out = vec![0.0; n_out];
    for (a, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (b, &yv) in y.iter().enumerate() {
            acc += g[a + b] * yv;
        }
        *slot = acc;
    }
    Ok(out)
}

/// Correlation via the FFT backend: convolve with the reversed kernel and
/// slice out the valid region.
pub fn correlate_fft_with_plan(g: &[f64], y: &[f64], plan: &FftPlan) -> Result<Vec<f64>, ConvError> {
    check_corr_args(g, y)?;
    let rev: Vec<f64> = y.iter().rev().copied().collect();
    let full = conv1d_fft_with_plan(g, &rev, plan)?;
    let n_out = g.len() - y.len() + 1;
    Ok(full[y.len() - 1..y.len() - 1 + n_out].to_vec())
}

fn check_nonempty(x: &[f64], y: &[f64]) -> Result<(), ConvError> {
    if x.is_empty() {
        return Err(ConvError::EmptyInput("x"));
    }
    if y.is_empty() {
        return Err(ConvError::EmptyInput("y"));
    }
    Ok(())
}

fn check_corr_args(g: &[f64], y: &[f64]) -> Result<(), ConvError> {
    check_nonempty(g, y)?;
    if y.len() > g.len() {
        return Err(ConvError::KernelTooLong {
            kernel: y.len(),
            signal: g.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_is_identity() {
        let x = [3.0, -1.0, 2.5, 0.5];
        let out = conv1d_naive(&[1.0], &x).unwrap();
        assert_eq!(out, x.to_vec());
        let out = conv1d_fft(&x, &[1.0]).unwrap();
        for (o, e) in out.iter().zip(x.iter()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn known_small_case() {
        // [1,2,3] (*) [4,5] = [4, 13, 22, 15]
        let out = conv1d_naive(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap();
        assert_eq!(out, vec![4.0, 13.0, 22.0, 15.0]);
    }

    #[test]
    fn output_length_law() {
        let out = conv1d_naive(&[1.0; 5], &[1.0; 3]).unwrap();
        assert_eq!(out.len(), 7);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert_eq!(conv1d_naive(&[], &[1.0]).unwrap_err(), ConvError::EmptyInput("x"));
        assert_eq!(conv1d_fft(&[1.0], &[]).unwrap_err(), ConvError::EmptyInput("y"));
    }

    #[test]
    fn plan_too_small_rejected() {
        let plan = FftPlan::new(2).unwrap();
        let err = conv1d_fft_with_plan(&[1.0, 2.0], &[3.0, 4.0], &plan).unwrap_err();
        assert_eq!(err, ConvError::PlanTooSmall { plan: 2, needed: 3 });
    }

    #[test]
    fn oversized_plan_gives_same_result() {
        let x = [1.0, -2.0, 0.5];
        let y = [2.0, 1.0];
        let tight = conv1d_fft(&x, &y).unwrap();
        let plan = FftPlan::new(32).unwrap();
        let wide = conv1d_fft_with_plan(&x, &y, &plan).unwrap();
        for (a, b) in tight.iter().zip(wide.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correlate_matches_shifted_dot() {
        let g = [1.0, 2.0, 3.0, 4.0];
        let y = [10.0, 20.0];
        // out[a] = g[a]*10 + g[a+1]*20
        assert_eq!(correlate_naive(&g, &y).unwrap(), vec![50.0, 80.0, 110.0]);
        let f = correlate(&g, &y, ConvBackend::Fft).unwrap();
        for (a, b) in f.iter().zip([50.0, 80.0, 110.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn correlate_rejects_long_kernel() {
        let err = correlate_naive(&[1.0], &[1.0, 2.0]).unwrap_err();
        assert_eq!(err, ConvError::KernelTooLong { kernel: 2, signal: 1 });
    }
}
