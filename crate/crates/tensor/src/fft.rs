//! Iterative radix-2 FFT with precomputed twiddle and bit-reversal tables.
//!
//! Transforms operate in place on power-of-two-length complex buffers. A
//! [`FftPlan`] amortizes table construction when many transforms of the same
//! length are needed (the convolution kernels reuse one plan across all
//! channels of a call).

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FftError {
    #[error("fft length must be nonzero")]
    Empty,
    #[error("fft length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("buffer length {buf} does not match plan length {plan}")]
    PlanMismatch { buf: usize, plan: usize },
}

/// Precomputed tables for transforms of one fixed power-of-two length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    /// Index j swaps with `bit_rev[j]` (entries with `bit_rev[j] > j`).
    bit_rev: Vec<u32>,
    /// Forward roots, stage by stage: for span `len`, `w^j = exp(-2 pi i j / len)`.
    forward: Vec<Vec<Complex64>>,
    /// Inverse roots (conjugate of the forward set).
    inverse: Vec<Vec<Complex64>>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self, FftError> {
        if n == 0 {
            return Err(FftError::Empty);
        }
        if !n.is_power_of_two() {
            return Err(FftError::NotPowerOfTwo(n));
        }
        let bits = n.trailing_zeros().max(1);
        let mut bit_rev = vec![0u32; n];
        for (j, slot) in bit_rev.iter_mut().enumerate() {
            *slot = (j as u32).reverse_bits() >> (32 - bits);
        }
        let mut forward = Vec::new();
        let mut inverse = Vec::new();
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let mut fwd = Vec::with_capacity(half);
            let mut inv = Vec::with_capacity(half);
            for j in 0..half {
                let angle = -2.0 * std::f64::consts::PI * j as f64 / len as f64;
                let w = Complex64::new(angle.cos(), angle.sin());
                fwd.push(w);
                inv.push(w.conj());
            }
            forward.push(fwd);
            inverse.push(inv);
            len *= 2;
        }
        Ok(FftPlan {
            n,
            bit_rev,
            forward,
            inverse,
        })
    }

    /// Transform length the plan was built for.
    pub fn size(&self) -> usize {
        self.n
    }

    /// In-place forward transform.
    pub fn fft(&self, buf: &mut [Complex64]) -> Result<(), FftError> {
        self.transform(buf, &self.forward)
    }

    /// In-place inverse transform (includes the 1/n scaling).
    pub fn ifft(&self, buf: &mut [Complex64]) -> Result<(), FftError> {
        self.transform(buf, &self.inverse)?;
        let scale = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
        Ok(())
    }

    fn transform(&self, buf: &mut [Complex64], stages: &[Vec<Complex64>]) -> Result<(), FftError> {
        if buf.len() != self.n {
            return Err(FftError::PlanMismatch {
                buf: buf.len(),
                plan: self.n,
            });
        }
        for j in 0..self.n {
            let r = self.bit_rev[j] as usize;
            if r > j {
                buf.swap(j, r);
            }
        }
        for (stage, roots) in stages.iter().enumerate() {
            let len = 2usize << stage;
            let half = len / 2;
            for chunk in buf.chunks_exact_mut(len) {
                let (lo, hi) = chunk.split_at_mut(half);
                for j in 0..half {
                    let v = hi[j] * roots[j];
                    let u = lo[j];
                    lo[j] = u + v;
                    hi[j] = u - v;
                }
            }
        }
        Ok(())
    }
}

/// One-shot forward transform; builds a throwaway plan.
pub fn fft(buf: &mut [Complex64]) -> Result<(), FftError> {
    FftPlan::new(buf.len())?.fft(buf)
}

/// One-shot inverse transform; builds a throwaway plan.
pub fn ifft(buf: &mut [Complex64]) -> Result<(), FftError> {
    FftPlan::new(buf.len())?.ifft(buf)
}
