//! FFT checked against a quadratic DFT oracle plus analytic identities.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nirec_tensor::{fft, ifft};

/// O(n^2) discrete Fourier transform, written from the definition.
fn dft(xs: &[Complex64]) -> Vec<Complex64> {
    let n = xs.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &x) in xs.iter().enumerate() {
            let angle = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            acc += x * Complex64::new(angle.cos(), angle.sin());
        }
        out.push(acc);
    }
    out
}

fn random_buf(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)))
        .collect()
}

#[test]
fn matches_dft_oracle_across_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &n in &[1usize, 2, 4, 8, 16, 64, 256] {
        for _ in 0..20 {
            let xs = random_buf(&mut rng, n);
            let want = dft(&xs);
            let mut got = xs.clone();
            fft(&mut got).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!(
                    (g - w).norm() < 1e-9 * (n as f64).max(1.0),
                    "n={n}: {g} vs {w}"
                );
            }
        }
    }
}

#[test]
fn inverse_round_trips_to_1e12() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &n in &[1usize, 2, 8, 32, 128, 1024, 4096] {
        let xs = random_buf(&mut rng, n);
        let mut buf = xs.clone();
        fft(&mut buf).unwrap();
        ifft(&mut buf).unwrap();
        for (b, x) in buf.iter().zip(&xs) {
            assert!((b - x).norm() < 1e-12, "n={n}: {b} vs {x}");
        }
    }
}

#[test]
fn parseval_energy_is_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for &n in &[4usize, 64, 512, 2048] {
        let xs = random_buf(&mut rng, n);
        let time_energy: f64 = xs.iter().map(|x| x.norm_sqr()).sum();
        let mut buf = xs.clone();
        fft(&mut buf).unwrap();
        let freq_energy: f64 = buf.iter().map(|x| x.norm_sqr()).sum::<f64>() / n as f64;
        let scale = time_energy.max(1.0);
        assert!(
            (time_energy - freq_energy).abs() / scale < 1e-9,
            "n={n}: {time_energy} vs {freq_energy}"
        );
    }
}

#[test]
fn linearity_of_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 64;
    let xs = random_buf(&mut rng, n);
    let ys = random_buf(&mut rng, n);
    let a = Complex64::new(2.5, -0.5);
    let combined: Vec<Complex64> = xs.iter().zip(&ys).map(|(x, y)| a * x + y).collect();
    let mut fc = combined;
    fft(&mut fc).unwrap();
    let mut fx = xs;
    fft(&mut fx).unwrap();
    let mut fy = ys;
    fft(&mut fy).unwrap();
    for ((c, x), y) in fc.iter().zip(&fx).zip(&fy) {
        assert!((c - (a * x + y)).norm() < 1e-9);
    }
}
