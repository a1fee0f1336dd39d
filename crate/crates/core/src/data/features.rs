use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};

/// Features per channel: 6 time-domain, 6 log band powers, 6 relative band
/// powers.
pub const N_FEATURES: usize = 18;

/// Frequency bands in Hz, `[lo, hi)`.
pub const BANDS: [(f64, f64); 6] = [
    (0.5, 4.0),
    (4.0, 8.0),
    (8.0, 13.0),
    (13.0, 20.0),
    (20.0, 30.0),
    (30.0, 45.0),
];

const EPS: f64 = 1e-12;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

fn diff(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Rectangular-window periodogram power summed over each band.
fn band_powers(x: &[f64], fs: f64) -> [f64; 6] {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n).process(&mut buf));
    let norm = (n * n) as f64;
    let mut out = [0.0; 6];
    for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * fs / n as f64;
        if let Some(b) = BANDS.iter().position(|&(lo, hi)| f >= lo && f < hi) {
            out[b] += c.norm_sqr() / norm;
        }
    }
    out
}

fn channel_features(x: &[f64], fs: f64, out: &mut [f64]) {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = variance(x);
    let dx = diff(x);
    let ddx = diff(&dx);
    let var_d = variance(&dx);
    let var_dd = variance(&ddx);
    let mobility = (var_d / (var + EPS)).sqrt();
    let mobility_d = (var_dd / (var_d + EPS)).sqrt();
    let complexity = mobility_d / (mobility + EPS);
    let crossings = x
        .windows(2)
        .filter(|w| (w[0] - mean) * (w[1] - mean) < 0.0)
        .count();
    let zcr = crossings as f64 / (n - 1) as f64;
    let line_length = dx.iter().map(|d| d.abs()).sum::<f64>() / ((n - 1) as f64 * (var.sqrt() + EPS));

    out[..6].copy_from_slice(&[mean, var, mobility, complexity, zcr, line_length]);
    let bp = band_powers(x, fs);
    let total: f64 = bp.iter().sum();
    for b in 0..6 {
        out[6 + b] = (bp[b] + EPS).ln();
        out[12 + b] = bp[b] / (total + EPS);
    }
}

/// Per-channel feature vector of a `[C x omega]` window, returned as
/// `[C x 18]`.
pub fn extract_features(window: &[f64], n_channels: usize, omega: usize, fs: f64) -> Result<Vec<f64>> {
    if omega < 8 {
        return invalid(format!("feature extraction needs at least 8 samples, got {omega}"));
    }
    if window.len() != n_channels * omega {
        return invalid(format!(
            "window of {} values is not {n_channels} x {omega}",
            window.len()
        ));
    }
    let mut out = vec![0.0; n_channels * N_FEATURES];
    for (c, chunk) in window.chunks(omega).enumerate() {
        channel_features(chunk, fs, &mut out[c * N_FEATURES..(c + 1) * N_FEATURES]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constant_signal_has_zero_dynamics() {
        let f = extract_features(&[3.5; 64], 1, 64, 250.0).unwrap();
        assert_eq!(f.len(), 18);
        assert_eq!(f[0], 3.5);
        assert_eq!(&f[1..5], &[0.0, 0.0, 0.0, 0.0]);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pure_mu_tone_concentrates_in_its_band() {
        let x: Vec<f64> = (0..500).map(|i| (2.0 * PI * 10.0 * i as f64 / 250.0).sin()).collect();
        let f = extract_features(&x, 1, 500, 250.0).unwrap();
        let rel = &f[12..18];
        assert!(rel[2] > 0.95, "{rel:?}");
        for (b, &r) in rel.iter().enumerate() {
            if b != 2 {
                assert!(r < 0.05, "band {b}: {r}");
            }
        }
        // Mobility of a sampled sinusoid is 2 sin(pi f / fs).
        let expected = 2.0 * (PI * 10.0 / 250.0).sin();
        assert!((f[2] - expected).abs() < 1e-3, "{} vs {expected}", f[2]);
        // A sinusoid's derivative has the same shape: complexity ~ 1.
        assert!((f[3] - 1.0).abs() < 1e-2, "{}", f[3]);
        // 10 Hz over 2 s crosses zero 40 times.
        assert!((f[4] * 499.0 - 40.0).abs() <= 1.0);
    }

    #[test]
    fn every_channel_gets_eighteen_features() {
        for (c, omega) in [(1, 8), (3, 125), (22, 500)] {
            let x: Vec<f64> = (0..c * omega).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let f = extract_features(&x, c, omega, 250.0).unwrap();
            assert_eq!(f.len(), c * 18);
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn short_windows_are_rejected() {
        assert!(extract_features(&[0.0; 7], 1, 7, 250.0).is_err());
    }

    #[test]
    fn band_power_matches_direct_dft() {
        let x: Vec<f64> = (0..125).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let fast = band_powers(&x, 250.0);
        let n = x.len();
        let mut slow = [0.0; 6];
        for k in 0..=n / 2 {
            let f = k as f64 * 250.0 / n as f64;
            let Some(b) = BANDS.iter().position(|&(lo, hi)| f >= lo && f < hi) else {
                continue;
            };
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            slow[b] += (re * re + im * im) / (n * n) as f64;
        }
        for b in 0..6 {
            assert!((fast[b] - slow[b]).abs() < 1e-12, "band {b}");
        }
    }
}
