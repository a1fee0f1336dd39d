use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{default_channel_names, EpochSet};
use crate::error::{invalid, Result};

/// Frequency of the sensorimotor rhythm carried by every channel.
pub const MU_FREQ: f64 = 10.0;
/// Mu amplitude in microvolts before desynchronization.
pub const MU_AMPLITUDE: f64 = 10.0;
/// Relative per-trial jitter of the mu amplitude.
const MU_JITTER: f64 = 0.15;
/// Background banks: (low Hz, high Hz, sinusoids per bank).
const BANKS: [(f64, f64, usize); 3] = [(1.0, 7.0, 4), (14.0, 30.0, 4), (30.0, 45.0, 4)];
/// Spatial spread of background sources, in inter-electrode units.
const MIX_SIGMA: f64 = 1.0;
/// Approximate scalp grid positions of the 22-electrode montage.
const MONTAGE_22_POS: [(f64, f64); 22] = [
    (0.0, 2.0),
    (-2.0, 1.0),
    (-1.0, 1.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (2.0, 1.0),
    (-3.0, 0.0),
    (-2.0, 0.0),
    (-1.0, 0.0),
    (0.0, 0.0),
    (1.0, 0.0),
    (2.0, 0.0),
    (3.0, 0.0),
    (-2.0, -1.0),
    (-1.0, -1.0),
    (0.0, -1.0),
    (1.0, -1.0),
    (2.0, -1.0),
    (-1.0, -2.0),
    (0.0, -2.0),
    (1.0, -2.0),
    (0.0, -3.0),
];
/// Background amplitude scale; a component at f Hz has amplitude
/// `PINK_SCALE / sqrt(f)`.
const PINK_SCALE: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs: f64,
    pub trials_per_class: usize,
    /// Channels desynchronized for each class.
    pub erd_channels: Vec<Vec<usize>>,
    /// Fraction of mu amplitude removed on a class's ERD channels.
    pub erd_depth: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_channels: 22,
            n_samples: 750,
            fs: 250.0,
            trials_per_class: 72,
            erd_channels: default_erd_channels(4, 22),
            erd_depth: 0.6,
            noise_std: 2.0,
            seed: 42,
        }
    }
}

/// Lateralized sensorimotor sites for the four-class 22-channel montage
/// (left hand, right hand, feet, tongue); otherwise three consecutive
/// channels per class.
pub fn default_erd_channels(n_classes: usize, n_channels: usize) -> Vec<Vec<usize>> {
    if n_classes == 4 && n_channels == 22 {
        return vec![
            vec![10, 11, 12, 17],
            vec![6, 7, 8, 13],
            vec![3, 9, 15],
            vec![0, 2, 4],
        ];
    }
    (0..n_classes)
        .map(|k| (0..3).map(|j| (k * 3 + j) % n_channels).collect())
        .collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_channels < 2 {
            return invalid(format!("need at least 2 channels, got {}", self.n_channels));
        }
        if self.n_samples == 0 || self.trials_per_class == 0 {
            return invalid("n_samples and trials_per_class must be positive");
        }
        if !(self.fs > 0.0) {
            return invalid(format!("sampling rate must be positive, got {}", self.fs));
        }
        if self.erd_channels.len() != self.n_classes {
            return invalid(format!(
                "erd_channels lists {} classes, expected {}",
                self.erd_channels.len(),
                self.n_classes
            ));
        }
        if let Some(&c) = self.erd_channels.iter().flatten().find(|&&c| c >= self.n_channels) {
            return invalid(format!(
                "erd channel {c} out of range for {} channels",
                self.n_channels
            ));
        }
        if !(0.0..=1.0).contains(&self.erd_depth) {
            return invalid(format!("erd_depth {} outside [0, 1]", self.erd_depth));
        }
        if !(self.noise_std >= 0.0) {
            return invalid(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// Row-normalized Gaussian volume-conduction kernel: channel `c` records
/// `sum_j k[c][j] * source_j` with unit-norm rows, so mixing keeps the
/// background variance. Channels sit on the 22-electrode grid when the count
/// matches, otherwise on a line.
fn mixing_kernel(n_channels: usize) -> Vec<Vec<f64>> {
    let pos: Vec<(f64, f64)> = if n_channels == 22 {
        MONTAGE_22_POS.to_vec()
    } else {
        (0..n_channels).map(|c| (c as f64, 0.0)).collect()
    };
    pos.iter()
        .map(|&(xi, yi)| {
            let row: Vec<f64> = pos
                .iter()
                .map(|&(xj, yj)| (-((xi - xj).powi(2) + (yi - yj).powi(2)) / (2.0 * MIX_SIGMA * MIX_SIGMA)).exp())
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn trial_signal(spec: &SyntheticSpec, trial: usize, class: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(trial as u64);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let jitter = Normal::new(0.0, MU_JITTER).expect("finite std");
    let erd = &spec.erd_channels[class];
    let (c_n, s_n) = (spec.n_channels, spec.n_samples);
    let mut background = vec![0f64; c_n * s_n];
    let mut mu = vec![0f64; c_n * s_n];
    for c in 0..c_n {
        let mut amp = MU_AMPLITUDE * (1.0 + jitter.sample(&mut rng)).max(0.2);
        if erd.contains(&c) {
            amp *= 1.0 - spec.erd_depth;
        }
        let mu_phase = rng.random_range(0.0..2.0 * PI);
        let mut components = Vec::new();
        for &(lo, hi, count) in &BANKS {
            for _ in 0..count {
                let f = rng.random_range(lo..hi);
                let phase = rng.random_range(0.0..2.0 * PI);
                components.push((f, PINK_SCALE / f.sqrt(), phase));
            }
        }
        for s in 0..s_n {
            let t = s as f64 / spec.fs;
            let mut acc: f64 = components
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum();
            if spec.noise_std > 0.0 {
                acc += noise.sample(&mut rng);
            }
            background[c * s_n + s] = acc;
            mu[c * s_n + s] = amp * (2.0 * PI * MU_FREQ * t + mu_phase).sin();
        }
    }
    let kernel = mixing_kernel(c_n);
    let mut out = vec![0f32; c_n * s_n];
    for (c, row) in kernel.iter().enumerate() {
        for s in 0..s_n {
            let mixed: f64 = row.iter().enumerate().map(|(j, k)| k * background[j * s_n + s]).sum();
            out[c * s_n + s] = (mixed + mu[c * s_n + s]) as f32;
        }
    }
    out
}

/// Deterministic, class-balanced synthetic motor-imagery trials. Trial `t`
/// belongs to class `t % n_classes`; each trial draws from its own RNG stream
/// so generation order does not affect the output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EpochSet> {
    spec.validate()?;
    let n_trials = spec.n_classes * spec.trials_per_class;
    let trials: Vec<Vec<f32>> = (0..n_trials)
        .into_par_iter()
        .map(|t| trial_signal(spec, t, t % spec.n_classes))
        .collect();
    Ok(EpochSet {
        n_trials,
        n_channels: spec.n_channels,
        n_samples: spec.n_samples,
        n_classes: spec.n_classes,
        fs: spec.fs as f32,
        data: trials.concat(),
        labels: (0..n_trials).map(|t| (t % spec.n_classes) as u32).collect(),
        channel_names: default_channel_names(spec.n_channels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Periodogram power in [lo, hi) Hz, independent of the feature code.
    fn band_power(x: &[f32], fs: f64, lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut total = 0.0;
        for k in 0..=n / 2 {
            let f = k as f64 * fs / n as f64;
            if f < lo || f >= hi {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                re += v as f64 * ang.cos();
                im += v as f64 * ang.sin();
            }
            total += re * re + im * im;
        }
        total / (n * n) as f64
    }

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            trials_per_class: 12,
            n_samples: 250,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let bits = |e: &EpochSet| e.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = generate_synthetic(&SyntheticSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn classes_are_balanced() {
        let e = generate_synthetic(&small_spec()).unwrap();
        for k in 0..4 {
            assert_eq!(e.labels.iter().filter(|&&l| l == k).count(), 12);
        }
        e.validate().unwrap();
    }

    #[test]
    fn erd_lowers_mu_power_on_class_channels() {
        let spec = SyntheticSpec::default();
        let e = generate_synthetic(&spec).unwrap();
        for (k, chans) in spec.erd_channels.iter().enumerate() {
            let c = chans[0];
            let (mut own, mut n_own, mut other, mut n_other) = (0.0, 0, 0.0, 0);
            for t in 0..e.n_trials {
                let p = band_power(e.channel(t, c), spec.fs, 8.0, 13.0);
                if e.labels[t] as usize == k {
                    own += p;
                    n_own += 1;
                } else {
                    other += p;
                    n_other += 1;
                }
            }
            let (own, other) = (own / n_own as f64, other / n_other as f64);
            assert!(own < other, "class {k} channel {c}: {own} vs {other}");
        }
    }

    #[test]
    fn zero_depth_makes_mu_power_class_independent() {
        let spec = SyntheticSpec {
            erd_depth: 0.0,
            n_samples: 250,
            ..SyntheticSpec::default()
        };
        let e = generate_synthetic(&spec).unwrap();
        let c = spec.erd_channels[0][0];
        let powers: Vec<(u32, f64)> = (0..e.n_trials)
            .map(|t| (e.labels[t], band_power(e.channel(t, c), spec.fs, 8.0, 13.0)))
            .collect();
        let stats = |pred: &dyn Fn(u32) -> bool| {
            let v: Vec<f64> = powers.iter().filter(|p| pred(p.0)).map(|p| p.1).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var / v.len() as f64)
        };
        let (m0, se0) = stats(&|l| l == 0);
        let (m1, se1) = stats(&|l| l != 0);
        let z = (m0 - m1).abs() / (se0 + se1).sqrt();
        assert!(z < 3.0, "z = {z}");
    }

    #[test]
    fn rejects_out_of_range_erd_channel() {
        let mut spec = small_spec();
        spec.erd_channels[1].push(22);
        assert!(generate_synthetic(&spec).is_err());
        let spec = SyntheticSpec {
            erd_depth: 1.5,
            ..small_spec()
        };
        assert!(spec.validate().is_err());
    }
}
