use serde::{Deserialize, Serialize};

use super::EpochSet;
use crate::error::{invalid, Result};

/// Subtracts the instantaneous mean over channels from every channel.
pub fn common_average_reference(e: &EpochSet) -> Result<EpochSet> {
    if e.n_channels < 2 {
        return invalid(format!(
            "common average reference needs at least 2 channels, got {}",
            e.n_channels
        ));
    }
    let (c_n, s_n) = (e.n_channels, e.n_samples);
    let mut data = e.data.clone();
    for t in 0..e.n_trials {
        let trial = &mut data[t * c_n * s_n..(t + 1) * c_n * s_n];
        for s in 0..s_n {
            let mean = (0..c_n).map(|c| trial[c * s_n + s] as f64).sum::<f64>() / c_n as f64;
            for c in 0..c_n {
                trial[c * s_n + s] = (trial[c * s_n + s] as f64 - mean) as f32;
            }
        }
    }
    Ok(EpochSet {
        data,
        labels: e.labels.clone(),
        channel_names: e.channel_names.clone(),
        ..*e
    })
}

/// Sliding-window segmentation: `omega` samples per window, advancing by
/// `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub omega: usize,
    pub step: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { omega: 500, step: 62 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega < 2 {
            return invalid(format!("window length must be at least 2, got {}", self.omega));
        }
        if self.step == 0 {
            return invalid("window step must be at least 1");
        }
        Ok(())
    }

    /// `floor((S - omega) / step) + 1`, or 0 when the window does not fit.
    pub fn count(&self, n_samples: usize) -> usize {
        if self.omega > n_samples {
            0
        } else {
            (n_samples - self.omega) / self.step + 1
        }
    }
}

/// Windows cut from an epoch set, `data[window][channel][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    /// (trial, start sample) of each window.
    pub index: Vec<(usize, usize)>,
    pub labels: Vec<u32>,
    pub data: Vec<f32>,
    pub omega: usize,
}

pub fn sliding_windows(e: &EpochSet, w: &WindowConfig) -> Result<Windows> {
    w.validate()?;
    if w.omega > e.n_samples {
        return invalid(format!(
            "window length {} exceeds trial length {}",
            w.omega, e.n_samples
        ));
    }
    let per_trial = w.count(e.n_samples);
    let mut index = Vec::with_capacity(e.n_trials * per_trial);
    let mut labels = Vec::with_capacity(e.n_trials * per_trial);
    let mut data = Vec::with_capacity(e.n_trials * per_trial * e.n_channels * w.omega);
    for t in 0..e.n_trials {
        for k in 0..per_trial {
            let start = k * w.step;
            index.push((t, start));
            labels.push(e.labels[t]);
            for c in 0..e.n_channels {
                data.extend_from_slice(&e.channel(t, c)[start..start + w.omega]);
            }
        }
    }
    Ok(Windows {
        index,
        labels,
        data,
        omega: w.omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_channel_names;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(trials: usize, channels: usize, samples: usize, data: Vec<f32>) -> EpochSet {
        EpochSet {
            n_trials: trials,
            n_channels: channels,
            n_samples: samples,
            n_classes: 2,
            fs: 250.0,
            data,
            labels: (0..trials).map(|t| (t % 2) as u32).collect(),
            channel_names: default_channel_names(channels),
        }
    }

    #[test]
    fn car_of_identical_channels_is_zero() {
        let row: Vec<f32> = (0..8).map(|i| i as f32 * 1.5 - 3.0).collect();
        let data = [row.clone(), row.clone(), row].concat();
        let out = common_average_reference(&set(1, 3, 8, data)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn car_two_channels_closed_form() {
        let a = [1.0f32, 4.0, -2.0];
        let b = [3.0f32, 0.0, 5.0];
        let out = common_average_reference(&set(1, 2, 3, [a, b].concat())).unwrap();
        for s in 0..3 {
            assert_eq!(out.data[s], (a[s] - b[s]) / 2.0);
            assert_eq!(out.data[3 + s], (b[s] - a[s]) / 2.0);
        }
    }

    #[test]
    fn car_rejects_single_channel() {
        let e = EpochSet {
            n_channels: 1,
            channel_names: vec!["C3".into()],
            ..set(1, 1, 4, vec![0.0; 4])
        };
        assert!(common_average_reference(&e).is_err());
    }

    #[test]
    fn car_output_has_zero_channel_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t_n, c_n, s_n) = (3, 22, 100);
        let data = (0..t_n * c_n * s_n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let out = common_average_reference(&set(t_n, c_n, s_n, data)).unwrap();
        for t in 0..t_n {
            for s in 0..s_n {
                let m = (0..c_n).map(|c| out.channel(t, c)[s] as f64).sum::<f64>() / c_n as f64;
                assert!(m.abs() <= 1e-6, "trial {t} sample {s}: {m}");
            }
        }
    }

    #[test]
    fn window_examples() {
        let e = set(2, 2, 750, vec![0.0; 2 * 2 * 750]);
        let w = sliding_windows(&e, &WindowConfig { omega: 500, step: 62 }).unwrap();
        let starts: Vec<usize> = w.index.iter().filter(|(t, _)| *t == 0).map(|p| p.1).collect();
        assert_eq!(starts, vec![0, 62, 124, 186, 248]);
        assert_eq!(w.data.len(), 10 * 2 * 500);
        assert_eq!(w.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);

        let w = sliding_windows(&e, &WindowConfig { omega: 500, step: 250 }).unwrap();
        let starts: Vec<usize> = w.index.iter().filter(|(t, _)| *t == 1).map(|p| p.1).collect();
        assert_eq!(starts, vec![0, 250]);

        for step in [1, 7, 750, 2000] {
            let w = sliding_windows(&e, &WindowConfig { omega: 750, step }).unwrap();
            assert_eq!(w.index.len(), 2);
        }
    }

    #[test]
    fn window_copies_the_right_samples() {
        let data: Vec<f32> = (0..2 * 10).map(|i| i as f32).collect();
        let e = set(1, 2, 10, data);
        let w = sliding_windows(&e, &WindowConfig { omega: 4, step: 3 }).unwrap();
        assert_eq!(w.index, vec![(0, 0), (0, 3), (0, 6)]);
        assert_eq!(&w.data[8..16], &[3., 4., 5., 6., 13., 14., 15., 16.]);
    }

    #[test]
    fn oversized_window_names_both_values() {
        let e = set(1, 2, 100, vec![0.0; 200]);
        let err = sliding_windows(&e, &WindowConfig { omega: 125, step: 62 })
            .unwrap_err()
            .to_string();
        assert!(err.contains("125") && err.contains("100"), "{err}");
    }

    #[test]
    fn window_count_formula_exhaustive() {
        for s_n in 2..=64 {
            for omega in 2..=s_n {
                for step in 1..=omega {
                    let e = set(1, 2, s_n, vec![0.0; 2 * s_n]);
                    let cfg = WindowConfig { omega, step };
                    let w = sliding_windows(&e, &cfg).unwrap();
                    // Enumerate starts directly.
                    let brute = (0..s_n).step_by(step).filter(|&st| st + omega <= s_n).count();
                    assert_eq!(w.index.len(), brute);
                    assert_eq!(w.index.len(), (s_n - omega) / step + 1);
                }
            }
        }
    }
}
