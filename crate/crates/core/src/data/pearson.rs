use super::EpochSet;

const EPS: f64 = 1e-12;

/// Pearson correlation between the trial-averaged series of every channel
/// pair, row-major `[C x C]`. Constant series correlate 0 with everything
/// except themselves.
pub fn pearson_adjacency(e: &EpochSet) -> Vec<f64> {
    let (c_n, s_n) = (e.n_channels, e.n_samples);
    let mut avg = vec![0.0f64; c_n * s_n];
    for t in 0..e.n_trials {
        for (a, &v) in avg.iter_mut().zip(e.trial(t)) {
            *a += v as f64;
        }
    }
    let denom = e.n_trials.max(1) as f64;
    avg.iter_mut().for_each(|a| *a /= denom);

    let centered: Vec<Vec<f64>> = avg
        .chunks(s_n.max(1))
        .map(|row| {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let mut out = vec![0.0; c_n * c_n];
    for i in 0..c_n {
        out[i * c_n + i] = 1.0;
        for j in i + 1..c_n {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let r = if norms[i] < EPS || norms[j] < EPS {
                0.0
            } else {
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            out[i * c_n + j] = r;
            out[j * c_n + i] = r;
        }
    }
    out
}
