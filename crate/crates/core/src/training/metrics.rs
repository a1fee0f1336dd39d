use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// `scores[i]` holds one score per class for sample `i`; the prediction
    /// is the arg-max.
    pub fn from_scores(labels: &[usize], scores: &[Vec<f64>], n_classes: usize) -> Result<Self> {
        if labels.len() != scores.len() {
            return invalid(format!("{} labels for {} score rows", labels.len(), scores.len()));
        }
        if labels.is_empty() {
            return invalid("cannot score an empty set");
        }
        if let Some(row) = scores.iter().find(|r| r.len() != n_classes) {
            return invalid(format!("score row of {} entries for {n_classes} classes", row.len()));
        }
        let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
        let confusion = confusion_matrix(labels, &preds, n_classes)?;
        Ok(Self {
            accuracy: accuracy(&confusion),
            kappa: cohen_kappa(&confusion),
            macro_f1: macro_f1(&confusion),
            macro_auc: macro_auc(labels, scores, n_classes),
            confusion,
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn confusion_matrix(labels: &[usize], preds: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in labels.iter().zip(preds) {
        if t >= n_classes || p >= n_classes {
            return invalid(format!("class ({t}, {p}) out of range for {n_classes} classes"));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn total(m: &[Vec<usize>]) -> usize {
    m.iter().flatten().sum()
}

pub fn accuracy(m: &[Vec<usize>]) -> f64 {
    let trace: usize = (0..m.len()).map(|i| m[i][i]).sum();
    trace as f64 / total(m).max(1) as f64
}

/// Cohen's kappa. When chance agreement is already 1 (one class on both
/// sides) the matrix is diagonal and kappa is 1.
pub fn cohen_kappa(m: &[Vec<usize>]) -> f64 {
    let n = total(m) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let po = accuracy(m);
    let pe: f64 = (0..m.len())
        .map(|k| {
            let row: usize = m[k].iter().sum();
            let col: usize = m.iter().map(|r| r[k]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return if po == 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

/// Unweighted mean of per-class F1; a class with no true or predicted
/// samples scores 0.
pub fn macro_f1(m: &[Vec<usize>]) -> f64 {
    let k = m.len();
    let sum: f64 = (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let actual: usize = m[c].iter().sum();
            let predicted: usize = m.iter().map(|r| r[c]).sum();
            let denom = (actual + predicted) as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    sum / k as f64
}

/// Area under the ROC curve of `scores` for `positive` samples, computed as
/// the Mann-Whitney statistic with ties counted half. `None` when either
/// side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Average ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC averaged over classes that have both positive and
/// negative samples. NaN if no class qualifies.
pub fn macro_auc(labels: &[usize], scores: &[Vec<f64>], n_classes: usize) -> f64 {
    let aucs: Vec<f64> = (0..n_classes)
        .filter_map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            binary_auc(&s, &pos)
        })
        .collect();
    if aucs.is_empty() {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auc_of_a_textbook_ranking() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.2];
        let pos = [true, true, false, true, false, false];
        assert!((binary_auc(&scores, &pos).unwrap() - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn auc_counts_ties_half_and_rejects_one_sided_sets() {
        assert_eq!(binary_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(binary_auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn kappa_is_one_for_a_perfect_diagonal() {
        let m = vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]];
        assert!((cohen_kappa(&m) - 1.0).abs() < 1e-12);
        assert_eq!(accuracy(&m), 1.0);
        assert!((macro_f1(&m) - 1.0).abs() < 1e-12);
        assert_eq!(cohen_kappa(&[vec![4, 0], vec![0, 0]]), 1.0);
    }

    #[test]
    fn kappa_is_zero_at_chance() {
        // Predictions independent of labels: every cell equal.
        let m = vec![vec![2, 2], vec![2, 2]];
        assert!(cohen_kappa(&m).abs() < 1e-12);
        // Constant predictor.
        let m = vec![vec![6, 0], vec![4, 0]];
        assert!(cohen_kappa(&m).abs() < 1e-12);
    }

    #[test]
    fn kappa_hand_example() {
        // po = 0.7, pe = (0.5*0.6 + 0.5*0.4) = 0.5, kappa = 0.4.
        let m = vec![vec![20, 5], vec![10, 15]];
        assert!((cohen_kappa(&m) - 0.4).abs() < 1e-12);
        // F1: class 0 = 40/55, class 1 = 30/45.
        let want = (40.0 / 55.0 + 30.0 / 45.0) / 2.0;
        assert!((macro_f1(&m) - want).abs() < 1e-12);
    }

    #[test]
    fn from_scores_rejects_mismatched_rows() {
        assert!(Metrics::from_scores(&[0], &[vec![1.0, 0.0, 0.0]], 2).is_err());
        assert!(Metrics::from_scores(&[], &[], 2).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_invariant_to_sample_order(
            rows in prop::collection::vec((0usize..3, prop::collection::vec(0.0f64..1.0, 3)), 4..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (labels, scores): (Vec<usize>, Vec<Vec<f64>>) = rows.iter().cloned().unzip();
            let a = Metrics::from_scores(&labels, &scores, 3).unwrap();
            let mut perm: Vec<usize> = (0..labels.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let s2: Vec<Vec<f64>> = perm.iter().map(|&i| scores[i].clone()).collect();
            let b = Metrics::from_scores(&l2, &s2, 3).unwrap();
            prop_assert_eq!(&a.confusion, &b.confusion);
            prop_assert!((a.kappa - b.kappa).abs() < 1e-12);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!(a.macro_auc.is_nan() && b.macro_auc.is_nan() || (a.macro_auc - b.macro_auc).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a.kappa));
        }
    }
}
