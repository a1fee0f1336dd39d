use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

/// Trial indices of two disjoint partitions, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each class's items with a seeded RNG and sends
/// `round(n_k * test_frac)` of them to the test side. `items[i]` is the class
/// of item `i`.
pub fn stratified_split(items: &[usize], n_classes: usize, test_frac: f64, seed: u64) -> Result<TrialSplit> {
    if !(0.0..1.0).contains(&test_frac) {
        return invalid(format!("test fraction {test_frac} outside [0, 1)"));
    }
    if let Some(&l) = items.iter().find(|&&l| l >= n_classes) {
        return invalid(format!("label {l} out of range for {n_classes} classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..n_classes {
        let mut idx: Vec<usize> = (0..items.len()).filter(|&i| items[i] == k).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_frac).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(TrialSplit { train, test })
}

/// Hex SHA-256 over both partitions, identifying a split.
pub fn split_hash(split: &TrialSplit) -> String {
    let mut h = Sha256::new();
    for (tag, part) in [(b"train", &split.train), (b"test\0", &split.test)] {
        h.update(tag);
        h.update((part.len() as u64).to_le_bytes());
        for &i in part.iter() {
            h.update((i as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
