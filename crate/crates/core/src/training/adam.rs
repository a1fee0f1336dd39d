use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{Group, ParamStore};
use crate::tensor::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per parameter entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries.iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` is `None` for parameters
/// outside the current computation; those are left untouched. Each group
/// steps at `lr(group)`.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState,
    lr: impl Fn(Group) -> f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return shape_err(format!(
            "adam: {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        ));
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, entry) in store.entries.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if g.len() != entry.value.len() {
            return shape_err(format!(
                "adam: gradient of {} entries for parameter `{}` of {}",
                g.len(),
                entry.name,
                entry.value.len()
            ));
        }
        let rate = lr(entry.group);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in entry.value.data_mut().iter_mut().enumerate() {
            let gj = g[j].f64();
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let step = rate * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            *p = T::c(p.f64() - step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Group::St, Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s);
        for _ in 0..5 {
            adam_step(&mut s, &[Some(vec![0.0])], &mut st, |_| 0.1).unwrap();
        }
        assert_eq!(s.entries[0].value.item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::<f64>::new();
        s.add("p", Group::Ae, Tensor::new(vec![3], vec![0.0, 1.0, 2.0]).unwrap());
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Some(vec![4.0, -0.01, 250.0])], &mut st, |_| 1e-3).unwrap();
        let got = s.entries[0].value.data();
        let want = [-1e-3, 1.0 + 1e-3, 2.0 - 1e-3];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-8, "{g} vs {w}");
        }
    }

    #[test]
    fn three_steps_on_a_quadratic_match_hand_unrolling() {
        // f(p) = (p - 3)^2, gradient 2(p - 3).
        let lr = 0.1;
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (p - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= lr * mh / (vh.sqrt() + 1e-8);

            let cur = s.entries[0].value.item();
            adam_step(&mut s, &[Some(vec![2.0 * (cur - 3.0)])], &mut st, |_| lr).unwrap();
        }
        assert!((s.entries[0].value.item() - p).abs() < 1e-14);
        assert!((p - 0.299_618_476_549).abs() < 1e-9);
    }

    #[test]
    fn groups_use_their_own_rates_and_absent_grads_are_skipped() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Group::Ae, Tensor::scalar(0.0));
        s.add("b", Group::St, Tensor::scalar(0.0));
        s.add("c", Group::St, Tensor::scalar(0.0));
        let mut st = AdamState::new(&s);
        let lr = |g| if g == Group::Ae { 1e-3 } else { 2e-4 };
        adam_step(&mut s, &[Some(vec![1.0]), Some(vec![1.0]), None], &mut st, lr).unwrap();
        assert!((s.entries[0].value.item() + 1e-3).abs() < 1e-9);
        assert!((s.entries[1].value.item() + 2e-4).abs() < 1e-9);
        assert_eq!(s.entries[2].value.item(), 0.0);
        assert_eq!(st.m[2], vec![0.0]);
    }
}
