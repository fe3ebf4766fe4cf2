use std::collections::BTreeMap;

use super::{Matrix, ParamStore};

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Adaptive-moment optimizer with per-parameter step counts. Parameters
/// that received no gradient in a step are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update. `lr_for` returns the learning rate for a parameter
    /// name, or `None` when the parameter is frozen.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Matrix>,
        lr_for: impl Fn(&str) -> Option<f64>,
    ) {
        for (name, g) in grads {
            let Some(lr) = lr_for(name) else { continue };
            let p = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            assert_eq!(p.shape(), g.shape(), "gradient shape for `{name}`");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            for i in 0..g.len() {
                let gi = g.data[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Matrix::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.insert("a", Matrix::from_vec(1, 2, vec![1.0, 1.0]));
        store.insert("b", Matrix::scalar(5.0));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Matrix::from_vec(1, 2, vec![0.5, -3.0]));
        let mut adam = Adam::new();
        adam.step(&mut store, &grads, |_| Some(0.1));
        let a = store.get("a").unwrap();
        assert!((a.data[0] - 0.9).abs() < 1e-6);
        assert!((a.data[1] - 1.1).abs() < 1e-6);
        assert_eq!(store.get("b").unwrap().item(), 5.0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::new();
        store.insert("a", Matrix::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Matrix::scalar(1.0));
        Adam::new().step(&mut store, &grads, |_| None);
        assert_eq!(store.get("a").unwrap().item(), 1.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let before = clip_grad_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        let after: f64 = grads.values().map(Matrix::sum_sq).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
