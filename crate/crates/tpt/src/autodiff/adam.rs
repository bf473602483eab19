//! Adam with bias correction and per-name-prefix learning-rate groups.

use crate::autodiff::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    /// `(prefix, lr)` overrides; the longest matching prefix wins.
    groups: Vec<(String, f64)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            cfg,
            groups: Vec::new(),
            m,
            v,
            step: 0,
        }
    }

    /// Use `lr` for every parameter whose name starts with `prefix`.
    pub fn with_group(mut self, prefix: &str, lr: f64) -> Self {
        self.groups.push((prefix.to_string(), lr));
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, lr)| *lr)
            .unwrap_or(self.cfg.lr)
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for slot in 0..store.len() {
            let lr = self.lr_for(store.name(slot));
            let grad = store.grad(slot).to_vec();
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let value = store.value_mut(slot).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::TapeParams;
    use crate::autodiff::tape::Tape;
    use crate::autodiff::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_in_negative_gradient_direction() {
        // With bias correction the first update is exactly lr * sign(g).
        let mut store = ParamStore::new();
        let slot = store
            .register("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.1, ..Default::default() });

        // grads: +3, -5
        store.accumulate_grads(&{
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let w = lease.node(&mut tape, &store, slot);
            let c = tape.leaf(Tensor::new(vec![2], vec![3.0, -5.0]).unwrap());
            let y = tape.mul(w, c).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            tape
        });
        opt.step(&mut store);
        let v = store.value(slot).data();
        assert!((v[0] - (1.0 - 0.1)).abs() < 1e-9, "{v:?}");
        assert!((v[1] - (-2.0 + 0.1)).abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let slot = store
            .register("x", Tensor::new(vec![1], vec![4.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(&store, AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            store.zero_grads();
            let mut tape = Tape::new();
            let mut lease = TapeParams::new();
            let x = lease.node(&mut tape, &store, slot);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            store.accumulate_grads(&tape);
            opt.step(&mut store);
        }
        assert!(store.value(slot).data()[0].abs() < 1e-3);
    }

    #[test]
    fn longest_prefix_group_wins() {
        let mut store = ParamStore::new();
        store.register("decoder.layer0.w", Tensor::zeros(&[1])).unwrap();
        store.register("regressor.head.w", Tensor::zeros(&[1])).unwrap();
        store.register("regressor.shared.w", Tensor::zeros(&[1])).unwrap();
        let opt = Adam::new(&store, AdamConfig { lr: 1e-4, ..Default::default() })
            .with_group("regressor.", 1e-3)
            .with_group("regressor.shared.", 5e-4);
        assert_eq!(opt.lr_for("decoder.layer0.w"), 1e-4);
        assert_eq!(opt.lr_for("regressor.head.w"), 1e-3);
        assert_eq!(opt.lr_for("regressor.shared.w"), 5e-4);
    }
}
