//! Adam with bias correction and an inverse-square-root schedule with
//! linear warmup.

use crate::model::ParamStore;

/// Optimizer hyperparameters. The schedule is lr · min(t/warmup, √(warmup/t))
/// with t counted from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
}

impl AdamConfig {
    pub fn desk_default() -> Self {
        Self { lr: 5e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9, warmup: 200 }
    }
}

/// Learning rate at update t (1-based).
pub fn lr_at(cfg: &AdamConfig, t: u64) -> f64 {
    assert!(t >= 1, "updates count from 1");
    let t = t as f64;
    let w = cfg.warmup.max(1) as f64;
    cfg.lr * (t / w).min((w / t).sqrt())
}

/// Adam state over every parameter in a store, in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = (0..store.len())
            .map(|i| vec![0.0; store.get(i).value.numel()])
            .collect();
        let v = (0..store.len())
            .map(|i| vec![0.0; store.get(i).value.numel()])
            .collect();
        Self { cfg, m, v, t: 0 }
    }

    pub fn updates_done(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated in the store and
    /// returns the learning rate that was used. Gradients are left in place;
    /// the caller zeroes them when the window is finished.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        self.t += 1;
        let lr = lr_at(&self.cfg, self.t);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for id in 0..store.len() {
            let p = store.get_mut(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for ((x, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, ModelKind};

    fn store() -> ParamStore {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 8,
            n_speech_lower_layers: 1,
            n_shared_encoder_layers: 1,
            n_decoder_layers: 1,
            src_vocab: 8,
            tgt_vocab: 8,
            speech_feature_dim: 4,
            dropout: 0.0,
            max_positions: 16,
        };
        Model::new(cfg, ModelKind::Mt, 3).unwrap().store().clone()
    }

    #[test]
    fn schedule_closed_forms() {
        let cfg = AdamConfig { warmup: 200, ..AdamConfig::desk_default() };
        assert!((lr_at(&cfg, 200) - cfg.lr).abs() < 1e-15);
        assert!((lr_at(&cfg, 100) - cfg.lr * 0.5).abs() < 1e-15);
        assert!((lr_at(&cfg, 800) - cfg.lr * 0.5).abs() < 1e-15);
        assert!(lr_at(&cfg, 1) > 0.0);
        // The ramp peaks exactly at warmup.
        assert!(lr_at(&cfg, 199) < lr_at(&cfg, 200));
        assert!(lr_at(&cfg, 201) < lr_at(&cfg, 200));
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut s = store();
        s.zero_grads();
        let before: Vec<Vec<f64>> = (0..s.len()).map(|i| s.get(i).value.data().to_vec()).collect();
        let mut adam = Adam::new(AdamConfig::desk_default(), &s);
        adam.step(&mut s);
        for i in 0..s.len() {
            assert_eq!(s.get(i).value.data(), &before[i][..]);
        }
    }

    #[test]
    fn first_step_matches_scalar_closed_form() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.98, eps: 1e-9, warmup: 1 };
        let mut s = store();
        s.zero_grads();
        let g = 0.37;
        let x0 = s.get(0).value.data()[0];
        s.get_mut(0).grad[0] = g;
        let mut adam = Adam::new(cfg, &s);
        let lr = adam.step(&mut s);
        // t=1: mhat = g, vhat = g², so the update is −lr·g/(|g|+ε).
        let want = x0 - lr * g / (g.abs() + cfg.eps);
        let got = s.get(0).value.data()[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn identical_grads_get_identical_updates() {
        let mut s = store();
        s.zero_grads();
        let (a, b) = (0, 1);
        let n = s.get(a).value.numel().min(s.get(b).value.numel());
        for i in 0..n {
            s.get_mut(a).grad[i] = 0.2;
            s.get_mut(b).grad[i] = 0.2;
            let x = 0.5 + 0.01 * i as f64;
            s.get_mut(a).value.data_mut()[i] = x;
            s.get_mut(b).value.data_mut()[i] = x;
        }
        let mut adam = Adam::new(AdamConfig::desk_default(), &s);
        adam.step(&mut s);
        for i in 0..n {
            assert_eq!(s.get(a).value.data()[i], s.get(b).value.data()[i]);
        }
    }
}
