//! AdamW with global-norm gradient clipping, warmup-cosine learning rate,
//! and the cosine EMA decay schedule used by the teacher.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub total_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            total_steps: 1000,
            clip_norm: 1.0,
        }
    }
}

/// Optimizer state is laid out in the same order as the parameter store it
/// was created from.
pub struct AdamW {
    pub cfg: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
    decay_flags: Vec<bool>,
}

/// Weight decay applies to genuine weight matrices only: anything shaped
/// like a vector (bias, layer-norm affine, temperature) or serving as a
/// positional/timestep table is skipped.
fn decays(name: &str, dim: (usize, usize)) -> bool {
    if dim.0 == 1 || dim.1 == 1 {
        return false;
    }
    !(name.contains("pos") || name.contains("tstep"))
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, a)| Array2::zeros(a.dim())).collect();
        let v = store.iter().map(|(_, a)| Array2::zeros(a.dim())).collect();
        let decay_flags = store.iter().map(|(n, a)| decays(n, a.dim())).collect();
        Self {
            cfg,
            m,
            v,
            t: 0,
            decay_flags,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Linear warmup to `lr`, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.cfg.total_steps.max(1);
        let warmup = ((total as f64 * self.cfg.warmup_frac).floor() as usize).max(1);
        if step < warmup {
            self.cfg.lr * (step + 1) as f64 / warmup as f64
        } else {
            let p = (step - warmup) as f64 / (total - warmup).max(1) as f64;
            self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }

    /// One update. `grads` must be in store order. Returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Array2<f64>]) -> f64 {
        assert_eq!(grads.len(), self.m.len(), "gradient layout mismatch");
        let norm = global_norm(grads);
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let scale = self.cfg.clip_norm / norm;
            for g in grads.iter_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
        let lr = self.lr_at(self.t);
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gi| *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * gi);
            self.v[i].zip_mut_with(g, |v, &gi| *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * gi * gi);
            let p = store.array_at_mut(i);
            if self.decay_flags[i] && self.cfg.weight_decay > 0.0 {
                let wd = lr * self.cfg.weight_decay;
                p.mapv_inplace(|x| x - wd * x);
            }
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
        norm
    }

    /// Serializes moments and step counter; keys are prefixed so they can sit
    /// alongside model parameters in one container.
    pub fn state_entries(&self, store: &ParamStore) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in store.iter().enumerate() {
            out.insert(format!("adam.m.{}", name), self.m[i].clone());
            out.insert(format!("adam.v.{}", name), self.v[i].clone());
        }
        out.insert(
            "adam.t".to_string(),
            Array2::from_elem((1, 1), self.t as f64),
        );
        out
    }

    pub fn load_state(
        &mut self,
        store: &ParamStore,
        map: &BTreeMap<String, Array2<f64>>,
    ) -> Result<()> {
        for (i, (name, _)) in store.iter().enumerate() {
            let m = map
                .get(&format!("adam.m.{}", name))
                .ok_or_else(|| Error::Config(format!("optimizer state missing m for {}", name)))?;
            let v = map
                .get(&format!("adam.v.{}", name))
                .ok_or_else(|| Error::Config(format!("optimizer state missing v for {}", name)))?;
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
        let t = map
            .get("adam.t")
            .ok_or_else(|| Error::Config("optimizer state missing step counter".into()))?;
        self.t = t[[0, 0]] as usize;
        Ok(())
    }
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|&x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Teacher EMA decay at `step` of `total`: cosine ramp from `d_start` up to
/// `d_end`, d(t) = d_end - (d_end - d_start) * (1 + cos(pi t / total)) / 2.
pub fn ema_decay_at(step: usize, total: usize, d_start: f64, d_end: f64) -> f64 {
    let t = step.min(total) as f64 / total.max(1) as f64;
    d_end - (d_end - d_start) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{zeros, ParamStore};
    use ndarray::array;

    fn store_with(name: &str, a: Array2<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, a);
        s
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // min (x - 3)^2, gradient 2(x - 3)
        let mut store = store_with("x", zeros(1, 1));
        let mut opt = AdamW::new(
            &store,
            AdamConfig {
                lr: 0.1,
                weight_decay: 0.0,
                warmup_frac: 0.0,
                total_steps: 4000,
                clip_norm: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..2000 {
            let x = store.get("x")[[0, 0]];
            let mut g = vec![array![[2.0 * (x - 3.0)]]];
            opt.step(&mut store, &mut g);
        }
        assert!((store.get("x")[[0, 0]] - 3.0).abs() < 0.05);
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let grads = vec![array![[3.0, 4.0]]];
        assert!((global_norm(&grads) - 5.0).abs() < 1e-12);
        let mut store = store_with("w", zeros(1, 2));
        let mut opt = AdamW::new(
            &store,
            AdamConfig {
                clip_norm: 1.0,
                ..Default::default()
            },
        );
        let mut g = grads.clone();
        opt.step(&mut store, &mut g);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_then_cosine_to_zero() {
        let store = store_with("w", zeros(1, 1));
        let opt = AdamW::new(
            &store,
            AdamConfig {
                lr: 1.0,
                warmup_frac: 0.1,
                total_steps: 100,
                ..Default::default()
            },
        );
        assert!(opt.lr_at(0) < opt.lr_at(5));
        assert!((opt.lr_at(9) - 1.0).abs() < 1e-12); // end of warmup
        assert!(opt.lr_at(50) < 1.0);
        assert!(opt.lr_at(99) < 0.01);
    }

    #[test]
    fn vector_shapes_and_tables_skip_weight_decay() {
        assert!(decays("enc.0.attn.wq", (64, 64)));
        assert!(!decays("enc.0.attn.bq", (1, 64)));
        assert!(!decays("pos", (8, 64)));
        assert!(!decays("alpha_c", (1, 1)));
        assert!(!decays("denoiser.tstep", (100, 64)));
    }

    #[test]
    fn ema_schedule_endpoints_and_midpoint() {
        let (d0, d1) = (0.997, 0.9997);
        assert!((ema_decay_at(0, 3000, d0, d1) - d0).abs() < 1e-12);
        assert!((ema_decay_at(3000, 3000, d0, d1) - d1).abs() < 1e-12);
        let mid = ema_decay_at(1500, 3000, d0, d1);
        assert!((mid - 0.99835).abs() < 1e-9);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut store = store_with("w", array![[1.0, 2.0]]);
        let mut opt = AdamW::new(&store, AdamConfig::default());
        let mut g = vec![array![[0.5, -0.5]]];
        opt.step(&mut store, &mut g);
        let state = opt.state_entries(&store);

        let mut opt2 = AdamW::new(&store, AdamConfig::default());
        opt2.load_state(&store, &state).unwrap();
        assert_eq!(opt2.t, opt.t);

        // Continuing from restored state matches continuing the original.
        let mut s1 = store.clone();
        let mut s2 = store.clone();
        let mut g1 = vec![array![[0.1, 0.2]]];
        let mut g2 = g1.clone();
        opt.step(&mut s1, &mut g1);
        opt2.step(&mut s2, &mut g2);
        assert_eq!(s1.get("w"), s2.get("w"));
    }
}
