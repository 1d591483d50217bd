//! AdamW with decoupled weight decay, global-norm clipping and the warmup-cosine schedule.

use std::collections::BTreeMap;
use std::path::Path;

use genvit_autograd::{Archive, ParamStore, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, warmup_ratio: 0.03, weight_decay: 0.1, max_grad_norm: 1.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup ratio must be in [0, 1), got {}", self.warmup_ratio)));
        }
        if self.weight_decay < 0.0 || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("weight decay must be >= 0 and the clip norm > 0".into()));
        }
        Ok(())
    }
}

pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).ceil() as usize
}

/// Linear warmup to `lr_max`, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, ratio: f64, lr_max: f64) -> f64 {
    let warm = warmup_steps(total, ratio);
    if step < warm {
        return lr_max * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = (*v as f64 * s) as f32;
            }
        }
    }
    norm
}

/// First and second moments for each trainable tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every unfrozen tensor that has a gradient. Decay applies to matrices only.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            if params.is_frozen(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else { continue };
            let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i] as f64;
                let mi = cfg.beta1 * md[i] as f64 + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * vd[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps) + decay * pd[i] as f64;
                pd[i] = (pd[i] as f64 - lr * upd) as f32;
            }
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut store = ParamStore::new();
        for (k, t) in &self.m {
            store.insert(format!("m/{k}"), t.clone(), false);
        }
        for (k, t) in &self.v {
            store.insert(format!("v/{k}"), t.clone(), false);
        }
        let mut config = BTreeMap::new();
        config.insert("adam_t".to_string(), self.t.to_string());
        Archive::new(config, store)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let t = a
            .config
            .get("adam_t")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::ModelState("optimizer archive lacks adam_t".into()))?;
        let mut out = Self { t, ..Self::default() };
        for (name, e) in a.params.iter() {
            if let Some(k) = name.strip_prefix("m/") {
                out.m.insert(k.to_string(), e.tensor.clone());
            } else if let Some(k) = name.strip_prefix("v/") {
                out.v.insert(k.to_string(), e.tensor.clone());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path).map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&crate::model::load_archive(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let (total, lr) = (100, 1.0);
        let warm = warmup_steps(total, 0.03);
        assert_eq!(warm, 3);
        assert!((lr_at(0, total, 0.03, lr) - 1.0 / 3.0).abs() < 1e-12);
        for s in 1..warm {
            assert!(lr_at(s, total, 0.03, lr) > lr_at(s - 1, total, 0.03, lr));
        }
        assert!((lr_at(warm, total, 0.03, lr) - 1.0).abs() < 1e-12);
        let mid = warm + (total - warm) / 2;
        let progress = (mid - warm) as f64 / (total - warm) as f64;
        let want = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        assert!((lr_at(mid, total, 0.03, lr) - want).abs() < 1e-12);
        for s in warm + 1..total {
            assert!(lr_at(s, total, 0.03, lr) <= lr_at(s - 1, total, 0.03, lr));
        }
        assert!(lr_at(total - 1, total, 0.03, lr) >= 0.0);
    }

    #[test]
    fn cosine_midpoint_is_half() {
        assert!((lr_at(51, 102, 0.0, 2.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![3.0f32, 4.0]));
        g.insert("b".to_string(), Tensor::new(&[1], vec![12.0f32]));
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 13.0).abs() < 1e-9);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2, 2], vec![0.1f32, -0.2, 0.3, 0.7]), false);
        let before = p.clone();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(&[2, 2]));
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new();
        for _ in 0..3 {
            opt.step(&mut p, &g, 1e-2, &cfg);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 2], vec![0.5f32, 0.5]), true);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1, 2], vec![1.0f32, -1.0]));
        let mut opt = AdamW::new();
        opt.step(&mut p, &g, 0.1, &OptimConfig::default());
        assert_eq!(p.get("w").unwrap().data(), &[0.5, 0.5]);
        assert!(opt.m.is_empty());
    }

    #[test]
    fn archive_round_trip() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 2], vec![0.5f32, 0.5]), false);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1, 2], vec![1.0f32, -1.0]));
        let mut opt = AdamW::new();
        opt.step(&mut p, &g, 0.1, &OptimConfig::default());
        let back = AdamW::from_archive(&Archive::from_bytes(&opt.to_archive().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, opt);
    }
}
