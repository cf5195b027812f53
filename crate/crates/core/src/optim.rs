//! Bias-corrected Adam, global-norm gradient clipping, and LR schedules.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::ParamStore;
use crate::error::{CoreError, NumericsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily on first update.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `lr` overrides the configured rate (for schedules); pass
    /// `None` to use `cfg.lr`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: Option<f32>,
    ) -> Result<(), NumericsError> {
        let lr = lr.unwrap_or(self.cfg.lr);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);

        for (name, grad) in grads {
            let p = params.try_get(name).unwrap_or_else(|| {
                panic!("gradient for unknown parameter `{name}`")
            });
            if grad.shape() != p.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grad.data();
            let mut new = Vec::with_capacity(n);
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                new.push(p.data()[i] - lr * (mhat / (vhat.sqrt() + eps as f64)) as f32);
            }
            let updated = Tensor::checked(p.shape().to_vec(), new, "adam_step").map_err(|_| {
                NumericsError::NonFiniteNamed {
                    what: "adam update",
                    name: name.clone(),
                }
            })?;
            params.set(name, updated);
        }
        Ok(())
    }

    /// Serialize moment buffers and step counter as checkpoint entries.
    fn state_entries(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push((
            "__opt.step".to_string(),
            Tensor::from_vec(vec![self.step as f32]).expect("finite"),
        ));
        for (name, buf) in &self.m {
            let shape = params.get(name).shape().to_vec();
            out.push((
                format!("__opt.m.{name}"),
                Tensor::new(shape, buf.clone()).expect("moment buffers stay finite"),
            ));
        }
        for (name, buf) in &self.v {
            let shape = params.get(name).shape().to_vec();
            out.push((
                format!("__opt.v.{name}"),
                Tensor::new(shape, buf.clone()).expect("moment buffers stay finite"),
            ));
        }
        out
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f32) -> f32 {
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&g| g as f64 * g as f64)
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        let names: Vec<String> = grads.keys().cloned().collect();
        for name in names {
            let t = &grads[&name];
            let scaled: Vec<f32> = t.data().iter().map(|&g| g * scale).collect();
            let nt = Tensor::new(t.shape().to_vec(), scaled).expect("scaling keeps finiteness");
            grads.insert(name, nt);
        }
    }
    norm
}

/// Linear warmup to `base`, then cosine decay to `base * floor_frac`.
pub fn warmup_cosine(base: f32, step: u64, warmup: u64, total: u64, floor_frac: f32) -> f32 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f32 / warmup as f32;
    }
    if total <= warmup {
        return base;
    }
    let p = (step.saturating_sub(warmup)) as f32 / (total - warmup) as f32;
    let p = p.clamp(0.0, 1.0);
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * p).cos());
    base * (floor_frac + (1.0 - floor_frac) * cos)
}

// ── combined train-state checkpointing ─────────────────────────────────

/// Write parameters plus optimizer state to one checkpoint file.
pub fn save_train_state(path: &Path, params: &ParamStore, adam: &Adam) -> Result<()> {
    let mut combined = params.clone();
    for (name, t) in adam.state_entries(params) {
        combined.insert(name, t);
    }
    combined.save(path)
}

/// Restore parameters and optimizer state saved by [`save_train_state`].
/// `params` must already hold freshly initialized tensors of the expected
/// shapes; shape or name drift is rejected.
pub fn load_train_state(path: &Path, params: &mut ParamStore, cfg: AdamConfig) -> Result<Adam> {
    let pstr = path.display().to_string();
    let loaded = ParamStore::load(path)?;
    let mut model = ParamStore::new();
    let mut adam = Adam::new(cfg);
    for (name, t) in loaded.iter() {
        if let Some(raw) = name.strip_prefix("__opt.m.") {
            adam.m.insert(raw.to_string(), t.to_vec());
        } else if let Some(raw) = name.strip_prefix("__opt.v.") {
            adam.v.insert(raw.to_string(), t.to_vec());
        } else if name == "__opt.step" {
            adam.step = t.item() as u64;
        } else {
            model.insert(name.clone(), t.clone());
        }
    }
    params.load_into(&model, &pstr)?;
    for name in adam.m.keys().chain(adam.v.keys()) {
        if params.try_get(name).is_none() {
            return Err(CoreError::corrupt(
                &pstr,
                format!("optimizer state for unknown parameter `{name}`"),
            ));
        }
    }
    Ok(adam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn one_param(value: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(value).unwrap());
        s
    }

    fn grad_map(g: Vec<f32>) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::from_vec(g).unwrap());
        m
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.0, -2.0, 3.5]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut params, &grad_map(vec![0.0, 0.0, 0.0]), None).unwrap();
        }
        assert_eq!(params.get("p").data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr_exactly() {
        // With bias correction, step 1 gives mhat = g, vhat = g^2, so the
        // update is lr * g/|g| = lr * sign(g) (eps = 1e-15 is negligible).
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut params = one_param(vec![1.0, 1.0]);
        let mut adam = Adam::new(cfg);
        adam.step(&mut params, &grad_map(vec![0.47, -123.0]), None).unwrap();
        let p = params.get("p").data();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-7, "{}", p[0]);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-7, "{}", p[1]);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        // Oracle: closed-form Adam recursion under a constant gradient g.
        // m_t = g (1 - b1^t)/(1 - b1) * (1 - b1) ... after bias correction
        // mhat = g and vhat = g^2 for every t, so each update is exactly
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let cfg = AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        };
        let mut params = one_param(vec![0.0]);
        let mut adam = Adam::new(cfg);
        let mut prev = 0.0f32;
        for _ in 0..50 {
            adam.step(&mut params, &grad_map(vec![0.73]), None).unwrap();
            let cur = params.get("p").data()[0];
            let delta = (cur - prev).abs();
            assert!((delta - 2e-3).abs() < 1e-6, "delta {delta}");
            prev = cur;
        }
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut params = one_param(vec![0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for want in 1..=7u64 {
            adam.step(&mut params, &grad_map(vec![1.0]), None).unwrap();
            assert_eq!(adam.step_count(), want);
        }
    }

    #[test]
    fn rejects_gradient_shape_mismatch() {
        let mut params = one_param(vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam
            .step(&mut params, &grad_map(vec![1.0]), None)
            .unwrap_err();
        assert!(matches!(err, NumericsError::ShapeMismatch { op: "adam_step", .. }));
    }

    #[test]
    fn clip_global_norm_caps_and_preserves_direction() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(vec![3.0, 0.0]).unwrap());
        grads.insert("b".to_string(), Tensor::from_vec(vec![0.0, 4.0]).unwrap());
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let a = grads["a"].data();
        let b = grads["b"].data();
        assert!((a[0] - 0.6).abs() < 1e-6);
        assert!((b[1] - 0.8).abs() < 1e-6);
        // Already-small gradients are untouched.
        let norm2 = clip_global_norm(&mut grads, 10.0);
        assert!((norm2 - 1.0).abs() < 1e-5);
        assert!((grads["a"].data()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn warmup_cosine_shape() {
        let base = 1e-3;
        assert!(warmup_cosine(base, 0, 100, 1000, 0.1) < base * 0.02);
        assert!((warmup_cosine(base, 99, 100, 1000, 0.1) - base).abs() < 1e-9);
        let end = warmup_cosine(base, 1000, 100, 1000, 0.1);
        assert!((end - base * 0.1).abs() < 1e-6);
    }

    #[test]
    fn train_state_roundtrip_resumes_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut rng = StreamRng::derive(0, "adam", 0);

        let mut params = one_param(vec![1.0, 2.0, 3.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            let g = Tensor::randn(&[3], 1.0, &mut rng).unwrap();
            let mut m = BTreeMap::new();
            m.insert("p".to_string(), g);
            adam.step(&mut params, &m, None).unwrap();
        }
        save_train_state(&path, &params, &adam).unwrap();

        let mut params2 = one_param(vec![0.0, 0.0, 0.0]);
        let adam2 = load_train_state(&path, &mut params2, AdamConfig::default()).unwrap();
        assert_eq!(params2.get("p"), params.get("p"));
        assert_eq!(adam2.step_count(), 3);
        assert_eq!(adam2.m["p"], adam.m["p"]);
        assert_eq!(adam2.v["p"], adam.v["p"]);
    }
}
