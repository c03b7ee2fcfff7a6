use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

/// Named parameters with AdamW moments and an EMA shadow copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
    first_moment: BTreeMap<String, Tensor<T>>,
    second_moment: BTreeMap<String, Tensor<T>>,
    ema: BTreeMap<String, Tensor<T>>,
    step: u64,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            ema: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        self.first_moment.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        self.second_moment.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        self.ema.insert(name.clone(), t.clone());
        self.params.insert(name, t);
    }

    /// Inserts a tensor drawn from N(0, std²).
    pub fn insert_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::c(z * std)
        });
        self.insert(name, t);
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, TensorError> {
        self.params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, TensorError> {
        self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ema(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.ema
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (&self.first_moment, &self.second_moment)
    }

    /// Copy whose live parameters are the EMA weights.
    pub fn with_ema_weights(&self) -> Self {
        let mut out = self.clone();
        out.params = self.ema.clone();
        out
    }

    pub fn update_ema(&mut self, decay: f64) {
        ema_update(&mut self.ema, &self.params, decay);
    }

    /// Resets EMA to the current weights and clears optimizer state.
    pub fn reset_training_state(&mut self) {
        self.ema = self.params.clone();
        for (k, t) in &self.params {
            self.first_moment.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
            self.second_moment.insert(k.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        self.step = 0;
    }

    pub(crate) fn from_parts(
        params: BTreeMap<String, Tensor<T>>,
        first_moment: BTreeMap<String, Tensor<T>>,
        second_moment: BTreeMap<String, Tensor<T>>,
        ema: BTreeMap<String, Tensor<T>>,
        step: u64,
    ) -> Result<Self, TensorError> {
        for (k, p) in &params {
            for (what, map) in [("adam_m", &first_moment), ("adam_v", &second_moment), ("ema", &ema)] {
                let t = map.get(k).ok_or_else(|| TensorError::UnknownParam(format!("{what}/{k}")))?;
                if t.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "param_state",
                        lhs: p.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(Self { params, first_moment, second_moment, ema, step })
    }

    /// Order-independent digest of the live parameter values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (k, t) in &self.params {
            h.update(k.as_bytes());
            buf.clear();
            for &x in t.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let c = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, t)| (k.clone(), t.cast::<U>())).collect();
        ParamSet {
            params: c(&self.params),
            first_moment: c(&self.first_moment),
            second_moment: c(&self.second_moment),
            ema: c(&self.ema),
            step: self.step,
        }
    }
}

/// AdamW hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// One AdamW update of every parameter that has an entry in `grads`.
///
/// Decay is decoupled: `p <- p * (1 - lr * wd)` before the bias-corrected
/// moment step. Parameters without a gradient entry are left untouched.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    params.step += 1;
    let step = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(step);
    let bc2 = 1.0 - cfg.beta2.powi(step);
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let (one_b1, one_b2) = (T::c(1.0 - cfg.beta1), T::c(1.0 - cfg.beta2));
    let decay = T::c(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps) = (T::c(lr), T::c(cfg.eps));
    let (inv_bc1, inv_bc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
    for (name, g) in grads {
        let p = params.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = params.first_moment.get_mut(name).expect("moment for every param");
        let v = params.second_moment.get_mut(name).expect("moment for every param");
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            if cfg.weight_decay != 0.0 {
                *p = *p * decay;
            }
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `ema <- decay * ema + (1 - decay) * params` for every shared name.
pub fn ema_update<T: Real>(
    ema: &mut BTreeMap<String, Tensor<T>>,
    params: &BTreeMap<String, Tensor<T>>,
    decay: f64,
) {
    let d = T::c(decay);
    let one_d = T::c(1.0 - decay);
    for (name, p) in params {
        match ema.get_mut(name) {
            Some(e) => {
                for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
                    *e = d * *e + one_d * p;
                }
            }
            None => {
                ema.insert(name.clone(), p.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new([1], vec![v]).unwrap());
        p
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::new([1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single(1.25);
        for _ in 0..10 {
            adamw_step(&mut p, &grad(0.0), 1e-4, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 1.25);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = single(2.0);
        let cfg = AdamConfig { weight_decay: 0.1, ..Default::default() };
        let lr = 1e-2;
        for k in 1..=5 {
            adamw_step(&mut p, &grad(0.0), lr, &cfg).unwrap();
            let want = 2.0 * (1.0 - lr * 0.1f64).powi(k);
            assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_moves_by_lr_against_sign() {
        let lr = 1e-3;
        for g in [3.0, -0.02] {
            let mut p = single(0.0);
            let mut prev = 0.0;
            let mut last_delta = 0.0;
            for _ in 0..2000 {
                adamw_step(&mut p, &grad(g), lr, &AdamConfig::default()).unwrap();
                let now = p.get("w").unwrap().data()[0];
                last_delta = now - prev;
                prev = now;
            }
            // bias-corrected moments of a constant gradient give m_hat = g, v_hat = g^2
            let want = -lr * g.signum() * g.abs() / (g.abs() + 1e-8);
            assert!((last_delta - want).abs() < 1e-9, "{last_delta} vs {want}");
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 1e-4), 0.0);
        assert!((lr_at(10, 100, 10, 1e-4) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, 10, 1e-4), 0.0);
        assert!((lr_at(5, 100, 10, 1e-4) - 0.5e-4).abs() < 1e-18);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ema_geometric_series() {
        let mut ema = BTreeMap::from([("w".to_string(), Tensor::new([1], vec![4.0]).unwrap())]);
        let params = BTreeMap::from([("w".to_string(), Tensor::new([1], vec![1.0]).unwrap())]);
        let decay: f64 = 0.9;
        for k in 1..=20 {
            ema_update(&mut ema, &params, decay);
            let want = decay.powi(k) * 4.0 + (1.0 - decay.powi(k)) * 1.0;
            assert!((ema["w"].data()[0] - want).abs() < 1e-12);
        }
        ema_update(&mut ema, &params, 0.0);
        assert_eq!(ema["w"].data()[0], 1.0);
    }
}
