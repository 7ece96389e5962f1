use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors plus their adaptive-moment state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let n = value.len();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Affine weight `[fan_in x fan_out]` drawn from the Glorot uniform range `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Every parameter value concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::dim(format!(
                "expected {} values, got {}",
                self.numel(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Decoupled weight decay followed by a bias-corrected adaptive-moment
    /// update; advances the step counter by one.
    pub fn adamw_step(&mut self, grads: &Gradients, hp: &AdamW, lr: f64) -> Result<()> {
        if grads.grads.len() != self.params.len() {
            return Err(Error::dim("gradient count does not match parameters"));
        }
        for (p, g) in self.params.iter().zip(&grads.grads) {
            if g.len() != p.value.len() {
                return Err(Error::dim(format!("gradient shape mismatch for {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            let w = p.value.data_mut();
            for i in 0..w.len() {
                w[i] *= 1.0 - lr * hp.weight_decay;
                p.m[i] = hp.beta1 * p.m[i] + (1.0 - hp.beta1) * g[i];
                p.v[i] = hp.beta2 * p.v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        self.grads[id.0].iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn scale(&mut self, c: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= c);
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if max_norm > 0.0 && n > max_norm {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = w.len();
        let id = s.add("w", Tensor::new(&[1, n], w).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let (mut s, id) = store_with(vec![0.5, -2.0]);
        let g = s.zero_grads();
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        s.adamw_step(&g, &hp, 0.1).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, -2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_weights() {
        let (mut s, id) = store_with(vec![0.5, -2.0]);
        let g = s.zero_grads();
        let hp = AdamW {
            weight_decay: 0.01,
            ..AdamW::default()
        };
        s.adamw_step(&g, &hp, 0.1).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert_eq!(s.value(id).data(), &[0.5 * f, -2.0 * f]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // At t=1 the bias-corrected moments are g and g^2.
        let (mut s, id) = store_with(vec![1.0]);
        let mut g = s.zero_grads();
        g.add(id, &[0.3]);
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        s.adamw_step(&g, &hp, 0.01).unwrap();
        let expected = 1.0 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut s, _) = store_with(vec![1.0, 2.0]);
        let other = ParamStore::new().zero_grads();
        assert!(matches!(
            s.adamw_step(&other, &AdamW::default(), 0.1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn clip_norm_caps_global_norm() {
        let (s, id) = store_with(vec![0.0, 0.0]);
        let mut g = s.zero_grads();
        g.add(id, &[3.0, 4.0]);
        assert_eq!(g.clip_norm(1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
