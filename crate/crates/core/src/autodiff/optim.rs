use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameters with their Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    params: Vec<Arc<Tensor<T>>>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    /// Number of optimizer steps taken.
    pub step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            params: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::structural(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.m.push(Tensor::zeros(&value.shape));
        self.v.push(Tensor::zeros(&value.shape));
        self.params.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].clone()
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let shape = &self.params[id.0].shape;
        if &m.shape != shape || &v.shape != shape {
            return Err(Error::structural(format!("moment shape mismatch for {}", self.names[id.0])));
        }
        self.m[id.0] = m;
        self.v[id.0] = v;
        Ok(())
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        }
    }

    /// Converts all parameters and moments to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
            m: self.m.iter().map(|t| t.cast()).collect(),
            v: self.v.iter().map(|t| t.cast()).collect(),
            step: self.step,
        }
    }
}

/// One gradient tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn accumulate(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.data.len() != g.len() {
            return Err(Error::structural(format!(
                "gradient of {} values for parameter of shape {:?}",
                g.len(),
                t.shape
            )));
        }
        t.data.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

pub fn global_norm<T: Scalar>(grads: &Grads<T>) -> f64 {
    grads
        .tensors
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::parameter(format!("max_norm must be > 0, got {max_norm}")));
    }
    let g = global_norm(grads);
    if g > max_norm {
        grads.scale(T::of(max_norm / g));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of every parameter.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if grads.tensors.len() != store.len() {
        return Err(Error::structural(format!(
            "{} gradients for {} parameters",
            grads.tensors.len(),
            store.len()
        )));
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    let one = T::one();
    for i in 0..store.len() {
        let g = &grads.tensors[i];
        if g.shape != store.params[i].shape {
            return Err(Error::structural(format!("gradient shape mismatch for {}", store.names[i])));
        }
        let p = Arc::make_mut(&mut store.params[i]);
        let (m, v) = (&mut store.m[i].data, &mut store.v[i].data);
        for j in 0..g.data.len() {
            let gj = g.data[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p.data[j] = p.data[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warm-up from 0 to `lr_max` over `warmup` steps, then exponential
/// decay reaching `lr_min` at `total`.
pub fn lr_schedule(step: u64, total: u64, lr_max: f64, lr_min: f64, warmup: u64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::parameter(format!(
            "total steps {total} must exceed warm-up {warmup}"
        )));
    }
    if step > total {
        return Err(Error::parameter(format!("step {step} beyond total {total}")));
    }
    if step < warmup {
        return Ok(lr_max * step as f64 / warmup as f64);
    }
    if step == total {
        return Ok(lr_min);
    }
    let frac = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(lr_max * (lr_min / lr_max).powf(frac))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(v: &[f64]) -> Grads<f64> {
        Grads {
            tensors: vec![Tensor::new(vec![v.len()], v.to_vec()).unwrap()],
        }
    }

    #[test]
    fn clipping() {
        let mut g = grads(&[0.3, 0.4]);
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g.tensors[0].data, vec![0.3, 0.4]);

        let mut g = grads(&[0.0, 4.0, 0.0]);
        let mut h = grads(&[2.4, 3.2]);
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 4.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(g.tensors[0].data[1], 1.0);
        clip_global_norm(&mut h, 1.0).unwrap();
        let cos = (h.tensors[0].data[0] * 2.4 + h.tensors[0].data[1] * 3.2) / (global_norm(&h) * 4.0);
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(clip_global_norm(&mut h, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        adam_step(&mut s, &grads(&[1.0]), 0.1, &AdamConfig::default()).unwrap();
        assert!((s.get(id).data[0] - 0.9).abs() < 1e-6);
        let (m0, v0) = (s.moments(id).0.data[0], s.moments(id).1.data[0]);
        let before = s.get(id).data[0];
        adam_step(&mut s, &grads(&[0.0]), 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).data[0], before);
        assert!((s.moments(id).0.data[0] - 0.9 * m0).abs() < 1e-15);
        assert!((s.moments(id).1.data[0] - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        // f(x) = (x0 - 3)^2 + 10 (x1 + 1)^2, minimum at (3, -1)
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let cfg = AdamConfig::default();
        for step in 0..2000u64 {
            let x = s.get(id).data.clone();
            let g = grads(&[2.0 * (x[0] - 3.0), 20.0 * (x[1] + 1.0)]);
            let lr = 0.1 * 0.995f64.powi(step as i32);
            adam_step(&mut s, &g, lr, &cfg).unwrap();
        }
        let x = &s.get(id).data;
        assert!((x[0] - 3.0).abs() < 1e-4 && (x[1] + 1.0).abs() < 1e-4, "{x:?}");
    }

    #[test]
    fn schedule_endpoints() {
        let total = 10_000;
        assert_eq!(lr_schedule(0, total, 1e-4, 1e-6, 1000).unwrap(), 0.0);
        assert!((lr_schedule(1000, total, 1e-4, 1e-6, 1000).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(total, total, 1e-4, 1e-6, 1000).unwrap() - 1e-6).abs() <= 1e-18);
        let mid = lr_schedule(5500, total, 1e-4, 1e-6, 1000).unwrap();
        assert!((mid - 1e-5).abs() < 1e-15);
        assert!(lr_schedule(5, 1000, 1e-4, 1e-6, 1000).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
    }
}
