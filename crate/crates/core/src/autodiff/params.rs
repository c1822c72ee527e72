use std::collections::HashMap;

use super::tensor::Tensor;
use super::AutodiffError;
use crate::rng::XorShift64;

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam first and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named parameters in insertion order, plus optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    moments: Vec<Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let n = value.len();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.moments.push(Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(self.names.len() - 1))
    }

    /// Xavier-uniform initialized parameter.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut XorShift64,
    ) -> Result<ParamId, AutodiffError> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId, AutodiffError> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.moments[id.0]
    }

    pub fn moments_mut(&mut self, id: ParamId) -> &mut Moments {
        &mut self.moments[id.0]
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, cfg: &AdamConfig) -> Result<(), AutodiffError> {
    if grads.len() != store.len() {
        return Err(AutodiffError::KeyMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (i, g) in grads.grads.iter().enumerate() {
        if g.shape() != store.values[i].shape() {
            return Err(AutodiffError::KeyMismatch(format!(
                "gradient for '{}' has shape {:?}, parameter has {:?}",
                store.names[i],
                g.shape(),
                store.values[i].shape()
            )));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.grads.iter().enumerate() {
        let Moments { m, v } = &mut store.moments[i];
        let w = store.values[i].data_mut();
        for j in 0..w.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_ordered() {
        let mut s = ParamStore::new();
        let a = s.add_zeros("a", &[2]).unwrap();
        let b = s.add_zeros("b", &[3]).unwrap();
        assert!(matches!(s.add_zeros("a", &[1]), Err(AutodiffError::DuplicateParam(_))));
        assert_eq!(s.ids().collect::<Vec<_>>(), vec![a, b]);
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.num_scalars(), 5);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        let mut rng = XorShift64::new(1);
        s.add_xavier("w", &[3, 4], 3, 4, &mut rng).unwrap();
        let before = s.clone();
        let g = ParamGrads::zeros_like(&s);
        adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(s.values, before.values);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn one_step_descends_half_square() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::vector(vec![1.0])).unwrap();
        // f = x²/2, f' = x
        let g = ParamGrads::from_tensors(vec![s.value(x).clone()]);
        adam_step(&mut s, &g, &AdamConfig::with_lr(0.1)).unwrap();
        assert!(s.value(x).item() < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let cfg = AdamConfig::with_lr(0.05);
        for _ in 0..200 {
            // f = ½(x₀² + 4·x₁²)
            let v = s.value(x).data().to_vec();
            let g = ParamGrads::from_tensors(vec![Tensor::vector(vec![v[0], 4.0 * v[1]])]);
            adam_step(&mut s, &g, &cfg).unwrap();
        }
        let v = s.value(x).data();
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(norm <= 1e-3, "norm {norm}");
    }

    #[test]
    fn key_mismatch() {
        let mut s = ParamStore::new();
        s.add_zeros("x", &[2]).unwrap();
        let g = ParamGrads::from_tensors(vec![]);
        assert!(matches!(adam_step(&mut s, &g, &AdamConfig::default()), Err(AutodiffError::KeyMismatch(_))));
        let g = ParamGrads::from_tensors(vec![Tensor::zeros(&[3])]);
        assert!(matches!(adam_step(&mut s, &g, &AdamConfig::default()), Err(AutodiffError::KeyMismatch(_))));
    }

    #[test]
    fn xavier_within_limit_and_deterministic() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let id = a.add_xavier("w", &[10, 20], 10, 20, &mut XorShift64::new(5)).unwrap();
        b.add_xavier("w", &[10, 20], 10, 20, &mut XorShift64::new(5)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(a.value(id).data().iter().all(|v| v.abs() <= limit));
    }
}
