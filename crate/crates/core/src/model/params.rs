//! Named parameter storage with seeded initialization.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Owns every trainable [`Var`] (and non-trainable buffers such as batch-norm
/// running statistics) under a dotted name, in creation order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, device: Device::Cpu, params: Vec::new(), buffers: Vec::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    /// Sum of element counts of trainable parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn make(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let v = self.make(values, shape)?;
        self.params.push((name, v.clone()));
        Ok(v)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v = self.make(vec![value; n], shape)?;
        self.params.push((name, v.clone()));
        Ok(v)
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v = self.make(vec![value; n], shape)?;
        self.buffers.push((name, v.clone()));
        Ok(v)
    }

    /// Every parameter and buffer as `(name, tensor)`, parameters first.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Looks up a parameter or buffer.
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params
            .iter()
            .chain(&self.buffers)
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }
}

/// Parameter factory threaded through layer constructors.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    /// Runs `f` with `segment` appended to the name prefix.
    pub fn scoped<T>(&mut self, segment: &str, f: impl FnOnce(&mut Init<'_>) -> Result<T>) -> Result<T> {
        let prefix = self.name(segment);
        let mut child = Init { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    /// Fan-in scaled uniform `U(-1/√fan_in, 1/√fan_in)`.
    pub fn fan_in(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let name = self.name(leaf);
        self.store.uniform(name, shape, 1.0 / (fan_in as f64).sqrt(), self.rng)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> Result<Var> {
        let name = self.name(leaf);
        self.store.constant(name, shape, 0.0)
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> Result<Var> {
        let name = self.name(leaf);
        self.store.constant(name, shape, 1.0)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Var> {
        let name = self.name(leaf);
        self.store.buffer(name, shape, value)
    }
}
