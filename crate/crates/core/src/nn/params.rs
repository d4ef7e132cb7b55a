use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// False for frozen weights and for buffers such as running statistics.
    pub trainable: bool,
}

/// Named parameters and buffers of one model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { name: name.to_string(), value, grad, trainable });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng), true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape), true)
    }

    pub fn add_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0), true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.add(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Scalar count over trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// Marks every parameter whose name starts with one of `prefixes` frozen.
    pub fn freeze_prefixes(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            if prefixes.iter().any(|pre| p.name.starts_with(pre)) {
                p.trainable = false;
            }
        }
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape != value.shape {
            return Err(Error::Shape { op: "set_value", lhs: p.value.shape.clone(), rhs: value.shape });
        }
        p.value = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_bit_identical() {
        let build = |seed| {
            let mut s = ParamStore::new();
            let mut rng = crate::seed::rng(seed);
            s.add_uniform("w", &[4, 5], 5, &mut rng);
            s
        };
        let (a, b) = (build(3), build(3));
        let bits = |s: &ParamStore| s.iter().flat_map(|p| p.value.data.iter().map(|x| x.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&build(4)));
        let bound = 1.0 / 5f64.sqrt();
        assert!(a.iter().all(|p| p.value.data.iter().all(|v| v.abs() <= bound)));
    }

    #[test]
    fn buffers_not_counted() {
        let mut s = ParamStore::new();
        s.add_zeros("b", &[3]);
        s.add_buffer("rm", Tensor::zeros(&[3]));
        assert_eq!(s.num_trainable(), 3);
        assert_eq!(s.id("rm").map(|i| s.get(i).trainable), Some(false));
    }
}
