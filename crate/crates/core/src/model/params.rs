use std::collections::HashMap;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Gradients, ParamId, Tensor};

/// Freeze/update groups. Every parameter belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Speech,
    Adapter,
    TextEncoder,
    TextDecoder,
    SharedEmbed,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Speech,
        ParamGroup::Adapter,
        ParamGroup::TextEncoder,
        ParamGroup::TextDecoder,
        ParamGroup::SharedEmbed,
    ];

    /// Groups belonging to the text model (what MT pre-finetuning trains).
    pub fn is_text(self) -> bool {
        matches!(
            self,
            ParamGroup::TextEncoder | ParamGroup::TextDecoder | ParamGroup::SharedEmbed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors with accumulated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Registers a parameter. Panics on a duplicate name, which is a layout bug.
    pub fn add(&mut self, name: String, group: ParamGroup, value: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group,
            value,
            grad,
        });
        id
    }

    /// Xavier-uniform weight.
    pub fn add_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: String,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_bounded(rng, name, group, shape, bound)
    }

    /// Weight drawn from `U(-bound, bound)`.
    pub fn add_bounded<R: Rng>(
        &mut self,
        rng: &mut R,
        name: String,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product");
        self.add(name, group, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds tape gradients into the stored accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            for (acc, &v) in self.params[id.0].grad.data_mut().iter_mut().zip(g.data()) {
                *acc += v;
            }
        }
    }

    /// Order-sensitive FNV-1a digest over names and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for p in &self.params {
            eat(p.name.as_bytes());
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }
}
