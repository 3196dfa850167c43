//! Named parameter storage and gradient buffers.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl ToString, value: Matrix) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform weights of shape `fan_in x fan_out`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl ToString,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Matrix::from_vec(fan_in, fan_out, data))
    }

    pub fn add_zeros(&mut self, name: impl ToString, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn map_all(&mut self, f: impl Fn(f64) -> f64) {
        for m in &mut self.values {
            *m = m.map(&f);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: (0..num_params).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots[id.0].as_ref()
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .slots
            .iter()
            .flatten()
            .flat_map(|m| m.data().iter())
            .map(|v| v * v)
            .sum();
        math::sqrt(sq)
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Matrix::is_finite)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Dropout applied after hidden activations while training.
pub struct Dropout<'a> {
    pub rng: &'a mut dyn rand::RngCore,
    pub rate: f64,
}

/// Stack of fully connected layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `(weight, bias)` per layer, weight shaped `in x out`.
    pub layers: Vec<(ParamId, ParamId)>,
    pub hidden_activation: crate::autograd::Activation,
    pub output_activation: crate::autograd::Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        dims: &[usize],
        hidden_activation: crate::autograd::Activation,
        output_activation: crate::autograd::Activation,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight =
                    store.add_glorot(alloc::format!("{prefix}.{i}.weight"), w[0], w[1], rng);
                let bias = store.add_zeros(alloc::format!("{prefix}.{i}.bias"), 1, w[1]);
                (weight, bias)
            })
            .collect();
        Self {
            layers,
            hidden_activation,
            output_activation,
        }
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].0).rows()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[self.layers.len() - 1].0).cols()
    }

    pub fn forward(
        &self,
        tape: &mut crate::autograd::Tape,
        store: &ParamStore,
        mut x: crate::autograd::Var,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> crate::autograd::Var {
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            x = tape.matmul(x, wv);
            x = tape.add_row_bias(x, bv);
            if i == last {
                x = tape.activation(x, self.output_activation);
            } else {
                x = tape.activation(x, self.hidden_activation);
                if let Some(d) = dropout.as_deref_mut() {
                    if d.rate > 0.0 {
                        let shape = tape.value(x).shape();
                        let keep = 1.0 - d.rate;
                        let mask = (0..shape.0 * shape.1)
                            .map(|_| {
                                if d.rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let m = tape.constant(Matrix::from_vec(shape.0, shape.1, mask));
                        x = tape.mul(x, m);
                    }
                }
            }
        }
        x
    }
}
