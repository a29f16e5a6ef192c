use rand::Rng;

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors, each paired with a gradient slot of equal shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.grads.push(Matrix::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let m = Matrix::new(fan_in, fan_out, data).expect("glorot init is finite");
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set_value",
                lhs: old.shape(),
                rhs: value.shape(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds `scale * grads` into the gradient slots, in parameter order.
    pub fn accumulate(&mut self, grads: &ParamGrads, scale: f64) -> Result<()> {
        if grads.slots.len() != self.grads.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient set has {} slots, store has {}",
                grads.slots.len(),
                self.grads.len()
            )));
        }
        for (slot, g) in self.grads.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                if g.shape() != slot.shape() {
                    return Err(Error::Shape {
                        op: "ParamStore::accumulate",
                        lhs: slot.shape(),
                        rhs: g.shape(),
                    });
                }
                for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s += scale * v;
                }
            }
        }
        if self.grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("ParamStore::accumulate"));
        }
        Ok(())
    }

    pub fn grads(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Parameter gradients produced by one backward pass. Slots for parameters
/// that never appeared on the tape stay `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub(crate) slots: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient at a flat coordinate; parameters absent from the tape read 0.
    pub fn coord(&self, id: ParamId, flat: usize) -> f64 {
        self.get(id).map_or(0.0, |g| g.data()[flat])
    }
}
