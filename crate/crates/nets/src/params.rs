//! Named parameter tensors and their gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub info: Vec<ParamInfo>,
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            info: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: String, shape: Vec<usize>, values: Vec<T>) -> ParamId {
        let info = ParamInfo { name, shape };
        assert_eq!(info.len(), values.len(), "parameter {} size", info.name);
        assert!(
            self.info.iter().all(|p| p.name != info.name),
            "duplicate parameter {}",
            info.name
        );
        self.info.push(info);
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    /// He-normal weights for a layer with `fan_in` inputs.
    pub fn add_he(&mut self, name: String, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let values = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
        self.add(name, shape, values)
    }

    pub fn add_const(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::from_f64_lossy(value); n])
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.info.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.info.iter().map(ParamInfo::len).sum()
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            values: self.values.iter().map(|v| vec![T::zero(); v.len()]).collect(),
        }
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            info: self.info.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect())
                .collect(),
        }
    }
}

/// Gradient buffers laid out like the store they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub values: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = *x * k);
        }
    }

    /// Euclidean norm over the tensors whose names satisfy `select`.
    pub fn norm_where(&self, info: &[ParamInfo], select: impl Fn(&str) -> bool) -> f64 {
        self.values
            .iter()
            .zip(info)
            .filter(|(_, p)| select(&p.name))
            .flat_map(|(v, _)| v.iter())
            .map(|x| x.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}
