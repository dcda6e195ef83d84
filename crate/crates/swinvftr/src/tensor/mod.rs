//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is the universal value type: a row-major f32 buffer plus shape.
//! Differentiable computation goes through a [`tape::Tape`] which records every
//! operation and replays it backwards; [`gradcheck`] verifies the recorded
//! gradients against 64-bit central finite differences.

pub mod conv;
pub mod gradcheck;
pub mod math;
pub mod tape;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub fn fmt_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Dense N-dimensional array of f32 in row-major order.
///
/// `grad` is populated by the tape after a backward pass through a leaf with
/// `requires_grad` set.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {} implies {} elements, got {}",
                fmt_shape(&shape),
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform values in [-scale, scale), seeded; for tests and oracles.
    pub fn rand_uniform(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {} to {}",
                fmt_shape(&self.shape),
                fmt_shape(&shape)
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn scalar(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "scalar() on non-scalar tensor");
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// How a parameter tensor is filled at construction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitSpec {
    /// Normal(0, std) resampled until within 2 standard deviations.
    TruncNormal(f32),
    Zeros,
    Ones,
}

/// A named, trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub init: InitSpec,
}

impl Parameter {
    pub fn new(name: String, shape: &[usize], init: InitSpec, rng: &mut ChaCha8Rng) -> Self {
        let tensor = match init {
            InitSpec::TruncNormal(std) => {
                Tensor::from_fn(shape, |_| trunc_normal_sample(std, rng)).requires_grad()
            }
            InitSpec::Zeros => Tensor::zeros(shape).requires_grad(),
            InitSpec::Ones => Tensor::full(shape, 1.0).requires_grad(),
        };
        Parameter { name, tensor, init }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

fn trunc_normal_sample(std: f32, rng: &mut ChaCha8Rng) -> f32 {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat registry of model parameters in creation order.
///
/// Creation order is the canonical order for checkpoints, optimizer state and
/// gradient extraction, so it must be deterministic for a given config.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: String,
        shape: &[usize],
        init: InitSpec,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(name, shape, init, rng));
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tensor_shape_mismatch_is_error() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(msg.contains('5'), "{msg}");
    }

    #[test]
    fn trunc_normal_respects_bounds_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Parameter::new("w".into(), &[1000], InitSpec::TruncNormal(0.02), &mut rng);
        assert!(p.tensor.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));

        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let p2 = Parameter::new("w".into(), &[1000], InitSpec::TruncNormal(0.02), &mut rng2);
        assert_eq!(p.tensor.data(), p2.tensor.data());
    }

    #[test]
    fn param_store_orders_by_insertion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.add("a".into(), &[2], InitSpec::Zeros, &mut rng);
        let b = store.add("b".into(), &[3], InitSpec::Ones, &mut rng);
        assert_eq!(a, ParamId(0));
        assert_eq!(b, ParamId(1));
        assert_eq!(store.get(b).tensor.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.total_elements(), 5);
    }
}
