use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dense row-major array of `f64` values.
///
/// Gradient bookkeeping (`requires_grad`, `grad`) lives on the graph node that
/// owns a tensor, see [`crate::autodiff::Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive");
        let n = numel(&shape);
        Self { shape, data: vec![v; n] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: (0..n).map(&mut f).collect() }
    }

    /// Values drawn uniformly from `[-bound, bound)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut SplitMix64) -> Self {
        Self::from_fn(shape, |_| rng.uniform(-bound, bound))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
