use crate::error::{dim_err, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Round a value to the precision of this dtype.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

/// Dense row-major array. Values are held as `f64`; an `F32` tensor only
/// ever holds values representable in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(dim_err("tensor", shape, &[data.len()]));
        }
        let mut t = Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
            grad: None,
            requires_grad: false,
        };
        t.round_to_dtype();
        Ok(t)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(shape, data, DType::F64)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; numel(shape)],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let mut t = Self::zeros(shape, dtype);
        t.data.iter_mut().for_each(|x| *x = dtype.round(value));
        t
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::full(&[1], value, dtype)
    }

    pub fn randn(shape: &[usize], std: f64, dtype: DType, rng: &mut SeededRng) -> Self {
        let data = rng.normal_vec(numel(shape), std);
        Self::new(shape, data, dtype).expect("shape matches generated data")
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, dtype: DType, rng: &mut SeededRng) -> Self {
        let data = rng.uniform_vec(numel(shape), lo, hi);
        Self::new(shape, data, dtype).expect("shape matches generated data")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let mut t = Tensor {
            shape: self.shape.clone(),
            dtype,
            data: self.data.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        };
        t.round_to_dtype();
        t
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(dim_err("reshape", &self.shape, shape));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        t.grad = None;
        Ok(t)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = self.dtype.round(value);
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows of the trailing axis, e.g. descriptors of an `[N, d]` tensor.
    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        let d = *self.shape.last().unwrap_or(&1);
        self.data.chunks(d.max(1))
    }

    pub(crate) fn round_to_dtype(&mut self) {
        if self.dtype == DType::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut t = Tensor {
            shape,
            dtype,
            data,
            grad: None,
            requires_grad: false,
        };
        t.round_to_dtype();
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn f32_tensors_hold_single_precision_values() {
        let t = Tensor::new(&[1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.get(&[0, 1]), 1.0);
    }
}
