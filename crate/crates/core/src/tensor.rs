//! Dense row-major tensors.
//!
//! [`Tensor`] holds `f64` values; [`CTensor`] holds complex values. The two
//! never convert implicitly: going from complex to real is always an explicit
//! [`CTensor::re`] / [`CTensor::im`] split.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(|_| std * rng.normal()).collect();
        Tensor { shape, data }
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        match self.last_dim() {
            0 => 0,
            d => self.numel() / d,
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut o = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            o = o * n + i;
        }
        o
    }

    /// Row `i` of the `[rows, last_dim]` view.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Complex-valued tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<Complex64>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != data.len() {
            return shape_err(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            ));
        }
        Ok(CTensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        CTensor {
            shape,
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_parts(re: &Tensor, im: &Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return shape_err(format!(
                "real part {:?} vs imaginary part {:?}",
                re.shape(),
                im.shape()
            ));
        }
        let data = re
            .data()
            .iter()
            .zip(im.data())
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect();
        Ok(CTensor {
            shape: re.shape().to_vec(),
            data,
        })
    }

    pub fn re(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|c| c.re).collect(),
        }
    }

    pub fn im(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|c| c.im).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn max_abs_diff(&self, other: &CTensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.rows(), 2);
    }

    #[test]
    fn complex_split_round_trips() {
        let re = Tensor::from_vec(vec![1.0, 2.0]);
        let im = Tensor::from_vec(vec![-1.0, 0.5]);
        let c = CTensor::from_parts(&re, &im).unwrap();
        assert_eq!(c.re(), re);
        assert_eq!(c.im(), im);
        assert!(CTensor::from_parts(&re, &Tensor::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros(vec![2]).item().is_err());
    }
}
