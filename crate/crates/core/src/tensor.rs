use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of dimension `axis`, counting from the end when negative.
    pub fn dim(&self, axis: isize) -> usize {
        let r = self.shape.len() as isize;
        let a = if axis < 0 { r + axis } else { axis };
        self.shape[a as usize]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            );
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossless()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossless())
            .fold(0.0, f64::max)
    }

    /// Rejects NaN and infinities, naming the offending tensor.
    pub fn assert_finite(&self, name: &str) -> Result<()> {
        assert_finite(name, &self.data)
    }
}

pub fn assert_finite<S: Scalar>(name: &str, data: &[S]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::NonFinite {
            name: name.to_string(),
            index,
            value: data[index].to_f64_lossless(),
        }),
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, x) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new([2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn finite_check() {
        let z = Tensor::<f64>::zeros([3, 3]);
        assert!(z.assert_finite("z").is_ok());
        let mut t = Tensor::<f64>::zeros([4]);
        t.data_mut()[2] = f64::INFINITY;
        match t.assert_finite("t") {
            Err(Error::NonFinite { name, index, .. }) => {
                assert_eq!(name, "t");
                assert_eq!(index, 2);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
        let mut n = Tensor::<f32>::zeros([2]);
        n.data_mut()[0] = f32::NAN;
        assert!(n.assert_finite("n").is_err());
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f64>::from_f64([2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
        assert_eq!(t.get(&[0, 1]), 1.0);
        assert_eq!(t.dim(-1), 3);
    }
}
