use crate::error::{Error, Result};

use super::Real;

/// Dense row-major array (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {expected} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds from `f64` values, rounding to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() needs a one-element tensor, shape is {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Element at a multi-index; panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| {
                assert!(i < extent, "index {index:?} out of bounds for {:?}", self.shape);
                acc * extent + i
            })
    }

    /// Copies the `[rows, cols]` window starting at `(row0, col0)` out of
    /// every channel of a `[C, H, W]` tensor.
    pub fn crop_chw(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        let [c, h, w] = self.chw()?;
        if row0 + rows > h || col0 + cols > w {
            return Err(Error::Dimension(format!(
                "window ({row0}+{rows}, {col0}+{cols}) exceeds extents ({h}, {w})"
            )));
        }
        let mut out = Vec::with_capacity(c * rows * cols);
        for ch in 0..c {
            for r in row0..row0 + rows {
                let start = (ch * h + r) * w + col0;
                out.extend_from_slice(&self.data[start..start + cols]);
            }
        }
        Tensor::new([c, rows, cols], out)
    }

    pub(crate) fn chw(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok([c, h, w]),
            s => Err(Error::Dimension(format!("expected a [C, H, W] tensor, got {s:?}"))),
        }
    }
}
