use crate::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    /// Sum of squares of all entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Product of all dims after the first two (spatial size of an `[N, C, ...]` tensor).
    pub fn spatial_size(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    /// Concatenates `[N_i, ...]` tensors along the leading axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "batch item shape {:?} differs from {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tail);
        Tensor::new(&shape, data)
    }

    /// Item `i` of the leading axis, keeping a leading dim of 1.
    pub fn batch_item(&self, i: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let n = first.shape[0];
        let spatial = first.spatial_size();
        let mut channels = 0;
        for t in items {
            if t.shape[0] != n || t.spatial_size() != spatial || t.shape[2..] != first.shape[2..] {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            channels += t.shape[1];
        }
        let mut data = Vec::with_capacity(n * channels * spatial);
        for b in 0..n {
            for t in items {
                let per = t.shape[1] * spatial;
                data.extend_from_slice(&t.data[b * per..(b + 1) * per]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend_from_slice(&first.shape[2..]);
        Tensor::new(&shape, data)
    }
}
