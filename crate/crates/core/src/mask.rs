use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Binary segmentation mask, row-major, values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(shape_err!("mask {height}×{width} cannot hold {} values", data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(invalid!("mask values must be 0 or 1, found {v}"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Elementwise combination of two same-sized masks.
    pub fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        if !self.same_dims(other) {
            return Err(shape_err!(
                "mask {}×{} vs {}×{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a == 1, b == 1) as u8)
                .collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.height, self.width], |i| self.data[i] as f32)
    }
}
