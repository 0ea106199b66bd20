//! Dense `f32` tensors, a reverse-mode tape over whole-tensor operations, and
//! a finite-difference gradient checker.

mod gemm;
pub mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{
    grad_check, relative_error, GradCheckOptions, GradCheckReport, GroupReport, F32_REL_ERROR_FLOOR, REL_ERROR_FLOOR,
};
pub use kernels::ConvGeometry;
pub use tape::{Gradients, Tape, Var};

use crate::error::{shape_err, Result};

pub const COSINE_EPS: f32 = 1e-6;
pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Row-major dense array of 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {:?}", shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `C×h×w`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(shape_err!("expected a C×h×w tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_assign(&mut self, factor: f32) {
        for a in &mut self.data {
            *a *= factor;
        }
    }
}

/// Plain SGD on a flat list of tensors: `p ← p − lr·g`.
pub fn sgd_update(params: &mut [&mut Tensor], grads: &[&Tensor], lr: f32) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape != g.shape {
            return Err(shape_err!(
                "parameter shape {:?} vs gradient shape {:?}",
                p.shape,
                g.shape
            ));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
