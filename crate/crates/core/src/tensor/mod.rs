//! Minimal dense 5-axis tensor engine: forward and analytic backward passes
//! for every layer the network needs, Glorot initialization, Adam, and a
//! finite-difference gradient checker.
//!
//! Tensors are (batch, channel, depth, height, width), w-fastest. A volume's
//! x-fastest layout maps directly onto (d, h, w) = (z, y, x).

mod adam;
mod graph;
mod gradcheck;
mod ops;
mod rng;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{dot, max_rel_error, projection, projection_bounded};
pub use graph::{Graph, NodeId, ParamGrads};
pub use ops::*;
pub use rng::Rng;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of the engine: f32 for training, f64 for gradient checks.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + Send
    + Sync
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

pub type Shape5 = [usize; 5];

/// Dense (n, c, d, h, w) array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape5) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Shape5, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Spatial size d*h*w.
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, cc, dd, hh, ww] = self.shape;
        w + ww * (h + hh * (d + dd * (c + cc * n)))
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, d, h, w)]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64_())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_() - b.to_f64_()).abs())
            .fold(0.0, f64::max)
    }
}

/// Convolution parameters: odd cubic kernels, stride 1 or 2, same padding.
#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Vec<T>, stride: usize) -> Result<Self> {
        let [oc, _, kd, kh, kw] = weights.shape();
        if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                detail: format!("kernel dims must be odd, got {kd}x{kh}x{kw}"),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                detail: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        if bias.len() != oc {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                detail: format!("bias length {} != out channels {oc}", bias.len()),
            });
        }
        Ok(Self {
            weights,
            bias,
            stride,
        })
    }
}

/// Glorot-uniform init on [-L, L], L = sqrt(6 / (fan_in + fan_out)).
///
/// For a conv shape (oc, ic, kd, kh, kw): fan_in = ic*k^3, fan_out = oc*k^3.
/// Dense weights stored (c_out, c_in, 1, 1, 1) reduce to c_in / c_out.
pub fn glorot_uniform<T: Scalar>(shape: Shape5, rng: &mut Rng) -> Tensor<T> {
    let [oc, ic, kd, kh, kw] = shape;
    let k = kd * kh * kw;
    let fan_in = ic * k;
    let fan_out = oc * k;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64((2.0 * rng.next_f64() - 1.0) * limit))
        .collect();
    Tensor { shape, data }
}

/// Closed-form Glorot bound, exposed for tests and layout audits.
pub fn glorot_limit(shape: Shape5) -> f64 {
    let [oc, ic, kd, kh, kw] = shape;
    let k = kd * kh * kw;
    (6.0 / ((ic * k + oc * k) as f64)).sqrt()
}
