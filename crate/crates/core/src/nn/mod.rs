//! Minimal 1-D neural network layers with hand-written backward passes.
//!
//! Feature maps are `[batch, channels, length]` arrays. Fully connected
//! layers operate on `[batch, features, 1]` so every layer shares one tensor
//! shape. All layers are generic over [`Real`], which lets the same network
//! run in `f32` for training and `f64` for gradient checking.

mod layers;
mod optim;

use std::fmt::{Debug, Display};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub use layers::{
    Activation, BatchNorm1d, Cache, Conv1d, Layer, Linear, Residual, Sequential,
};
pub use optim::{Adam, AdamConfig, AdamState};

/// Floating point element type usable by the network layers.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE_NAME: &'static str;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE_NAME: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE_NAME: &'static str = "f64";
}

/// Learnable tensor. Gradients live outside the parameter in a [`Grads`]
/// buffer so frozen networks can be differentiated through `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param { value: ArrayD::zeros(IxDyn(shape)) }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            T::lit(rng.gen_range(-bound..bound))
        });
        Param { value }
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param { value: self.value.mapv(|v| U::lit(v.to_f64_lossy())) }
    }
}

/// Gradient buffer aligned with a network's parameter order.
pub type Grads<T> = Vec<ArrayD<T>>;

/// Shared traversal interface for anything holding parameters and buffers.
///
/// Parameter order is stable and identical across `params`, `params_mut`,
/// and gradient buffers.
pub trait Module<T: Real> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);
    fn buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a ArrayD<T>)>) {}
    fn buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut ArrayD<T>)>) {}

    fn zero_grads(&self) -> Grads<T> {
        let mut ps = Vec::new();
        self.params("", &mut ps);
        ps.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect()
    }

    fn num_parameters(&self) -> usize {
        let mut ps = Vec::new();
        self.params("", &mut ps);
        ps.iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Named parameter values followed by named buffers.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, &ArrayD<T>)> {
        let mut ps = Vec::new();
        self.params(prefix, &mut ps);
        let mut out: Vec<(String, &ArrayD<T>)> =
            ps.into_iter().map(|(n, p)| (n, &p.value)).collect();
        self.buffers(prefix, &mut out);
        out
    }

    /// Overwrites every parameter and buffer from `lookup`, failing on the
    /// first missing name or shape mismatch.
    fn load_named(
        &mut self,
        prefix: &str,
        lookup: &mut dyn FnMut(&str) -> Option<ArrayD<T>>,
    ) -> Result<(), String> {
        let mut ps = Vec::new();
        self.params_mut(prefix, &mut ps);
        for (name, p) in ps {
            assign(&name, &mut p.value, lookup(&name))?;
        }
        let mut bufs = Vec::new();
        self.buffers_mut(prefix, &mut bufs);
        for (name, b) in bufs {
            assign(&name, b, lookup(&name))?;
        }
        Ok(())
    }
}

fn assign<T: Real>(name: &str, dst: &mut ArrayD<T>, src: Option<ArrayD<T>>) -> Result<(), String> {
    let src = src.ok_or_else(|| format!("missing tensor `{name}`"))?;
    if src.shape() != dst.shape() {
        return Err(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        ));
    }
    *dst = src;
    Ok(())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Branch-free logistic function; relatively accurate for all finite `x`.
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `tanh` through a single `exp`, several times faster than the libm call.
pub fn tanh<T: Real>(x: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((x + x).exp() + T::one())
}

/// Elementwise `x * sigmoid(x)`.
pub fn swish<T: Real>(x: T) -> T {
    x * sigmoid(x)
}
