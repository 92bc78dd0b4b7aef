//! Generator and discriminator networks.
//!
//! The generator is a stack of four conv blocks (two kernel-3 convolutions
//! and one kernel-1 convolution each, Swish activations) followed by a
//! kernel-3 reduction to one channel with Tanh. Its output is scaled by a
//! learnable `alpha`, added back to the input waveform, and high-pass
//! filtered.
//!
//! The discriminator starts with a 5-tap constrained (prediction-error)
//! convolution, then five BN/Tanh convolutions with three length-halving
//! max-pools, and three fully connected layers ending in a sigmoid that
//! scores the probability that the input is unaltered audio.

use ndarray::{s, Array1, Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, FilterSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, BatchNorm1d, Cache, Conv1d, Grads, Layer, Linear, Module, Param, Real, Sequential};

/// Default waveform length; the only length for which the discriminator's
/// flatten width is 47808 with 64 channels and three halvings.
pub const DEFAULT_FRAME_LEN: usize = 5980;
pub const CONSTRAINED_TAPS: usize = 5;
const CONSTRAINED_CENTER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Output channels of the four conv blocks.
    pub channels: [usize; 4],
    pub alpha_init: f64,
    pub highpass_hz: f64,
    pub highpass_taps: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            channels: [64, 128, 256, 128],
            alpha_init: 0.01,
            highpass_hz: dsp::DEFAULT_HIGHPASS_HZ,
            highpass_taps: dsp::DEFAULT_HIGHPASS_TAPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub fc: [usize; 2],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { channels: 64, fc: [256, 128] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub branch: Sequential<T>,
    /// Scalar residual scale, stored as a 1-element tensor.
    pub alpha: Param<T>,
    pub highpass: FilterSpec,
    pub frame_len: usize,
    taps: Vec<T>,
}

pub struct GeneratorCache<T> {
    branch: Vec<Cache<T>>,
    branch_out: Array3<T>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng>(config: &GeneratorConfig, frame_len: usize, sample_rate: u32, rng: &mut R) -> Result<Self> {
        let highpass = dsp::design_highpass(config.highpass_hz, sample_rate, config.highpass_taps)?;
        let mut layers = Vec::new();
        let mut in_ch = 1;
        for &c in &config.channels {
            if c == 0 {
                return Err(Error::config("generator.channels", "channel counts must be positive"));
            }
            layers.push(Layer::Conv(Conv1d::same(in_ch, c, 3, rng)));
            layers.push(Layer::Act(Activation::Swish));
            layers.push(Layer::Conv(Conv1d::same(c, c, 3, rng)));
            layers.push(Layer::Act(Activation::Swish));
            layers.push(Layer::Conv(Conv1d::same(c, c, 1, rng)));
            layers.push(Layer::Act(Activation::Swish));
            in_ch = c;
        }
        layers.push(Layer::Conv(Conv1d::same(in_ch, 1, 3, rng)));
        layers.push(Layer::Act(Activation::Tanh));
        let alpha = Param { value: ArrayD::from_elem(IxDyn(&[1]), T::lit(config.alpha_init)) };
        Ok(Self::from_parts(Sequential::new(layers), alpha, highpass, frame_len))
    }

    pub fn from_parts(branch: Sequential<T>, alpha: Param<T>, highpass: FilterSpec, frame_len: usize) -> Self {
        let taps = highpass.taps.iter().map(|&t| T::lit(t)).collect();
        Generator { branch, alpha, highpass, frame_len, taps }
    }

    pub fn alpha(&self) -> T {
        self.alpha.value[[0]]
    }

    pub fn set_alpha(&mut self, a: T) {
        self.alpha.value[[0]] = a;
    }

    /// `(in, out, kernel)` of every convolution in the branch.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.branch
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some((c.in_channels(), c.out_channels(), c.kernel())),
                _ => None,
            })
            .collect()
    }

    fn check(&self, x: &Array3<T>) -> Result<()> {
        let (_, c, l) = x.dim();
        if c != 1 || l != self.frame_len {
            return Err(Error::shape(format!(
                "generator expects [B, 1, {}], got [{}, {c}, {l}]",
                self.frame_len,
                x.dim().0
            )));
        }
        Ok(())
    }

    fn filter_rows(&self, s: &Array3<T>) -> Array3<T> {
        let mut y = Array3::<T>::zeros(s.raw_dim());
        for b in 0..s.dim().0 {
            let row = s.slice(s![b, 0, ..]).to_vec();
            let mut out = vec![T::zero(); row.len()];
            dsp::fir_same(&row, &self.taps, &mut out);
            y.slice_mut(s![b, 0, ..]).assign(&Array1::from(out));
        }
        y
    }

    /// `highpass(x + alpha * branch(x))`.
    pub fn forward(&self, x: &Array3<T>) -> Result<(Array3<T>, GeneratorCache<T>)> {
        self.check(x)?;
        let (branch_out, branch) = self.branch.forward(x, true);
        let s = x + &(&branch_out * self.alpha());
        Ok((self.filter_rows(&s), GeneratorCache { branch, branch_out }))
    }

    pub fn infer(&self, x: &Array3<T>) -> Result<Array3<T>> {
        self.check(x)?;
        let b = self.branch.infer(x);
        Ok(self.filter_rows(&(x + &(&b * self.alpha()))))
    }

    /// Accumulates parameter gradients (alpha first, then the branch) for
    /// upstream gradient `dy`.
    pub fn backward(&self, cache: GeneratorCache<T>, dy: &Array3<T>, grads: &mut Grads<T>) {
        let mut ds = Array3::<T>::zeros(dy.raw_dim());
        for b in 0..dy.dim().0 {
            let g = dy.slice(s![b, 0, ..]).to_vec();
            let mut out = vec![T::zero(); g.len()];
            dsp::fir_same_adjoint(&g, &self.taps, &mut out);
            ds.slice_mut(s![b, 0, ..]).assign(&Array1::from(out));
        }
        let dalpha: T = ds.iter().zip(cache.branch_out.iter()).map(|(&g, &v)| g * v).sum();
        grads[0][[0]] += dalpha;
        let dbranch = ds * self.alpha();
        self.branch.backward(cache.branch, dbranch, Some(&mut grads[1..]));
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator::from_parts(self.branch.cast(), self.alpha.cast(), self.highpass.clone(), self.frame_len)
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((crate::nn::join(prefix, "alpha"), &self.alpha));
        self.branch.params(&crate::nn::join(prefix, "branch"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((crate::nn::join(prefix, "alpha"), &mut self.alpha));
        self.branch.params_mut(&crate::nn::join(prefix, "branch"), out);
    }
}

/// Projects 5 taps onto the prediction-error constraint: center `-1`, the
/// remaining taps rescaled to sum to 1 (uniform `0.25` when they sum to ~0).
pub fn constrain_kernel<T: Real>(taps: &[T; CONSTRAINED_TAPS]) -> [T; CONSTRAINED_TAPS] {
    let others: T = taps.iter().enumerate().filter(|(i, _)| *i != CONSTRAINED_CENTER).map(|(_, &v)| v).sum();
    let mut out = [T::zero(); CONSTRAINED_TAPS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = if i == CONSTRAINED_CENTER {
            -T::one()
        } else if others.abs() < T::lit(1e-12) {
            T::lit(0.25)
        } else {
            taps[i] / others
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    /// `[5]` prediction-error taps, applied as a valid (unpadded) correlation.
    pub constrained: Param<T>,
    pub features: Sequential<T>,
    pub input_len: usize,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache<T> {
    input: Array3<T>,
    features: Vec<Cache<T>>,
    probs: Array1<T>,
}

/// Length after the constrained layer and three halvings.
pub fn pooled_len(input_len: usize) -> Option<usize> {
    input_len.checked_sub(CONSTRAINED_TAPS - 1).map(|l| l / 2 / 2 / 2).filter(|&l| l > 0)
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng>(config: &DiscriminatorConfig, input_len: usize, rng: &mut R) -> Result<Self> {
        let pooled = pooled_len(input_len)
            .ok_or_else(|| Error::config("data.frame_len", format!("frame length {input_len} too short for the discriminator")))?;
        let c = config.channels;
        let bn_tanh = |layers: &mut Vec<Layer<T>>| {
            layers.push(Layer::BatchNorm(BatchNorm1d::new(c)));
            layers.push(Layer::Act(Activation::Tanh));
        };
        let mut layers = Vec::new();
        layers.push(Layer::Conv(Conv1d::same(1, c, 7, rng)));
        bn_tanh(&mut layers);
        layers.push(Layer::Conv(Conv1d::same(c, c, 7, rng)));
        bn_tanh(&mut layers);
        layers.push(Layer::MaxPool(2));
        layers.push(Layer::Conv(Conv1d::same(c, c, 5, rng)));
        bn_tanh(&mut layers);
        layers.push(Layer::Conv(Conv1d::same(c, c, 5, rng)));
        bn_tanh(&mut layers);
        layers.push(Layer::MaxPool(2));
        layers.push(Layer::Conv(Conv1d::same(c, c, 3, rng)));
        bn_tanh(&mut layers);
        layers.push(Layer::MaxPool(2));
        layers.push(Layer::Flatten);
        layers.push(Layer::Linear(Linear::new(c * pooled, config.fc[0], rng)));
        layers.push(Layer::Act(Activation::Tanh));
        layers.push(Layer::Linear(Linear::new(config.fc[0], config.fc[1], rng)));
        layers.push(Layer::Act(Activation::Tanh));
        layers.push(Layer::Linear(Linear::new(config.fc[1], 1, rng)));
        layers.push(Layer::Act(Activation::Sigmoid));

        let mut constrained = Param::fan_in_uniform(&[CONSTRAINED_TAPS], CONSTRAINED_TAPS, rng);
        let mut disc = Discriminator { constrained: constrained.clone(), features: Sequential::new(layers), input_len };
        disc.project_constraint();
        constrained.value.assign(&disc.constrained.value);
        Ok(disc)
    }

    /// Width of the flattened feature vector feeding the first dense layer.
    pub fn flatten_width(&self) -> usize {
        self.features
            .layers
            .iter()
            .find_map(|l| match l {
                Layer::Linear(lin) => Some(lin.in_features()),
                _ => None,
            })
            .expect("discriminator has dense layers")
    }

    pub fn kernel(&self) -> [T; CONSTRAINED_TAPS] {
        let mut k = [T::zero(); CONSTRAINED_TAPS];
        for (i, v) in self.constrained.value.iter().enumerate() {
            k[i] = *v;
        }
        k
    }

    /// Re-applies the constraint; call after every optimizer step.
    pub fn project_constraint(&mut self) {
        let k = constrain_kernel(&self.kernel());
        for (dst, v) in self.constrained.value.iter_mut().zip(k) {
            *dst = v;
        }
    }

    fn check(&self, x: &Array3<T>) -> Result<()> {
        let (_, c, l) = x.dim();
        if c != 1 || l != self.input_len {
            return Err(Error::shape(format!(
                "discriminator expects [B, 1, {}], got [{}, {c}, {l}]",
                self.input_len,
                x.dim().0
            )));
        }
        Ok(())
    }

    fn constrained_conv(&self, x: &Array3<T>) -> Array3<T> {
        let (b, _, l) = x.dim();
        let k = self.kernel();
        let lo = l - (CONSTRAINED_TAPS - 1);
        let mut y = Array3::<T>::zeros((b, 1, lo));
        for bi in 0..b {
            let xr = x.slice(s![bi, 0, ..]);
            let mut yr = y.slice_mut(s![bi, 0, ..]);
            for t in 0..lo {
                yr[t] = (0..CONSTRAINED_TAPS).map(|j| k[j] * xr[t + j]).sum();
            }
        }
        y
    }

    /// Probability per batch item that the input is unaltered audio.
    pub fn forward(&self, x: &Array3<T>, train: bool) -> Result<(Array1<T>, DiscriminatorCache<T>)> {
        self.check(x)?;
        let h = self.constrained_conv(x);
        let (out, features) = self.features.forward(&h, train);
        let probs = out.into_shape_with_order(x.dim().0).expect("one output per item");
        Ok((probs.clone(), DiscriminatorCache { input: x.clone(), features, probs }))
    }

    pub fn infer(&self, x: &Array3<T>) -> Result<Array1<T>> {
        self.check(x)?;
        let out = self.features.infer(&self.constrained_conv(x));
        Ok(out.into_shape_with_order(x.dim().0).expect("one output per item"))
    }

    pub fn commit_stats(&mut self, cache: &DiscriminatorCache<T>) {
        self.features.commit_stats(&cache.features);
    }

    /// Backpropagates `dL/dp`; returns `dL/dx` and accumulates parameter
    /// gradients when `grads` is given.
    pub fn backward(&self, cache: DiscriminatorCache<T>, dprobs: &Array1<T>, grads: Option<&mut Grads<T>>) -> Array3<T> {
        let b = dprobs.len();
        debug_assert_eq!(cache.probs.len(), b);
        let dout = dprobs.clone().into_shape_with_order((b, 1, 1)).expect("shape");
        let (gk, gf) = match grads {
            Some(g) => {
                let (a, rest) = g.split_at_mut(1);
                (Some(a), Some(rest))
            }
            None => (None, None),
        };
        let dh = self.features.backward(cache.features, dout, gf);
        let k = self.kernel();
        let x = &cache.input;
        let l = x.dim().2;
        let lo = dh.dim().2;
        let mut dx = Array3::<T>::zeros((b, 1, l));
        let mut dk = [T::zero(); CONSTRAINED_TAPS];
        for bi in 0..b {
            for t in 0..lo {
                let g = dh[[bi, 0, t]];
                for j in 0..CONSTRAINED_TAPS {
                    dx[[bi, 0, t + j]] += k[j] * g;
                    dk[j] += x[[bi, 0, t + j]] * g;
                }
            }
        }
        if let Some(gk) = gk {
            for (dst, v) in gk[0].iter_mut().zip(dk) {
                *dst += v;
            }
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { constrained: self.constrained.cast(), features: self.features.cast(), input_len: self.input_len }
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((crate::nn::join(prefix, "constrained"), &self.constrained));
        self.features.params(&crate::nn::join(prefix, "features"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((crate::nn::join(prefix, "constrained"), &mut self.constrained));
        self.features.params_mut(&crate::nn::join(prefix, "features"), out);
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        self.features.buffers(&crate::nn::join(prefix, "features"), out);
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        self.features.buffers_mut(&crate::nn::join(prefix, "features"), out);
    }
}
