use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;

use super::{join, sigmoid, tanh, Module, Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Swish,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    /// Returns the output and the elementwise derivative `dy/dx`, which is
    /// all the backward pass needs.
    fn forward<T: Real>(self, x: Array3<T>) -> (Array3<T>, Array3<T>) {
        let one = T::one();
        let mut y = x;
        let mut d = Array3::<T>::zeros(y.raw_dim());
        match self {
            Activation::Identity => d.fill(one),
            Activation::Swish => ndarray::Zip::from(&mut y).and(&mut d).for_each(|v, g| {
                let s = sigmoid(*v);
                let out = *v * s;
                *g = s + out * (one - s);
                *v = out;
            }),
            Activation::Tanh => ndarray::Zip::from(&mut y).and(&mut d).for_each(|v, g| {
                *v = tanh(*v);
                *g = one - *v * *v;
            }),
            Activation::Relu => ndarray::Zip::from(&mut y).and(&mut d).for_each(|v, g| {
                if *v > T::zero() {
                    *g = one;
                } else {
                    *v = T::zero();
                }
            }),
            Activation::Sigmoid => ndarray::Zip::from(&mut y).and(&mut d).for_each(|v, g| {
                *v = sigmoid(*v);
                *g = *v * (one - *v);
            }),
        }
        (y, d)
    }

    fn backward<T: Real>(self, deriv: &Array3<T>, mut dy: Array3<T>) -> Array3<T> {
        dy.zip_mut_with(deriv, |g, &d| *g *= d);
        dy
    }
}

/// 1-D convolution over `[B, C, L]` with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    /// `[out, in, kernel]`
    pub weight: Param<T>,
    /// `[out]`
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel;
        Conv1d {
            weight: Param::fan_in_uniform(&[out_ch, in_ch, kernel], fan_in, rng),
            bias: Param::fan_in_uniform(&[out_ch], fan_in, rng),
            stride,
            padding,
        }
    }

    /// Stride 1 with padding that preserves length for odd kernels.
    pub fn same<R: Rng>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, kernel, 1, kernel / 2, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        let (o, i, k) = (self.out_channels(), self.in_channels(), self.kernel());
        self.weight.value.view().into_shape_with_order((o, i * k)).expect("contiguous weight")
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (b, c, l) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let l_out = self.out_len(l).expect("input shorter than kernel");
        let o = self.out_channels();
        let w2 = self.weight2();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().expect("bias rank");
        let mut y = Array3::<T>::zeros((b, o, l_out));
        for bi in 0..b {
            let xb = x.slice(s![bi, .., ..]);
            let mut yb = y.slice_mut(s![bi, .., ..]);
            if self.is_pointwise() {
                general_mat_mul(T::one(), &w2, &xb, T::zero(), &mut yb);
            } else if self.stride == 1 {
                direct_forward(&self.weight.value, xb, &mut yb, self.padding);
            } else {
                let cols = im2col(xb, self.kernel(), self.stride, self.padding, l_out);
                general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut yb);
            }
            for (mut row, &bv) in yb.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        y
    }

    /// Returns `dL/dx`; accumulates `dL/dW`, `dL/db` into `grads` when given.
    pub fn backward(&self, x: &Array3<T>, dy: &Array3<T>, grads: Option<&mut [ArrayD<T>]>) -> Array3<T> {
        let (b, c, l) = x.dim();
        let l_out = dy.dim().2;
        let (o, k) = (self.out_channels(), self.kernel());
        let w2 = self.weight2();
        let mut dx = Array3::<T>::zeros((b, c, l));
        let mut grads = grads.map(|g| {
            let (gw, gb) = g.split_at_mut(1);
            (
                gw[0].view_mut().into_shape_with_order((o, c * k)).expect("contiguous grad"),
                gb[0].view_mut().into_dimensionality::<Ix1>().expect("bias grad rank"),
            )
        });
        let mut dcols = Array2::<T>::zeros((c * k, l_out));
        for bi in 0..b {
            let xb = x.slice(s![bi, .., ..]);
            let dyb = dy.slice(s![bi, .., ..]);
            if self.is_pointwise() {
                if let Some((gw, gb)) = grads.as_mut() {
                    general_mat_mul(T::one(), &dyb, &xb.t(), T::one(), gw);
                    *gb += &dyb.sum_axis(Axis(1));
                }
                let mut dxb = dx.slice_mut(s![bi, .., ..]);
                general_mat_mul(T::one(), &w2.t(), &dyb, T::zero(), &mut dxb);
                continue;
            }
            if self.stride == 1 {
                if let Some((gw, gb)) = grads.as_mut() {
                    direct_weight_grad(xb, dyb, gw, k, self.padding);
                    *gb += &dyb.sum_axis(Axis(1));
                }
                direct_input_grad(&self.weight.value, dyb, dx.slice_mut(s![bi, .., ..]), self.padding);
                continue;
            }
            if let Some((gw, gb)) = grads.as_mut() {
                let cols = im2col(xb, k, self.stride, self.padding, l_out);
                general_mat_mul(T::one(), &dyb, &cols.t(), T::one(), gw);
                *gb += &dyb.sum_axis(Axis(1));
            }
            general_mat_mul(T::one(), &w2.t(), &dyb, T::zero(), &mut dcols);
            col2im(dcols.view(), dx.slice_mut(s![bi, .., ..]), k, self.stride, self.padding);
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> Conv1d<U> {
        Conv1d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Valid output positions `t` for kernel offset `j`: `pad <= t*stride + j < len + pad`.
fn valid_range(j: usize, stride: usize, pad: usize, len: usize, l_out: usize) -> (usize, usize) {
    let t0 = if pad > j { (pad - j).div_ceil(stride) } else { 0 };
    let t1 = if len + pad > j { (len + pad - j).div_ceil(stride).min(l_out) } else { 0 };
    (t0, t1.max(t0))
}

fn im2col<T: Real>(x: ArrayView2<T>, k: usize, stride: usize, pad: usize, l_out: usize) -> Array2<T> {
    let (c, l) = x.dim();
    let mut cols = Array2::<T>::zeros((c * k, l_out));
    for ci in 0..c {
        let xr = x.row(ci);
        let xr = xr.as_slice().expect("contiguous input row");
        for j in 0..k {
            let mut row = cols.row_mut(ci * k + j);
            let row = row.as_slice_mut().expect("contiguous cols row");
            let (t0, t1) = valid_range(j, stride, pad, l, l_out);
            if stride == 1 {
                let start = t0 + j - pad;
                row[t0..t1].copy_from_slice(&xr[start..start + (t1 - t0)]);
            } else {
                for t in t0..t1 {
                    row[t] = xr[t * stride + j - pad];
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: ArrayView2<T>, mut dx: ArrayViewMut2<T>, k: usize, stride: usize, pad: usize) {
    let (c, l) = dx.dim();
    let l_out = dcols.dim().1;
    for ci in 0..c {
        let mut xr = dx.row_mut(ci);
        let xr = xr.as_slice_mut().expect("contiguous dx row");
        for j in 0..k {
            let row = dcols.row(ci * k + j);
            let row = row.as_slice().expect("contiguous dcols row");
            let (t0, t1) = valid_range(j, stride, pad, l, l_out);
            for t in t0..t1 {
                xr[t * stride + j - pad] += row[t];
            }
        }
    }
}

/// Batch normalization over the batch and length axes, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm1d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Param { value: ArrayD::from_elem(IxDyn(&[channels]), T::one()) },
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward(&self, x: &Array3<T>, train: bool) -> (Array3<T>, BnCache<T>) {
        let (b, c, l) = x.dim();
        let n = (b * l) as f64;
        let (mean, var) = if train {
            let mut mean = Array1::<T>::zeros(c);
            let mut var = Array1::<T>::zeros(c);
            for ci in 0..c {
                let lane = x.slice(s![.., ci, ..]);
                let m = lane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
                let v = lane.iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / n;
                mean[ci] = T::lit(m);
                var[ci] = T::lit(v);
            }
            (mean, var)
        } else {
            (
                self.running_mean.clone().into_dimensionality::<Ix1>().expect("rank 1"),
                self.running_var.clone().into_dimensionality::<Ix1>().expect("rank 1"),
            )
        };
        let eps = T::lit(self.eps);
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("rank 1");
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().expect("rank 1");
        let mut xhat = x.clone();
        let mut y = Array3::<T>::zeros((b, c, l));
        for ci in 0..c {
            let (m, is) = (mean[ci], inv_std[ci]);
            xhat.slice_mut(s![.., ci, ..]).mapv_inplace(|v| (v - m) * is);
            let (g, be) = (gamma[ci], beta[ci]);
            y.slice_mut(s![.., ci, ..])
                .zip_mut_with(&xhat.slice(s![.., ci, ..]), |o, &h| *o = g * h + be);
        }
        let stats = train.then(|| {
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            (mean, var.mapv(|v| v * T::lit(unbias)))
        });
        (y, BnCache { xhat, inv_std, stats, train })
    }

    fn backward(&self, cache: &BnCache<T>, dy: &Array3<T>, grads: Option<&mut [ArrayD<T>]>) -> Array3<T> {
        let (b, c, l) = dy.dim();
        let n = T::lit((b * l) as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("rank 1");
        let mut dx = Array3::<T>::zeros((b, c, l));
        let mut dgamma = Array1::<T>::zeros(c);
        let mut dbeta = Array1::<T>::zeros(c);
        for ci in 0..c {
            let dyc = dy.slice(s![.., ci, ..]);
            let xh = cache.xhat.slice(s![.., ci, ..]);
            let sum_dy: T = dyc.iter().copied().sum();
            let sum_dy_xh: T = dyc.iter().zip(xh.iter()).map(|(&g, &h)| g * h).sum();
            dgamma[ci] = sum_dy_xh;
            dbeta[ci] = sum_dy;
            let scale = gamma[ci] * cache.inv_std[ci];
            let mut dxc = dx.slice_mut(s![.., ci, ..]);
            if cache.train {
                // d/dx of gamma * (x - mean) / std with batch statistics.
                ndarray::Zip::from(&mut dxc).and(&dyc).and(&xh).for_each(|o, &g, &h| {
                    *o = scale / n * (n * g - sum_dy - h * sum_dy_xh);
                });
            } else {
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|o, &g| *o = scale * g);
            }
        }
        if let Some(g) = grads {
            g[0] += &dgamma.into_dyn();
            g[1] += &dbeta.into_dyn();
        }
        dx
    }

    fn commit(&mut self, cache: &BnCache<T>) {
        if let Some((mean, var)) = &cache.stats {
            let m = T::lit(self.momentum);
            let keep = T::one() - m;
            self.running_mean.zip_mut_with(&mean.view().into_dyn(), |r, &v| *r = keep * *r + m * v);
            self.running_var.zip_mut_with(&var.view().into_dyn(), |r, &v| *r = keep * *r + m * v);
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNorm1d<U> {
        let conv = |a: &ArrayD<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        BatchNorm1d {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Array3<T>,
    inv_std: Array1<T>,
    /// Batch mean and unbiased variance, present in training mode.
    stats: Option<(Array1<T>, Array1<T>)>,
    train: bool,
}

/// Fully connected layer on `[B, F, 1]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::fan_in_uniform(&[out_f, in_f], in_f, rng),
            bias: Param::fan_in_uniform(&[out_f], in_f, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn forward(&self, x: &Array3<T>) -> Array3<T> {
        let (b, f, l) = x.dim();
        assert_eq!(l, 1, "linear expects flattened input");
        assert_eq!(f, self.in_features(), "linear input features");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("rank 2");
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().expect("rank 1");
        let x2 = x.view().into_shape_with_order((b, f)).expect("contiguous");
        let mut y = x2.dot(&w.t());
        y += &bias;
        let o = y.dim().1;
        y.into_shape_with_order((b, o, 1)).expect("contiguous")
    }

    fn backward(&self, x: &Array3<T>, dy: &Array3<T>, grads: Option<&mut [ArrayD<T>]>) -> Array3<T> {
        let (b, f, _) = x.dim();
        let o = dy.dim().1;
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("rank 2");
        let x2 = x.view().into_shape_with_order((b, f)).expect("contiguous");
        let dy2 = dy.view().into_shape_with_order((b, o)).expect("contiguous");
        if let Some(g) = grads {
            let (gw, gb) = g.split_at_mut(1);
            let mut gw = gw[0].view_mut().into_dimensionality::<Ix2>().expect("rank 2");
            general_mat_mul(T::one(), &dy2.t(), &x2, T::one(), &mut gw);
            gb[0] += &dy2.sum_axis(Axis(0)).into_dyn();
        }
        dy2.dot(&w).into_shape_with_order((b, f, 1)).expect("contiguous")
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

/// `act(body(x) + shortcut(x))`, with an identity shortcut when none is given.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual<T> {
    pub body: Sequential<T>,
    pub shortcut: Option<Sequential<T>>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv1d<T>),
    BatchNorm(BatchNorm1d<T>),
    /// Non-overlapping max pooling with the given width; trailing samples
    /// that do not fill a window are dropped.
    MaxPool(usize),
    Act(Activation),
    /// `[B, C, L] -> [B, C*L, 1]`
    Flatten,
    Linear(Linear<T>),
    /// Mean over length: `[B, C, L] -> [B, C, 1]`
    GlobalAvgPool,
    Residual(Box<Residual<T>>),
    /// Parallel branches concatenated along channels.
    Concat(Vec<Sequential<T>>),
    /// Untrainable odd-length FIR applied to every channel with zero
    /// padding, so the length is preserved.
    FixedFir(Vec<f64>),
}

#[derive(Debug, Clone)]
pub enum Cache<T> {
    Input(Array3<T>),
    Act(Array3<T>),
    Bn(BnCache<T>),
    Pool { argmax: Vec<u32>, in_len: usize },
    Shape(usize, usize),
    Residual { body: Vec<Cache<T>>, shortcut: Option<Vec<Cache<T>>>, act: Array3<T> },
    Concat { branches: Vec<(Vec<Cache<T>>, usize)> },
}

impl<T: Real> Layer<T> {
    fn num_param_tensors(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::BatchNorm(_) | Layer::Linear(_) => 2,
            Layer::Residual(r) => {
                r.body.num_param_tensors() + r.shortcut.as_ref().map_or(0, |s| s.num_param_tensors())
            }
            Layer::Concat(bs) => bs.iter().map(|b| b.num_param_tensors()).sum(),
            _ => 0,
        }
    }

    fn out_shape(&self, c: usize, l: usize) -> Option<(usize, usize)> {
        match self {
            Layer::Conv(conv) => Some((conv.out_channels(), conv.out_len(l)?)),
            Layer::BatchNorm(_) | Layer::Act(_) | Layer::FixedFir(_) => Some((c, l)),
            Layer::MaxPool(w) => (l >= *w).then(|| (c, l / w)),
            Layer::Flatten => Some((c * l, 1)),
            Layer::Linear(lin) => (l == 1).then(|| (lin.weight.value.shape()[0], 1)),
            Layer::GlobalAvgPool => Some((c, 1)),
            Layer::Residual(r) => r.body.out_shape(c, l),
            Layer::Concat(bs) => {
                let shapes: Option<Vec<_>> = bs.iter().map(|b| b.out_shape(c, l)).collect();
                let shapes = shapes?;
                let len = shapes.first()?.1;
                shapes.iter().all(|s| s.1 == len).then(|| (shapes.iter().map(|s| s.0).sum(), len))
            }
        }
    }

    fn forward(&self, x: Array3<T>, train: bool) -> (Array3<T>, Cache<T>) {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(&x);
                (y, Cache::Input(x))
            }
            Layer::BatchNorm(bn) => {
                let (y, c) = bn.forward(&x, train);
                (y, Cache::Bn(c))
            }
            Layer::MaxPool(w) => {
                let (b, c, l) = x.dim();
                let lo = l / w;
                let mut y = Array3::<T>::zeros((b, c, lo));
                let mut argmax = Vec::with_capacity(b * c * lo);
                for bi in 0..b {
                    for ci in 0..c {
                        let row = x.slice(s![bi, ci, ..]);
                        for t in 0..lo {
                            let mut best = t * w;
                            for j in t * w + 1..(t + 1) * w {
                                if row[j] > row[best] {
                                    best = j;
                                }
                            }
                            y[[bi, ci, t]] = row[best];
                            argmax.push(best as u32);
                        }
                    }
                }
                (y, Cache::Pool { argmax, in_len: l })
            }
            Layer::Act(a) => {
                let (y, saved) = a.forward(x);
                (y, Cache::Act(saved))
            }
            Layer::Flatten => {
                let (b, c, l) = x.dim();
                let y = x.into_shape_with_order((b, c * l, 1)).expect("contiguous");
                (y, Cache::Shape(c, l))
            }
            Layer::Linear(lin) => {
                let y = lin.forward(&x);
                (y, Cache::Input(x))
            }
            Layer::GlobalAvgPool => {
                let (b, c, l) = x.dim();
                let y = x.mean_axis(Axis(2)).expect("nonempty").into_shape_with_order((b, c, 1)).expect("contiguous");
                (y, Cache::Shape(c, l))
            }
            Layer::Residual(r) => {
                let (yb, body) = r.body.forward(&x, train);
                let (ys, shortcut) = match &r.shortcut {
                    Some(sc) => {
                        let (ys, c) = sc.forward(&x, train);
                        (ys, Some(c))
                    }
                    None => (x, None),
                };
                let z = yb + ys;
                let (y, act) = r.act.forward(z);
                (y, Cache::Residual { body, shortcut, act })
            }
            Layer::Concat(bs) => {
                let mut outs = Vec::with_capacity(bs.len());
                let mut caches = Vec::with_capacity(bs.len());
                for b in bs {
                    let (y, c) = b.forward(&x, train);
                    caches.push((c, y.dim().1));
                    outs.push(y);
                }
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                let y = ndarray::concatenate(Axis(1), &views).expect("matching lengths");
                (y, Cache::Concat { branches: caches })
            }
            Layer::FixedFir(taps) => {
                let (_, c, l) = x.dim();
                (fir_same(&x, taps, false), Cache::Shape(c, l))
            }
        }
    }

    fn backward(&self, cache: Cache<T>, dy: Array3<T>, grads: Option<&mut [ArrayD<T>]>) -> Array3<T> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Input(x)) => conv.backward(&x, &dy, grads),
            (Layer::BatchNorm(bn), Cache::Bn(c)) => bn.backward(&c, &dy, grads),
            (Layer::MaxPool(_), Cache::Pool { argmax, in_len }) => {
                let (b, c, lo) = dy.dim();
                let mut dx = Array3::<T>::zeros((b, c, in_len));
                let mut it = argmax.iter();
                for bi in 0..b {
                    for ci in 0..c {
                        for t in 0..lo {
                            let j = *it.next().expect("argmax per output") as usize;
                            dx[[bi, ci, j]] += dy[[bi, ci, t]];
                        }
                    }
                }
                dx
            }
            (Layer::Act(a), Cache::Act(saved)) => a.backward(&saved, dy),
            (Layer::Flatten, Cache::Shape(c, l)) => {
                let b = dy.dim().0;
                dy.into_shape_with_order((b, c, l)).expect("contiguous")
            }
            (Layer::Linear(lin), Cache::Input(x)) => lin.backward(&x, &dy, grads),
            (Layer::GlobalAvgPool, Cache::Shape(c, l)) => {
                let b = dy.dim().0;
                let inv = T::one() / T::lit(l as f64);
                let mut dx = Array3::<T>::zeros((b, c, l));
                for bi in 0..b {
                    for ci in 0..c {
                        let g = dy[[bi, ci, 0]] * inv;
                        dx.slice_mut(s![bi, ci, ..]).fill(g);
                    }
                }
                dx
            }
            (Layer::Residual(r), Cache::Residual { body, shortcut, act }) => {
                let dz = r.act.backward(&act, dy);
                let nb = r.body.num_param_tensors();
                let (gb, gs) = match grads {
                    Some(g) => {
                        let (a, b) = g.split_at_mut(nb);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let mut dx = r.body.backward(body, dz.clone(), gb);
                match (&r.shortcut, shortcut) {
                    (Some(sc), Some(c)) => dx += &sc.backward(c, dz, gs),
                    _ => dx += &dz,
                }
                dx
            }
            (Layer::Concat(bs), Cache::Concat { branches }) => {
                let mut grads = grads;
                let mut offset_ch = 0;
                let mut offset_p = 0;
                let mut dx: Option<Array3<T>> = None;
                for (branch, (cache, ch)) in bs.iter().zip(branches) {
                    let dyb = dy.slice(s![.., offset_ch..offset_ch + ch, ..]).to_owned();
                    offset_ch += ch;
                    let np = branch.num_param_tensors();
                    let g = grads.as_deref_mut().map(|g| &mut g[offset_p..offset_p + np]);
                    offset_p += np;
                    let d = branch.backward(cache, dyb, g);
                    match dx.as_mut() {
                        Some(acc) => *acc += &d,
                        None => dx = Some(d),
                    }
                }
                dx.expect("at least one branch")
            }
            (Layer::FixedFir(taps), Cache::Shape(..)) => fir_same(&dy, taps, true),
            _ => unreachable!("cache does not match layer"),
        }
    }

    fn commit(&mut self, cache: &Cache<T>) {
        match (self, cache) {
            (Layer::BatchNorm(bn), Cache::Bn(c)) => bn.commit(c),
            (Layer::Residual(r), Cache::Residual { body, shortcut, .. }) => {
                r.body.commit_stats(body);
                if let (Some(sc), Some(c)) = (r.shortcut.as_mut(), shortcut) {
                    sc.commit_stats(c);
                }
            }
            (Layer::Concat(bs), Cache::Concat { branches }) => {
                for (b, (c, _)) in bs.iter_mut().zip(branches) {
                    b.commit_stats(c);
                }
            }
            _ => {}
        }
    }

    fn cast<U: Real>(&self) -> Layer<U> {
        match self {
            Layer::Conv(c) => Layer::Conv(c.cast()),
            Layer::BatchNorm(b) => Layer::BatchNorm(b.cast()),
            Layer::MaxPool(w) => Layer::MaxPool(*w),
            Layer::Act(a) => Layer::Act(*a),
            Layer::Flatten => Layer::Flatten,
            Layer::Linear(l) => Layer::Linear(l.cast()),
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Residual(r) => Layer::Residual(Box::new(Residual {
                body: r.body.cast(),
                shortcut: r.shortcut.as_ref().map(|s| s.cast()),
                act: r.act,
            })),
            Layer::Concat(bs) => Layer::Concat(bs.iter().map(|b| b.cast()).collect()),
            Layer::FixedFir(taps) => Layer::FixedFir(taps.clone()),
        }
    }
}

/// Offsets such that `out[t]` pairs with `inp[t + j - pad]` for `t` in
/// `lo..hi`.
fn tap_range(j: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (in_len + pad).saturating_sub(j).min(out_len);
    (lo, hi.max(lo))
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Eight-lane dot product so the compiler can vectorize it.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for i in 0..8 {
            lanes[i] += ac[i] * bc[i];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

fn direct_forward<T: Real>(w: &ArrayD<T>, x: ArrayView2<'_, T>, y: &mut ndarray::ArrayViewMut2<'_, T>, pad: usize) {
    let (o, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (l_in, l_out) = (x.ncols(), y.ncols());
    let x = x.as_standard_layout();
    let w = w.as_slice().expect("contiguous weight");
    for oi in 0..o {
        let mut yrow = y.row_mut(oi);
        let yrow = yrow.as_slice_mut().expect("contiguous output");
        for ci in 0..c {
            let xrow = x.row(ci);
            let xrow = xrow.as_slice().expect("contiguous input");
            for j in 0..k {
                let (lo, hi) = tap_range(j, pad, l_in, l_out);
                let a = w[(oi * c + ci) * k + j];
                axpy(&mut yrow[lo..hi], a, &xrow[lo + j - pad..hi + j - pad]);
            }
        }
    }
}

fn direct_input_grad<T: Real>(w: &ArrayD<T>, dy: ArrayView2<'_, T>, mut dx: ndarray::ArrayViewMut2<'_, T>, pad: usize) {
    let (o, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (l_in, l_out) = (dx.ncols(), dy.ncols());
    let dy = dy.as_standard_layout();
    let w = w.as_slice().expect("contiguous weight");
    for ci in 0..c {
        let mut dxrow = dx.row_mut(ci);
        let dxrow = dxrow.as_slice_mut().expect("contiguous grad");
        for oi in 0..o {
            let dyrow = dy.row(oi);
            let dyrow = dyrow.as_slice().expect("contiguous grad");
            for j in 0..k {
                let (lo, hi) = tap_range(j, pad, l_in, l_out);
                let a = w[(oi * c + ci) * k + j];
                axpy(&mut dxrow[lo + j - pad..hi + j - pad], a, &dyrow[lo..hi]);
            }
        }
    }
}

fn direct_weight_grad<T: Real>(
    x: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
    gw: &mut ndarray::ArrayViewMut2<'_, T>,
    k: usize,
    pad: usize,
) {
    let (c, l_in) = x.dim();
    let (o, l_out) = dy.dim();
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    for oi in 0..o {
        let dyrow = dy.row(oi);
        let dyrow = dyrow.as_slice().expect("contiguous grad");
        for ci in 0..c {
            let xrow = x.row(ci);
            let xrow = xrow.as_slice().expect("contiguous input");
            for j in 0..k {
                let (lo, hi) = tap_range(j, pad, l_in, l_out);
                gw[[oi, ci * k + j]] += dot(&dyrow[lo..hi], &xrow[lo + j - pad..hi + j - pad]);
            }
        }
    }
}

/// Same-length correlation of every row with `taps`. The adjoint flips
/// the taps, which is what the backward pass needs.
fn fir_same<T: Real>(x: &Array3<T>, taps: &[f64], adjoint: bool) -> Array3<T> {
    let (b, c, l) = x.dim();
    let k = taps.len();
    let half = (k / 2) as isize;
    let h: Vec<T> = if adjoint { taps.iter().rev().map(|&v| T::lit(v)).collect() } else { taps.iter().map(|&v| T::lit(v)).collect() };
    let mut y = Array3::<T>::zeros((b, c, l));
    for bi in 0..b {
        for ci in 0..c {
            let row = x.slice(s![bi, ci, ..]);
            let mut out = y.slice_mut(s![bi, ci, ..]);
            for t in 0..l {
                let mut acc = T::zero();
                for (j, &hj) in h.iter().enumerate() {
                    let src = t as isize + j as isize - half;
                    if src >= 0 && (src as usize) < l {
                        acc += hj * row[src as usize];
                    }
                }
                out[t] = acc;
            }
        }
    }
    y
}

/// Ordered stack of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn num_param_tensors(&self) -> usize {
        self.layers.iter().map(|l| l.num_param_tensors()).sum()
    }

    /// Output `(channels, length)` for an input of `(channels, length)`, or
    /// `None` when some layer cannot accept the input.
    pub fn out_shape(&self, c: usize, l: usize) -> Option<(usize, usize)> {
        self.layers.iter().try_fold((c, l), |(c, l), layer| layer.out_shape(c, l))
    }

    pub fn forward(&self, x: &Array3<T>, train: bool) -> (Array3<T>, Vec<Cache<T>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(h, train);
            caches.push(c);
            h = y;
        }
        (h, caches)
    }

    /// Forward pass without keeping caches.
    pub fn infer(&self, x: &Array3<T>) -> Array3<T> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(h, false).0;
        }
        h
    }

    pub fn backward(&self, caches: Vec<Cache<T>>, dy: Array3<T>, mut grads: Option<&mut [ArrayD<T>]>) -> Array3<T> {
        let counts: Vec<usize> = self.layers.iter().map(|l| l.num_param_tensors()).collect();
        let mut end: usize = counts.iter().sum();
        let mut g = dy;
        for ((layer, cache), n) in self.layers.iter().zip(caches).rev().zip(counts.iter().rev()) {
            let start = end - n;
            let slot = grads.as_deref_mut().map(|gr| &mut gr[start..end]);
            g = layer.backward(cache, g, slot);
            end = start;
        }
        g
    }

    /// Folds training-mode batch statistics into running averages.
    pub fn commit_stats(&mut self, caches: &[Cache<T>]) {
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            layer.commit(cache);
        }
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        Sequential { layers: self.layers.iter().map(|l| l.cast()).collect() }
    }
}

impl<T: Real> Module<T> for Sequential<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            match layer {
                Layer::Conv(c) => {
                    out.push((join(&p, "weight"), &c.weight));
                    out.push((join(&p, "bias"), &c.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((join(&p, "gamma"), &b.gamma));
                    out.push((join(&p, "beta"), &b.beta));
                }
                Layer::Linear(l) => {
                    out.push((join(&p, "weight"), &l.weight));
                    out.push((join(&p, "bias"), &l.bias));
                }
                Layer::Residual(r) => {
                    r.body.params(&join(&p, "body"), out);
                    if let Some(sc) = &r.shortcut {
                        sc.params(&join(&p, "shortcut"), out);
                    }
                }
                Layer::Concat(bs) => {
                    for (k, b) in bs.iter().enumerate() {
                        b.params(&join(&p, &format!("branch{k}")), out);
                    }
                }
                _ => {}
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            match layer {
                Layer::Conv(c) => {
                    out.push((join(&p, "weight"), &mut c.weight));
                    out.push((join(&p, "bias"), &mut c.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((join(&p, "gamma"), &mut b.gamma));
                    out.push((join(&p, "beta"), &mut b.beta));
                }
                Layer::Linear(l) => {
                    out.push((join(&p, "weight"), &mut l.weight));
                    out.push((join(&p, "bias"), &mut l.bias));
                }
                Layer::Residual(r) => {
                    let r = &mut **r;
                    r.body.params_mut(&join(&p, "body"), out);
                    if let Some(sc) = r.shortcut.as_mut() {
                        sc.params_mut(&join(&p, "shortcut"), out);
                    }
                }
                Layer::Concat(bs) => {
                    for (k, b) in bs.iter_mut().enumerate() {
                        b.params_mut(&join(&p, &format!("branch{k}")), out);
                    }
                }
                _ => {}
            }
        }
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ArrayD<T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &i.to_string());
            match layer {
                Layer::BatchNorm(b) => {
                    out.push((join(&p, "running_mean"), &b.running_mean));
                    out.push((join(&p, "running_var"), &b.running_var));
                }
                Layer::Residual(r) => {
                    r.body.buffers(&join(&p, "body"), out);
                    if let Some(sc) = &r.shortcut {
                        sc.buffers(&join(&p, "shortcut"), out);
                    }
                }
                Layer::Concat(bs) => {
                    for (k, b) in bs.iter().enumerate() {
                        b.buffers(&join(&p, &format!("branch{k}")), out);
                    }
                }
                _ => {}
            }
        }
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut ArrayD<T>)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &i.to_string());
            match layer {
                Layer::BatchNorm(b) => {
                    out.push((join(&p, "running_mean"), &mut b.running_mean));
                    out.push((join(&p, "running_var"), &mut b.running_var));
                }
                Layer::Residual(r) => {
                    let r = &mut **r;
                    r.body.buffers_mut(&join(&p, "body"), out);
                    if let Some(sc) = r.shortcut.as_mut() {
                        sc.buffers_mut(&join(&p, "shortcut"), out);
                    }
                }
                Layer::Concat(bs) => {
                    for (k, b) in bs.iter_mut().enumerate() {
                        b.buffers_mut(&join(&p, &format!("branch{k}")), out);
                    }
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    /// Loss = sum(y * probe); checks dL/dx and dL/dparams against central
    /// differences.
    fn check_net(mut net: Sequential<f64>, x: Array3<f64>, train: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (y, caches) = net.forward(&x, train);
        let probe = rand3(y.dim(), &mut rng);
        let mut grads = net.zero_grads();
        let dx = net.backward(caches, probe.clone(), Some(&mut grads));
        let loss = |n: &Sequential<f64>, x: &Array3<f64>| (n.forward(x, train).0 * &probe).sum();
        let h = 1e-6;
        for idx in [0usize, 3, 7] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let flat = idx % x.len();
            xp.as_slice_mut().unwrap()[flat] += h;
            xm.as_slice_mut().unwrap()[flat] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[flat];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{flat}]: fd {fd} vs {an}");
        }
        let n_params = grads.len();
        for pi in 0..n_params {
            for k in [0usize, 1] {
                let base = {
                    let mut ps = Vec::new();
                    net.params("", &mut ps);
                    ps[pi].1.value.clone()
                };
                let k = k % base.len();
                let eval = |net: &mut Sequential<f64>, delta: f64| {
                    let mut ps = Vec::new();
                    net.params_mut("", &mut ps);
                    let mut v = base.clone();
                    v.as_slice_mut().unwrap()[k] += delta;
                    ps[pi].1.value = v;
                    drop(ps);
                    loss(net, &x)
                };
                let fd = (eval(&mut net, h) - eval(&mut net, -h)) / (2.0 * h);
                eval(&mut net, 0.0);
                let an = grads[pi].as_slice().unwrap()[k];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "param {pi}[{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn conv_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Sequential::new(vec![
            Layer::Conv(Conv1d::new(2, 3, 5, 2, 1, &mut rng)),
            Layer::Act(Activation::Swish),
            Layer::Conv(Conv1d::same(3, 3, 3, &mut rng)),
            Layer::Act(Activation::Tanh),
            Layer::Conv(Conv1d::new(3, 2, 1, 1, 0, &mut rng)),
            Layer::GlobalAvgPool,
            Layer::Linear(Linear::new(2, 2, &mut rng)),
            Layer::Act(Activation::Sigmoid),
        ]);
        let x = rand3((3, 2, 17), &mut rng);
        check_net(net, x, false);
    }

    #[test]
    fn batchnorm_pool_flatten_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Sequential::new(vec![
            Layer::Conv(Conv1d::same(1, 3, 7, &mut rng)),
            Layer::BatchNorm(BatchNorm1d::new(3)),
            Layer::Act(Activation::Tanh),
            Layer::MaxPool(2),
            Layer::Flatten,
            Layer::Linear(Linear::new(3 * 6, 4, &mut rng)),
        ]);
        let x = rand3((4, 1, 13), &mut rng);
        check_net(net, x, true);
    }

    #[test]
    fn residual_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let body = Sequential::new(vec![
            Layer::Conv(Conv1d::same(3, 3, 3, &mut rng)),
            Layer::Act(Activation::Swish),
            Layer::Conv(Conv1d::same(3, 3, 3, &mut rng)),
        ]);
        let branches = vec![
            Sequential::new(vec![Layer::Conv(Conv1d::same(3, 2, 1, &mut rng))]),
            Sequential::new(vec![Layer::Conv(Conv1d::same(3, 2, 5, &mut rng)), Layer::Act(Activation::Tanh)]),
        ];
        let net = Sequential::new(vec![
            Layer::Residual(Box::new(Residual { body, shortcut: None, act: Activation::Swish })),
            Layer::Concat(branches),
            Layer::FixedFir(vec![0.5, -1.0, 0.25]),
            Layer::Act(Activation::Tanh),
            Layer::GlobalAvgPool,
        ]);
        let x = rand3((2, 3, 11), &mut rng);
        check_net(net, x, false);
    }

    #[test]
    fn batchnorm_commit_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Sequential::<f64>::new(vec![Layer::BatchNorm(BatchNorm1d::new(2))]);
        let x = rand3((4, 2, 8), &mut rng) + 3.0;
        let (_, caches) = net.forward(&x, true);
        net.commit_stats(&caches);
        let Layer::BatchNorm(bn) = &net.layers[0] else { unreachable!() };
        assert!(bn.running_mean.iter().all(|&m| m > 0.2 && m < 0.4));
    }

    #[test]
    fn strided_conv_output_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv1d::<f32>::new(1, 1, 9, 4, 4, &mut rng);
        assert_eq!(conv.out_len(5980), Some(1495));
        let y = conv.forward(&Array3::zeros((1, 1, 5980)));
        assert_eq!(y.dim(), (1, 1, 1495));
    }
}
