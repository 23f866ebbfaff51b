//! Layers with explicit backward passes.
//!
//! Every layer offers a pure `forward` (inference, shareable across threads)
//! and a caching `forward_train` paired with `backward`, which accumulates
//! parameter gradients into the store and returns the input gradient.
//! Activations use `(N, C, H, W)` layout for images and `(N, F)` for vectors.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;

use super::{ParamId, ParamStore};

fn contiguous(x: &Array4<f64>) -> std::borrow::Cow<'_, [f64]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, block: &str, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_he(block, &format!("{name}.weight"), &[fan_out, fan_in], fan_in, rng);
        let bias = store.add(block, &format!("{name}.bias"), &[fan_out], vec![0.0; fan_out]);
        Self { weight, bias, fan_in, fan_out, cache: None }
    }

    fn weight_view<'a>(&self, store: &'a ParamStore) -> ndarray::ArrayView2<'a, f64> {
        ndarray::ArrayView2::from_shape((self.fan_out, self.fan_in), store.value(self.weight)).expect("linear weight shape")
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let w = self.weight_view(store);
        let b = ndarray::ArrayView1::from(store.value(self.bias));
        x.dot(&w.t()) + &b
    }

    pub fn forward_train(&mut self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        self.cache = Some(x.clone());
        self.forward(store, x)
    }

    pub fn backward(&mut self, store: &mut ParamStore, grad: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("linear backward without forward_train");
        let dx = grad.dot(&self.weight_view(store));
        let dw = grad.t().dot(&x);
        for (g, d) in store.grad_mut(self.weight).iter_mut().zip(dw.iter()) {
            *g += d;
        }
        let db = grad.sum_axis(Axis(0));
        for (g, d) in store.grad_mut(self.bias).iter_mut().zip(db.iter()) {
            *g += d;
        }
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    pub fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Same-padded square convolution with stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, block: &str, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "odd kernel");
        let weight = store.add_he(block, &format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng);
        let bias = store.add(block, &format!("{name}.bias"), &[cout], vec![0.0; cout]);
        Self { weight, bias, cin, cout, k, cache: None }
    }

    /// Calls `f(tap_index, dy, dx)` for every kernel tap.
    #[inline]
    fn for_taps(&self, mut f: impl FnMut(usize, isize, isize)) {
        let pad = (self.k / 2) as isize;
        for ky in 0..self.k {
            for kx in 0..self.k {
                f(ky * self.k + kx, ky as isize - pad, kx as isize - pad);
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "conv input channels");
        let xs = contiguous(x);
        let wt = store.value(self.weight);
        let bias = store.value(self.bias);
        let hw = h * w;
        let kk = self.k * self.k;
        let mut out = vec![0.0; n * self.cout * hw];
        for b in 0..n {
            for co in 0..self.cout {
                let dst = &mut out[(b * self.cout + co) * hw..][..hw];
                dst.fill(bias[co]);
                for ci in 0..cin {
                    let src = &xs[(b * cin + ci) * hw..][..hw];
                    let wbase = (co * cin + ci) * kk;
                    self.for_taps(|t, dy, dx| {
                        let wv = wt[wbase + t];
                        accumulate_shifted(dst, src, h, w, dy, dx, wv);
                    });
                }
            }
        }
        Array4::from_shape_vec((n, self.cout, h, w), out).expect("conv output shape")
    }

    pub fn forward_train(&mut self, store: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
        self.cache = Some(x.as_standard_layout().to_owned());
        self.forward(store, x)
    }

    pub fn backward(&mut self, store: &mut ParamStore, grad: &Array4<f64>) -> Array4<f64> {
        let x = self.cache.take().expect("conv backward without forward_train");
        let (n, cin, h, w) = x.dim();
        let xs = x.as_slice().expect("standard layout");
        let gs = contiguous(grad);
        let hw = h * w;
        let kk = self.k * self.k;
        let mut dx = vec![0.0; n * cin * hw];
        let mut dw = vec![0.0; self.cout * cin * kk];
        let mut db = vec![0.0; self.cout];
        let wt = store.value(self.weight).to_vec();
        for b in 0..n {
            for co in 0..self.cout {
                let g = &gs[(b * self.cout + co) * hw..][..hw];
                db[co] += g.iter().sum::<f64>();
                for ci in 0..cin {
                    let src = &xs[(b * cin + ci) * hw..][..hw];
                    let wbase = (co * cin + ci) * kk;
                    let dxp = &mut dx[(b * cin + ci) * hw..][..hw];
                    self.for_taps(|t, dy, dxo| {
                        dw[wbase + t] += dot_shifted(g, src, h, w, dy, dxo);
                        scatter_shifted(dxp, g, h, w, dy, dxo, wt[wbase + t]);
                    });
                }
            }
        }
        for (a, d) in store.grad_mut(self.weight).iter_mut().zip(&dw) {
            *a += d;
        }
        for (a, d) in store.grad_mut(self.bias).iter_mut().zip(&db) {
            *a += d;
        }
        Array4::from_shape_vec((n, cin, h, w), dx).expect("conv grad shape")
    }
}

#[inline]
fn row_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// `dst[y, x] += wv * src[y + dy, x + dx]` over the valid region.
#[inline]
fn accumulate_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    let (ylo, yhi) = row_range(h, dy);
    let (xlo, xhi) = row_range(w, dx);
    for y in ylo..yhi {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + xlo..y * w + xhi];
        let s = &src[sy * w + (xlo as isize + dx) as usize..][..xhi - xlo];
        for (a, b) in d.iter_mut().zip(s) {
            *a += wv * b;
        }
    }
}

/// `Σ g[y, x] * src[y + dy, x + dx]` over the valid region.
#[inline]
fn dot_shifted(g: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (ylo, yhi) = row_range(h, dy);
    let (xlo, xhi) = row_range(w, dx);
    let mut acc = 0.0;
    for y in ylo..yhi {
        let sy = (y as isize + dy) as usize;
        let a = &g[y * w + xlo..y * w + xhi];
        let s = &src[sy * w + (xlo as isize + dx) as usize..][..xhi - xlo];
        acc += a.iter().zip(s).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

/// `dsrc[y + dy, x + dx] += wv * g[y, x]` over the valid region.
#[inline]
fn scatter_shifted(dsrc: &mut [f64], g: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    let (ylo, yhi) = row_range(h, dy);
    let (xlo, xhi) = row_range(w, dx);
    for y in ylo..yhi {
        let sy = (y as isize + dy) as usize;
        let a = &g[y * w + xlo..y * w + xhi];
        let d = &mut dsrc[sy * w + (xlo as isize + dx) as usize..][..xhi - xlo];
        for (p, q) in d.iter_mut().zip(a) {
            *p += wv * q;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, block: &str, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(block, &format!("{name}.gamma"), &[channels], vec![1.0; channels]),
            beta: store.add(block, &format!("{name}.beta"), &[channels], vec![0.0; channels]),
            running_mean: store.add_buffer(block, &format!("{name}.running_mean"), vec![0.0; channels]),
            running_var: store.add_buffer(block, &format!("{name}.running_var"), vec![1.0; channels]),
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, store: &ParamStore, x: &Array4<f64>, mean: &[f64], inv_std: &[f64]) -> (Array4<f64>, Array4<f64>) {
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let mut x_hat = x.to_owned();
        for (c, mut lane) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
            lane.mapv_inplace(|v| (v - mean[c]) * inv_std[c]);
        }
        let mut y = x_hat.clone();
        for (c, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
            lane.mapv_inplace(|v| v * gamma[c] + beta[c]);
        }
        (x_hat, y)
    }

    fn running_inv_std(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.running_var).iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }

    /// Inference: normalise with running statistics.
    pub fn forward(&self, store: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
        let inv = self.running_inv_std(store);
        self.normalize(store, x, store.value(self.running_mean), &inv).1
    }

    /// With `batch_stats`, normalise with batch statistics and update the
    /// running estimates; otherwise behave like [`forward`](Self::forward).
    pub fn forward_train(&mut self, store: &mut ParamStore, x: &Array4<f64>, batch_stats: bool) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let (mean, inv_std) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (ch, lane) in x.axis_iter(Axis(1)).enumerate() {
                let mu = lane.sum() / m;
                mean[ch] = mu;
                var[ch] = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            }
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = self.momentum;
            for (r, mu) in store.value_mut(self.running_mean).iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * mu;
            }
            for (r, v) in store.value_mut(self.running_var).iter_mut().zip(&var) {
                *r = (1.0 - mom) * *r + mom * v * unbiased;
            }
            let inv = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect::<Vec<_>>();
            (mean, inv)
        } else {
            (store.value(self.running_mean).to_vec(), self.running_inv_std(store))
        };
        let (x_hat, y) = self.normalize(store, x, &mean, &inv_std);
        self.cache = Some(BnCache { x_hat, inv_std, batch_stats });
        y
    }

    pub fn backward(&mut self, store: &mut ParamStore, grad: &Array4<f64>) -> Array4<f64> {
        let BnCache { x_hat, inv_std, batch_stats } = self.cache.take().expect("bn backward without forward_train");
        let (n, _, h, w) = grad.dim();
        let m = (n * h * w) as f64;
        let gamma = store.value(self.gamma).to_vec();
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut dx = grad.to_owned();
        for (c, (mut dlane, xlane)) in dx.axis_iter_mut(Axis(1)).zip(x_hat.axis_iter(Axis(1))).enumerate() {
            let sum_g: f64 = dlane.sum();
            let sum_gx: f64 = dlane.iter().zip(xlane.iter()).map(|(g, x)| g * x).sum();
            dgamma[c] = sum_gx;
            dbeta[c] = sum_g;
            let k = gamma[c] * inv_std[c];
            if batch_stats {
                ndarray::Zip::from(&mut dlane)
                    .and(&xlane)
                    .for_each(|g, &xh| *g = k / m * (m * *g - sum_g - xh * sum_gx));
            } else {
                dlane.mapv_inplace(|g| g * k);
            }
        }
        for (a, d) in store.grad_mut(self.gamma).iter_mut().zip(&dgamma) {
            *a += d;
        }
        for (a, d) in store.grad_mut(self.beta).iter_mut().zip(&dbeta) {
            *a += d;
        }
        dx
    }
}

/// Element-wise ReLU for image activations.
#[derive(Clone, Debug, Default)]
pub struct Relu4 {
    cache: Option<Array4<f64>>,
}

impl Relu4 {
    pub fn forward(x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| v.max(0.0))
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = Self::forward(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let y = self.cache.take().expect("relu backward without forward_train");
        let mut g = grad.to_owned();
        ndarray::Zip::from(&mut g).and(&y).for_each(|g, &y| {
            if y <= 0.0 {
                *g = 0.0
            }
        });
        g
    }
}

/// Inverted dropout: active only in training mode.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Array4<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p));
        Self { p, mask: None }
    }

    pub fn forward_train<R: Rng + ?Sized>(&mut self, x: &Array4<f64>, rng: &mut R) -> Array4<f64> {
        let keep = 1.0 - self.p;
        let mask = x.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mask = self.mask.take().expect("dropout backward without forward_train");
        grad * &mask
    }
}

/// Non-overlapping `k x k` average pooling; trailing rows/cols are dropped.
pub fn avg_pool(x: &Array4<f64>, k: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    Array4::from_shape_fn((n, c, oh, ow), |(b, ch, y, xx)| {
        let mut s = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                s += x[[b, ch, y * k + dy, xx * k + dx]];
            }
        }
        s * norm
    })
}

pub fn avg_pool_backward(grad: &Array4<f64>, k: usize, h: usize, w: usize) -> Array4<f64> {
    let (n, c, oh, ow) = grad.dim();
    let norm = 1.0 / (k * k) as f64;
    let mut dx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = grad[[b, ch, y, xx]] * norm;
                    for dy in 0..k {
                        for ddx in 0..k {
                            dx[[b, ch, y * k + dy, xx * k + ddx]] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = (h * w) as f64;
    Array2::from_shape_fn((n, c), |(b, ch)| x.index_axis(Axis(0), b).index_axis(Axis(0), ch).sum() / hw)
}

pub fn global_avg_pool_backward(grad: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = grad.dim();
    let hw = (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| grad[[b, ch]] / hw)
}

/// Channel concatenation and its split for gradients.
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels(g: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    let (a, b) = g.view().split_at(Axis(1), first);
    (a.to_owned(), b.to_owned())
}
