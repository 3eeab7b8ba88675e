//! Differentiable primitives. Each layer caches what its backward pass needs
//! during a gradient-tracking forward pass and accumulates parameter
//! gradients into its [`Param`]s.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How batch normalization and dropout behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout on, caches kept.
    Train,
    /// Running statistics, dropout off, no caches.
    Eval,
    /// Running statistics and dropout off, but caches kept so the network is
    /// a fixed differentiable function (gradient checking).
    Frozen,
}

impl Mode {
    pub fn keeps_cache(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

/// Forward-pass context: mode plus the randomness source for dropout.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn new(mode: Mode, rng: ChaCha8Rng) -> Self {
        Self { mode, rng }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, rand::SeedableRng::seed_from_u64(0))
    }

    pub fn frozen() -> Self {
        Self::new(Mode::Frozen, rand::SeedableRng::seed_from_u64(0))
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self::new(Mode::Train, rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

/// A named tensor of learned values (or running statistics) with its
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: String, kind: ParamKind, shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name,
            kind,
            shape,
            value,
            grad,
        }
    }

    pub fn filled(name: String, kind: ParamKind, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(name, kind, shape, vec![v; n])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// 2D convolution with square `ksize` (1 or 3), stride 1, zero padding
/// `ksize / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

fn im2col3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let p = h * w;
    for ci in 0..c {
        let src = &x[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => dst.copy_from_slice(s),
                        _ => {
                            dst[..w - 1].copy_from_slice(&s[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let p = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * p..(ci + 1) * p];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * p..(ci * 9 + ky * 3 + kx + 1) * p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let g = &row[y * w..(y + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => d[..w - 1]
                            .iter_mut()
                            .zip(&g[1..])
                            .for_each(|(a, &b)| *a += b),
                        1 => d.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                        _ => d[1..]
                            .iter_mut()
                            .zip(&g[..w - 1])
                            .for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            ksize == 1 || ksize == 3,
            "only 1x1 and 3x3 kernels are supported"
        );
        let fan_in = in_ch * ksize * ksize;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid sigma");
        let n = out_ch * fan_in;
        let w = (0..n).map(|_| T::of(normal.sample(rng))).collect();
        Self {
            in_ch,
            out_ch,
            ksize,
            weight: Param::new(
                format!("{name}.weight"),
                ParamKind::ConvWeight,
                vec![out_ch, in_ch, ksize, ksize],
                w,
            ),
            bias: Param::filled(
                format!("{name}.bias"),
                ParamKind::ConvBias,
                vec![out_ch],
                T::zero(),
            ),
            input: None,
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.ksize * self.ksize
    }

    pub fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c(), self.in_ch, "{}: channel mismatch", self.weight.name);
        let [n, _, h, w] = x.shape();
        let p = h * w;
        let mut out = Tensor::zeros([n, self.out_ch, h, w]);
        let rows = self.col_rows();
        let out_len = self.out_ch * p;
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(s, y)| {
                let xs = x.sample(s);
                let mut cols_buf;
                let cols: &[T] = if self.ksize == 1 {
                    xs
                } else {
                    cols_buf = vec![T::zero(); rows * p];
                    im2col3(xs, self.in_ch, h, w, &mut cols_buf);
                    &cols_buf
                };
                T::gemm(
                    self.out_ch,
                    rows,
                    p,
                    &self.weight.value,
                    false,
                    cols,
                    false,
                    T::zero(),
                    y,
                );
                for (o, &b) in self.bias.value.iter().enumerate() {
                    y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
                }
            });
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = self.eval(x);
        self.input = mode.keeps_cache().then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self
            .input
            .take()
            .expect("conv backward without cached forward");
        let [n, _, h, w] = x.shape();
        let p = h * w;
        let rows = self.col_rows();
        let wlen = self.weight.value.len();
        let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = x.sample(s);
                let dys = dy.sample(s);
                let mut cols_buf;
                let cols: &[T] = if self.ksize == 1 {
                    xs
                } else {
                    cols_buf = vec![T::zero(); rows * p];
                    im2col3(xs, self.in_ch, h, w, &mut cols_buf);
                    &cols_buf
                };
                let mut dw = vec![T::zero(); wlen];
                T::gemm(
                    self.out_ch,
                    p,
                    rows,
                    dys,
                    false,
                    cols,
                    true,
                    T::zero(),
                    &mut dw,
                );
                let db: Vec<T> = (0..self.out_ch)
                    .map(|o| dys[o * p..(o + 1) * p].iter().copied().sum())
                    .collect();
                let mut dcols = vec![T::zero(); rows * p];
                T::gemm(
                    rows,
                    self.out_ch,
                    p,
                    &self.weight.value,
                    true,
                    dys,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                let dx = if self.ksize == 1 {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); self.in_ch * p];
                    col2im3(&dcols, self.in_ch, h, w, &mut dx);
                    dx
                };
                (dw, db, dx)
            })
            .collect();
        let mut dx = Vec::with_capacity(n * self.in_ch * p);
        // sequential reduction keeps gradients independent of thread count
        for (dw, db, dxs) in per_sample {
            self.weight
                .grad
                .iter_mut()
                .zip(&dw)
                .for_each(|(g, &v)| *g += v);
            self.bias
                .grad
                .iter_mut()
                .zip(&db)
                .for_each(|(g, &v)| *g += v);
            dx.extend(dxs);
        }
        Tensor::from_vec([n, self.in_ch, h, w], dx).expect("consistent shape")
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let shape = vec![channels];
        Self {
            channels,
            gamma: Param::filled(
                format!("{name}.gamma"),
                ParamKind::BnScale,
                shape.clone(),
                T::one(),
            ),
            beta: Param::filled(
                format!("{name}.beta"),
                ParamKind::BnShift,
                shape.clone(),
                T::zero(),
            ),
            running_mean: Param::filled(
                format!("{name}.running_mean"),
                ParamKind::BnRunningMean,
                shape.clone(),
                T::zero(),
            ),
            running_var: Param::filled(
                format!("{name}.running_var"),
                ParamKind::BnRunningVar,
                shape,
                T::one(),
            ),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let [n, c, _, _] = x.shape();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                let src = x.plane(s, ch);
                let xh = xhat.plane_mut(s, ch);
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - m) * is;
                }
                let xh = xhat.plane(s, ch).to_vec();
                for (d, v) in y.plane_mut(s, ch).iter_mut().zip(xh) {
                    *d = g * v + b;
                }
            }
        }
        (y, xhat)
    }

    fn running_inv_std(&self) -> Vec<T> {
        let eps = T::of(self.eps);
        self.running_var
            .value
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect()
    }

    pub fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(
            x.c(),
            self.channels,
            "{}: channel mismatch",
            self.gamma.name
        );
        self.normalize(x, &self.running_mean.value, &self.running_inv_std())
            .0
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        assert_eq!(
            x.c(),
            self.channels,
            "{}: channel mismatch",
            self.gamma.name
        );
        match mode {
            Mode::Eval => {
                self.cache = None;
                self.eval(x)
            }
            Mode::Frozen => {
                let inv_std = self.running_inv_std();
                let (y, xhat) = self.normalize(x, &self.running_mean.value, &inv_std);
                self.cache = Some(BnCache {
                    xhat,
                    inv_std,
                    batch_stats: false,
                });
                y
            }
            Mode::Train => {
                let [n, c, h, w] = x.shape();
                let m = (n * h * w) as f64;
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for s in 0..n {
                        sum += x.plane(s, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = sum / m;
                    let mut sq = 0.0;
                    for s in 0..n {
                        sq += x
                            .plane(s, ch)
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(mu);
                    var[ch] = T::of(sq / m);
                    let unbiased = if m > 1.0 { sq / (m - 1.0) } else { 0.0 };
                    let mom = self.momentum;
                    let rm = &mut self.running_mean.value[ch];
                    *rm = T::of((1.0 - mom) * rm.as_f64() + mom * mu);
                    let rv = &mut self.running_var.value[ch];
                    *rv = T::of((1.0 - mom) * rv.as_f64() + mom * unbiased);
                }
                let eps = T::of(self.eps);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let (y, xhat) = self.normalize(x, &mean, &inv_std);
                self.cache = Some(BnCache {
                    xhat,
                    inv_std,
                    batch_stats: true,
                });
                y
            }
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self
            .cache
            .take()
            .expect("batch norm backward without cached forward");
        let [n, c, h, w] = dy.shape();
        let m = T::of((n * h * w) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for s in 0..n {
                for (&g, &xh) in dy.plane(s, ch).iter().zip(cache.xhat.plane(s, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for s in 0..n {
                let xh = cache.xhat.plane(s, ch);
                let g = dy.plane(s, ch);
                let d = dx.plane_mut(s, ch);
                if cache.batch_stats {
                    for i in 0..d.len() {
                        d[i] = scale / m * (m * g[i] - sum_dy - xh[i] * sum_dy_xhat);
                    }
                } else {
                    for i in 0..d.len() {
                        d[i] = scale * g[i];
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }

    pub fn visit_params_ref(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
}

pub fn elu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v.exp_m1() })
}

/// ELU backward from its output: the slope is 1 for positive outputs and
/// `y + 1 = exp(x)` otherwise.
pub fn elu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { g * (v + T::one()) })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// Inverted dropout; returns the output and the scaling mask.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, rng: &mut ChaCha8Rng) -> (Tensor<T>, Vec<T>) {
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data().len())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (Tensor::from_vec(x.shape(), data).expect("same shape"), mask)
}

pub fn apply_mask<T: Scalar>(dy: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let data = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

/// 2x2 max pooling, stride 2. Returns the output and, per output element,
/// the flat index of the winning input element.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for cand in [
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[k] = src[best];
                arg.push(best);
                k += 1;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Scalar>(
    dy: &Tensor<T>,
    arg: &[usize],
    in_shape: [usize; 4],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(arg) {
        d[i] += g;
    }
    dx
}

/// Source taps for 2x bilinear upsampling with pixel-center alignment.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Doubles both spatial dims by bilinear interpolation.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut tmp = vec![T::zero(); h * ow];
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            for y in 0..h {
                for (ox, &(x0, x1, f)) in tx.iter().enumerate() {
                    let f = T::of(f);
                    let (a, b) = (src[y * w + x0], src[y * w + x1]);
                    tmp[y * ow + ox] = a + (b - a) * f;
                }
            }
            let dst = out.plane_mut(s, ch);
            for (oy, &(y0, y1, f)) in ty.iter().enumerate() {
                let f = T::of(f);
                for ox in 0..ow {
                    let (a, b) = (tmp[y0 * ow + ox], tmp[y1 * ow + ox]);
                    dst[oy * ow + ox] = a + (b - a) * f;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`].
pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = Tensor::zeros([n, c, h, w]);
    let mut tmp = vec![T::zero(); h * ow];
    for s in 0..n {
        for ch in 0..c {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            let g = dy.plane(s, ch);
            for (oy, &(y0, y1, f)) in ty.iter().enumerate() {
                let f = T::of(f);
                for ox in 0..ow {
                    let v = g[oy * ow + ox];
                    tmp[y0 * ow + ox] += v * (T::one() - f);
                    tmp[y1 * ow + ox] += v * f;
                }
            }
            let d = dx.plane_mut(s, ch);
            for y in 0..h {
                for (ox, &(x0, x1, f)) in tx.iter().enumerate() {
                    let f = T::of(f);
                    let v = tmp[y * ow + ox];
                    d[y * w + x0] += v * (T::one() - f);
                    d[y * w + x1] += v * f;
                }
            }
        }
    }
    dx
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    let p = h * w;
    let mut out = Tensor::zeros(logits.shape());
    let src = logits.data();
    let dst = out.data_mut();
    for s in 0..n {
        for i in 0..p {
            let idx = |ch: usize| (s * c + ch) * p + i;
            let mx = (0..c)
                .map(|ch| src[idx(ch)])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[idx(ch)] - mx).exp();
                dst[idx(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[idx(ch)] /= sum;
            }
        }
    }
    out
}

/// Pulls a gradient w.r.t. softmax probabilities back to the logits.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = probs.shape();
    let p = h * w;
    let mut out = Tensor::zeros(probs.shape());
    let (pr, dp) = (probs.data(), dprobs.data());
    let dst = out.data_mut();
    for s in 0..n {
        for i in 0..p {
            let idx = |ch: usize| (s * c + ch) * p + i;
            let dot: T = (0..c).map(|ch| pr[idx(ch)] * dp[idx(ch)]).sum();
            for ch in 0..c {
                dst[idx(ch)] = pr[idx(ch)] * (dp[idx(ch)] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-sum convolution oracle.
    fn conv_oracle(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let k = conv.ksize as isize;
        let pad = k / 2;
        let mut out = Tensor::zeros([n, conv.out_ch, h, w]);
        for s in 0..n {
            for o in 0..conv.out_ch {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * c + ci) * conv.ksize + ky as usize) * conv.ksize
                                        + kx as usize;
                                    acc += conv.weight.value[wi]
                                        * x.at(s, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        out.plane_mut(s, o)[y as usize * w + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for k in [1, 3] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, k, &mut rng());
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random([2, 3, 5, 6], 3);
            let got = conv.eval(&x);
            let want = conv_oracle(&conv, &x);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv_lin(x)> == <conv_lin^T(dy), x> with zero bias
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, &mut rng());
        let x = random([2, 2, 4, 5], 5);
        let dy = random([2, 3, 4, 5], 6);
        let y = conv.forward(&x, Mode::Frozen);
        let dx = conv.backward(&dy);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // weight gradient satisfies the same identity in the weights
        let wdot: f64 = conv
            .weight
            .value
            .iter()
            .zip(&conv.weight.grad)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - wdot).abs() < 1e-10);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = random([1, 2, 3, 4], 8);
        let dy = random([1, 2, 6, 8], 9);
        let y = upsample2(&x);
        let dx = upsample2_backward(&dy);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants_and_monotonicity() {
        let c = Tensor::<f64>::filled([1, 1, 3, 3], 0.7);
        assert!(upsample2(&c)
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = upsample2(&x);
        for row in y.data().chunks(4) {
            assert!(row.windows(2).all(|p| p[0] <= p[1]));
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn max_pool_keeps_bright_pixel() {
        let mut x = Tensor::<f64>::zeros([1, 1, 4, 4]);
        x.plane_mut(0, 0)[2 * 4 + 3] = 5.0;
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 5.0]);
        let dx = max_pool2_backward(&Tensor::filled([1, 1, 2, 2], 1.0), &arg, x.shape());
        assert_eq!(dx.plane(0, 0)[2 * 4 + 3], 1.0);
        assert_eq!(dx.data().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = random([3, 2, 4, 4], 10).map(|v| 3.0 * v + 2.0);
        let y = bn.forward(&x, Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|s| y.plane(s, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn dropout_scales_kept_units() {
        let x = Tensor::<f64>::filled([1, 1, 50, 50], 1.0);
        let (y, mask) = dropout(&x, 0.2, &mut rng());
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 2500.0;
        assert!((kept - 0.8).abs() < 0.05);
        assert!(y
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        assert_eq!(mask.len(), 2500);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = random([2, 3, 2, 2], 12).map(|v| 10.0 * v);
        let p = softmax_channels(&x);
        for s in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|c| p.plane(s, c)[i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
