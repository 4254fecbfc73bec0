//! Convolutional building blocks with hand-written backward passes.
//!
//! Every layer here is a pure function of its input and parameters. Backward
//! functions take the forward input (and output where cheaper) and the
//! upstream gradient, and return the gradients w.r.t. the input and the
//! parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Array, Tensor3};

/// A 2-D convolution with square kernels, zero padding and integer stride.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Array<T>,
    /// `[out]`
    pub bias: Array<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor3<T>>,
    pub weight: Array<T>,
    pub bias: Array<T>,
}

/// Valid output column range `[lo, hi)` for kernel offset `k` over an input
/// row of `len` samples.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= x*stride + k - pad < len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Array::zeros(&[cout, cin, k, k]),
            bias: Array::zeros(&[cout]),
            stride,
            pad,
        }
    }

    /// Weights drawn from `N(0, std²)`, biases zero.
    pub fn normal<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::zeros(cin, cout, k, stride, pad);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            for w in conv.weight.as_mut_slice() {
                *w = T::of(dist.sample(rng));
            }
        }
        conv
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    #[inline]
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let oh = (h + 2 * self.pad - k) / self.stride + 1;
        let ow = (w + 2 * self.pad - k) / self.stride + 1;
        (oh, ow)
    }

    fn check_input(&self, input: &Tensor3<T>) -> Result<()> {
        if input.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels(),
                input.channels()
            )));
        }
        if input.height() + 2 * self.pad < self.kernel() || input.width() + 2 * self.pad < self.kernel() {
            return Err(Error::Shape(format!(
                "input {}x{} smaller than kernel {}",
                input.height(),
                input.width(),
                self.kernel()
            )));
        }
        Ok(())
    }

    /// Valid output ranges for every kernel row and column offset.
    fn ranges(&self, h: usize, w: usize) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let (oh, ow) = self.output_size(h, w);
        let (k, s, p) = (self.kernel(), self.stride, self.pad);
        (
            (0..k).map(|ky| valid_range(oh, h, ky, s, p)).collect(),
            (0..k).map(|kx| valid_range(ow, w, kx, s, p)).collect(),
        )
    }

    pub fn forward(&self, input: &Tensor3<T>) -> Result<Tensor3<T>> {
        self.check_input(input)?;
        let (cin, h, w) = input.dims();
        let cout = self.out_channels();
        let k = self.kernel();
        let (s, p) = (self.stride, self.pad);
        let (oh, ow) = self.output_size(h, w);
        let mut out = Tensor3::zeros(cout, oh, ow);
        let weights = self.weight.as_slice();
        let (ry, rx) = self.ranges(h, w);
        for o in 0..cout {
            let bias = self.bias.as_slice()[o];
            let out_plane = out.plane_mut(o);
            out_plane.iter_mut().for_each(|v| *v = bias);
            for i in 0..cin {
                let in_plane = input.plane(i);
                for (ky, &(y0, y1)) in ry.iter().enumerate() {
                    if y0 >= y1 {
                        continue;
                    }
                    for (kx, &(x0, x1)) in rx.iter().enumerate() {
                        let wv = weights[((o * cin + i) * k + ky) * k + kx];
                        if wv == T::zero() || x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y * s + ky - p;
                            let out_row = &mut out_plane[y * ow..(y + 1) * ow];
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let shift = x0 + kx - p;
                                let src = &in_row[shift..shift + (x1 - x0)];
                                for (dst, &v) in out_row[x0..x1].iter_mut().zip(src) {
                                    *dst += wv * v;
                                }
                            } else {
                                for x in x0..x1 {
                                    out_row[x] += wv * in_row[x * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar objective given `d objective / d output`.
    pub fn backward(
        &self,
        input: &Tensor3<T>,
        grad_out: &Tensor3<T>,
        want_input: bool,
    ) -> Result<ConvGrads<T>> {
        self.check_input(input)?;
        let (cin, h, w) = input.dims();
        let cout = self.out_channels();
        let k = self.kernel();
        let (s, p) = (self.stride, self.pad);
        let (oh, ow) = self.output_size(h, w);
        if grad_out.dims() != (cout, oh, ow) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match conv output {:?}",
                grad_out.dims(),
                (cout, oh, ow)
            )));
        }
        let mut gw = Array::zeros(self.weight.shape());
        let mut gb = Array::zeros(self.bias.shape());
        let mut gin = if want_input {
            Some(Tensor3::zeros(cin, h, w))
        } else {
            None
        };
        let weights = self.weight.as_slice();
        let (ry, rx) = self.ranges(h, w);
        for o in 0..cout {
            let g_plane = grad_out.plane(o);
            gb.as_mut_slice()[o] = g_plane.iter().copied().sum();
            for i in 0..cin {
                let in_plane = input.plane(i);
                for (ky, &(y0, y1)) in ry.iter().enumerate() {
                    if y0 >= y1 {
                        continue;
                    }
                    for (kx, &(x0, x1)) in rx.iter().enumerate() {
                        let widx = ((o * cin + i) * k + ky) * k + kx;
                        let wv = weights[widx];
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = y * s + ky - p;
                            let g_row = &g_plane[y * ow..(y + 1) * ow];
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let shift = x0 + kx - p;
                                let src = &in_row[shift..shift + (x1 - x0)];
                                for (&g, &v) in g_row[x0..x1].iter().zip(src) {
                                    acc += g * v;
                                }
                            } else {
                                for x in x0..x1 {
                                    acc += g_row[x] * in_row[x * s + kx - p];
                                }
                            }
                        }
                        gw.as_mut_slice()[widx] += acc;
                        if let Some(gin) = gin.as_mut() {
                            if wv == T::zero() {
                                continue;
                            }
                            let gin_plane = gin.plane_mut(i);
                            for y in y0..y1 {
                                let iy = y * s + ky - p;
                                let g_row = &g_plane[y * ow..(y + 1) * ow];
                                let gin_row = &mut gin_plane[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    let shift = x0 + kx - p;
                                    let dst = &mut gin_row[shift..shift + (x1 - x0)];
                                    for (d, &g) in dst.iter_mut().zip(&g_row[x0..x1]) {
                                        *d += wv * g;
                                    }
                                } else {
                                    for x in x0..x1 {
                                        gin_row[x * s + kx - p] += wv * g_row[x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: gin,
            weight: gw,
            bias: gb,
        })
    }
}

pub fn relu<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of ReLU given its *output*.
pub fn relu_backward<T: Real>(out: &Tensor3<T>, grad: &Tensor3<T>) -> Tensor3<T> {
    let mut g = grad.clone();
    for (gv, &o) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Backward of tanh given its *output*.
pub fn tanh_backward<T: Real>(out: &Tensor3<T>, grad: &Tensor3<T>) -> Tensor3<T> {
    let mut g = grad.clone();
    for (gv, &o) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
        *gv *= T::one() - o * o;
    }
    g
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let (_, _, v) = pool_argmax(x, ch, y, xx);
                out.set(ch, y, xx, v);
            }
        }
    }
    out
}

#[inline]
fn pool_argmax<T: Real>(x: &Tensor3<T>, c: usize, y: usize, xx: usize) -> (usize, usize, T) {
    let mut best = (2 * y, 2 * xx, x.get(c, 2 * y, 2 * xx));
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let v = x.get(c, 2 * y + dy, 2 * xx + dx);
        if v > best.2 {
            best = (2 * y + dy, 2 * xx + dx, v);
        }
    }
    best
}

pub fn max_pool2_backward<T: Real>(input: &Tensor3<T>, grad: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = input.dims();
    let mut g = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..grad.height() {
            for xx in 0..grad.width() {
                let (iy, ix, _) = pool_argmax(input, ch, y, xx);
                let i = g.index(ch, iy, ix);
                g.as_mut_slice()[i] += grad.get(ch, y, xx);
            }
        }
    }
    g
}

/// Softmax across channels at every pixel.
pub fn softmax_channels<T: Real>(logits: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = logits.dims();
    let n = h * w;
    let src = logits.as_slice();
    let mut out = Tensor3::zeros(c, h, w);
    let dst = out.as_mut_slice();
    for px in 0..n {
        let mut max = T::neg_infinity();
        for ch in 0..c {
            max = max.max(src[ch * n + px]);
        }
        let mut total = T::zero();
        for ch in 0..c {
            let e = (src[ch * n + px] - max).exp();
            dst[ch * n + px] = e;
            total += e;
        }
        for ch in 0..c {
            dst[ch * n + px] /= total;
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output probabilities.
pub fn softmax_channels_backward<T: Real>(probs: &Tensor3<T>, grad: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = probs.dims();
    let n = h * w;
    let q = probs.as_slice();
    let g = grad.as_slice();
    let mut out = Tensor3::zeros(c, h, w);
    let dst = out.as_mut_slice();
    for px in 0..n {
        let mut dot = T::zero();
        for ch in 0..c {
            dot += g[ch * n + px] * q[ch * n + px];
        }
        for ch in 0..c {
            dst[ch * n + px] = q[ch * n + px] * (g[ch * n + px] - dot);
        }
    }
    out
}

/// One stage of a [`SeqNet`].
#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Conv { name: String, conv: Conv2d<T> },
    Relu,
    MaxPool2,
}

/// A feed-forward chain of operations with named taps on intermediate outputs.
///
/// Tap `name` refers to the output of op index `taps[name]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqNet<T> {
    pub ops: Vec<Op<T>>,
    pub taps: Vec<(String, usize)>,
}

impl<T: Real> SeqNet<T> {
    pub fn tap_index(&self, name: &str) -> Result<usize> {
        self.taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, i)| i)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Runs the first `upto + 1` ops, returning every intermediate output
    /// (`acts[0]` is the input).
    pub fn forward_trace(&self, input: &Tensor3<T>, upto: usize) -> Result<Vec<Tensor3<T>>> {
        let mut acts = Vec::with_capacity(upto + 2);
        acts.push(input.clone());
        for op in &self.ops[..=upto] {
            let x = acts.last().expect("non-empty");
            let y = match op {
                Op::Conv { conv, .. } => conv.forward(x)?,
                Op::Relu => relu(x),
                Op::MaxPool2 => {
                    if x.height() < 2 || x.width() < 2 {
                        return Err(Error::Shape("input too small for pooling".into()));
                    }
                    max_pool2(x)
                }
            };
            acts.push(y);
        }
        Ok(acts)
    }

    pub fn forward_to(&self, input: &Tensor3<T>, upto: usize) -> Result<Tensor3<T>> {
        Ok(self.forward_trace(input, upto)?.pop().expect("non-empty"))
    }

    /// Back-propagates gradients injected at op outputs down to the input.
    /// `injected[j]` is added to the gradient flowing out of op `j`.
    pub fn backward_to_input(
        &self,
        acts: &[Tensor3<T>],
        injected: &[(usize, Tensor3<T>)],
    ) -> Result<Tensor3<T>> {
        let top = injected.iter().map(|(i, _)| *i).max().expect("at least one gradient");
        let mut grad: Option<Tensor3<T>> = None;
        for j in (0..=top).rev() {
            for (idx, g) in injected {
                if *idx == j {
                    match grad.as_mut() {
                        Some(acc) => acc.add_scaled(g, T::one()),
                        None => grad = Some(g.clone()),
                    }
                }
            }
            let Some(g) = grad.take() else { continue };
            let input = &acts[j];
            let output = &acts[j + 1];
            grad = Some(match &self.ops[j] {
                Op::Conv { conv, .. } => conv.backward(input, &g, true)?.input.expect("requested"),
                Op::Relu => relu_backward(output, &g),
                Op::MaxPool2 => max_pool2_backward(input, &g),
            });
        }
        Ok(grad.unwrap_or_else(|| {
            let (c, h, w) = acts[0].dims();
            Tensor3::zeros(c, h, w)
        }))
    }

    pub fn convs(&self) -> impl Iterator<Item = (&str, &Conv2d<T>)> {
        self.ops.iter().filter_map(|op| match op {
            Op::Conv { name, conv } => Some((name.as_str(), conv)),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = (&str, &mut Conv2d<T>)> {
        self.ops.iter_mut().filter_map(|op| match op {
            Op::Conv { name, conv } => Some((name.as_str(), conv)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor3::from_vec(c, h, w, data).unwrap()
    }

    /// Direct definition of the convolution used as an oracle.
    fn conv_oracle(conv: &Conv2d<f64>, x: &Tensor3<f64>) -> Tensor3<f64> {
        let (cin, h, w) = x.dims();
        let k = conv.kernel();
        let (oh, ow) = conv.output_size(h, w);
        let mut out = Tensor3::zeros(conv.out_channels(), oh, ow);
        for o in 0..conv.out_channels() {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = conv.bias.as_slice()[o];
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (xx * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += conv.weight.as_slice()[((o * cin + i) * k + ky) * k + kx]
                                    * x.get(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(o, y, xx, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, h, w) in &[(1, 5, 6), (2, 7, 8), (2, 4, 4), (2, 1, 1)] {
            let mut conv = Conv2d::<f64>::normal(2, 3, 3, stride, 1, 0.5, &mut rng);
            conv.bias.as_mut_slice()[1] = 0.25;
            let x = random_tensor(2, h, w, 11);
            let got = conv.forward(&x).unwrap();
            let want = conv_oracle(&conv, &x);
            assert_eq!(got.dims(), want.dims());
            for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for stride in [1, 2] {
            let conv = Conv2d::<f64>::normal(2, 3, 3, stride, 1, 0.5, &mut rng);
            let x = random_tensor(2, 5, 4, 17);
            let probe = random_tensor(3, conv.output_size(5, 4).0, conv.output_size(5, 4).1, 23);
            let objective = |c: &Conv2d<f64>, x: &Tensor3<f64>| -> f64 {
                let y = c.forward(x).unwrap();
                y.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
            };
            let grads = conv.backward(&x, &probe, true).unwrap();
            let eps = 1e-6;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                xp.as_mut_slice()[idx] += eps;
                let mut xm = x.clone();
                xm.as_mut_slice()[idx] -= eps;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps);
                let an = grads.input.as_ref().unwrap().as_slice()[idx];
                assert!((fd - an).abs() < 1e-7, "input {idx}: {fd} vs {an}");
            }
            for idx in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight.as_mut_slice()[idx] += eps;
                let mut cm = conv.clone();
                cm.weight.as_mut_slice()[idx] -= eps;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps);
                assert!((fd - grads.weight.as_slice()[idx]).abs() < 1e-7);
            }
            let bias_sum: f64 = probe.plane(1).iter().sum();
            assert!((grads.bias.as_slice()[1] - bias_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_is_consistent() {
        let logits = random_tensor(4, 3, 2, 9);
        let q = softmax_channels(&logits);
        for px in 0..6 {
            let s: f64 = (0..4).map(|c| q.as_slice()[c * 6 + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let probe = random_tensor(4, 3, 2, 10);
        let g = softmax_channels_backward(&q, &probe);
        let f = |l: &Tensor3<f64>| -> f64 {
            softmax_channels(l).as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        for idx in 0..logits.len() {
            let mut lp = logits.clone();
            lp.as_mut_slice()[idx] += 1e-6;
            let mut lm = logits.clone();
            lm.as_mut_slice()[idx] -= 1e-6;
            let fd = (f(&lp) - f(&lm)) / 2e-6;
            assert!((fd - g.as_slice()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor3::from_vec(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let y = max_pool2(&x);
        assert_eq!(y.as_slice(), &[0.9]);
        let g = max_pool2_backward(&x, &Tensor3::filled(1, 1, 1, 2.0));
        assert_eq!(g.as_slice(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
