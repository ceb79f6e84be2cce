//! Dense rank-4 tensors, the primitive differentiable layers used by the
//! classifier, and a deterministic counter-based RNG.
//!
//! Everything is 64-bit: the tensors involved are tiny and the gradient
//! checks need the headroom. Operations are pure functions of their inputs;
//! there is no global state.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Error for shape/argument violations in tensor operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorError(pub String);

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tensor error: {}", self.0)
    }
}

pub type Result<T> = core::result::Result<T, TensorError>;

macro_rules! check {
    ($cond:expr, $($arg:tt)*) => {
        if !($cond) {
            return Err(TensorError(format!($($arg)*)));
        }
    };
}

/// Dense (n, c, h, w) tensor of f64 in row-major n→c→h→w order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        check!(
            data.len() == n * c * h * w,
            "data length {} does not match dims {}x{}x{}x{}",
            data.len(),
            n,
            c,
            h,
            w
        );
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(n, c, i, j)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(n, c, i, j);
        &mut self.data[k]
    }

    /// Contiguous h*w plane for one (instance, channel) pair.
    #[inline(always)]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline(always)]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        let start = (n * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel slice [lo, hi) as a new tensor.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Tensor4 {
        assert!(lo <= hi && hi <= self.c);
        let mut out = Tensor4::zeros(self.n, hi - lo, self.h, self.w);
        for n in 0..self.n {
            for (oc, c) in (lo..hi).enumerate() {
                out.plane_mut(n, oc).copy_from_slice(self.plane(n, c));
            }
        }
        out
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
        assert!(a.n == b.n && a.h == b.h && a.w == b.w);
        let mut out = Tensor4::zeros(a.n, a.c + b.c, a.h, a.w);
        for n in 0..a.n {
            for c in 0..a.c {
                out.plane_mut(n, c).copy_from_slice(a.plane(n, c));
            }
            for c in 0..b.c {
                out.plane_mut(n, a.c + c).copy_from_slice(b.plane(n, c));
            }
        }
        out
    }
}

/// A tensor together with its gradient buffer of identical dims.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradPair {
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl GradPair {
    pub fn new(value: Tensor4) -> Self {
        let grad = Tensor4::zeros(value.n, value.c, value.h, value.w);
        GradPair { value, grad }
    }

    pub fn dims_match(&self) -> bool {
        self.value.dims() == self.grad.dims()
    }
}

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------

/// Counter-based deterministic generator built on the SplitMix64 finalizer:
/// sample k of seed s is `mix64(s + (k+1) * 0x9E3779B97F4A7C15)`. Identical
/// seeds give bit-identical streams on every platform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(
            self.seed
                .wrapping_add(self.counter.wrapping_mul(0x9E3779B97F4A7C15)),
        )
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Rejection-free modulo is fine at these sizes.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller, caching the spare draw.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let mut u1 = self.uniform();
        let u2 = self.uniform();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Derive an independent child generator; deterministic given the parent
    /// state and tag.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(tag ^ 0xA076_1D64_78BD_642F)))
    }

    pub fn fill_uniform(&mut self, t: &mut Tensor4, lo: f64, hi: f64) {
        for v in t.data.iter_mut() {
            *v = self.uniform_in(lo, hi);
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (3x3, stride 1, zero padding 1)
// ---------------------------------------------------------------------------

fn check_conv_dims(x: &Tensor4, weight: &Tensor4, bias: &[f64]) -> Result<()> {
    check!(
        weight.h == 3 && weight.w == 3,
        "conv kernel must be 3x3, got {}x{}",
        weight.h,
        weight.w
    );
    check!(
        x.c == weight.c,
        "input channels {} do not match kernel input channels {}",
        x.c,
        weight.c
    );
    check!(
        bias.len() == weight.n,
        "bias length {} does not match output channels {}",
        bias.len(),
        weight.n
    );
    Ok(())
}

/// Cross-correlation with a 3x3 kernel, stride 1, zero padding 1.
/// `weight` dims are (c_out, c_in, 3, 3).
pub fn conv2d_forward(x: &Tensor4, weight: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    check_conv_dims(x, weight, bias)?;
    let (n, cin, h, w) = x.dims();
    let cout = weight.n;
    let mut y = Tensor4::zeros(n, cout, h, w);
    for b in 0..n {
        for co in 0..cout {
            let out = y.plane_mut(b, co);
            for v in out.iter_mut() {
                *v = bias[co];
            }
            for ci in 0..cin {
                let xin = x.plane(b, ci);
                let ker = weight.plane(co, ci);
                for i in 0..h {
                    for (di, krow) in ker.chunks_exact(3).enumerate() {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let xrow = &xin[si as usize * w..si as usize * w + w];
                        let orow = &mut out[i * w..i * w + w];
                        // dj = 0,1,2 maps to source column j-1, j, j+1
                        let k0 = krow[0];
                        let k1 = krow[1];
                        let k2 = krow[2];
                        for (j, o) in orow.iter_mut().enumerate() {
                            if j > 0 {
                                *o += k0 * xrow[j - 1];
                            }
                            *o += k1 * xrow[j];
                            if j + 1 < w {
                                *o += k2 * xrow[j + 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `conv2d_forward` with respect to input, weight, and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    check!(
        weight.h == 3 && weight.w == 3,
        "conv kernel must be 3x3, got {}x{}",
        weight.h,
        weight.w
    );
    check!(
        x.c == weight.c,
        "input channels {} do not match kernel input channels {}",
        x.c,
        weight.c
    );
    check!(
        grad_out.dims() == (x.n, weight.n, x.h, x.w),
        "grad_out dims {:?} inconsistent with forward output",
        grad_out.dims()
    );
    let (n, cin, h, w) = x.dims();
    let cout = weight.n;
    let mut gx = Tensor4::zeros(n, cin, h, w);
    let mut gw = Tensor4::zeros(cout, cin, 3, 3);
    let mut gb = vec![0.0; cout];

    for b in 0..n {
        for co in 0..cout {
            let go = grad_out.plane(b, co);
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..cin {
                let xin = x.plane(b, ci);
                let ker = weight.plane(co, ci);
                let gker = gw.plane_mut(co, ci);
                for i in 0..h {
                    let grow = &go[i * w..i * w + w];
                    for di in 0..3 {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let xrow = &xin[si as usize * w..si as usize * w + w];
                        for j in 0..w {
                            let g = grow[j];
                            if g == 0.0 {
                                continue;
                            }
                            for dj in 0..3usize {
                                let sj = j as isize + dj as isize - 1;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                gker[di * 3 + dj] += g * xrow[sj as usize];
                            }
                        }
                    }
                }
                let gxin = gx.plane_mut(b, ci);
                for i in 0..h {
                    let grow = &go[i * w..i * w + w];
                    for di in 0..3 {
                        let si = i as isize + di as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let base = si as usize * w;
                        for j in 0..w {
                            let g = grow[j];
                            if g == 0.0 {
                                continue;
                            }
                            for dj in 0..3usize {
                                let sj = j as isize + dj as isize - 1;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                gxin[base + sj as usize] += g * ker[di * 3 + dj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// Elementwise and pooling layers
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// grad_x = grad_y where x > 0, else 0.
pub fn relu_backward(x: &Tensor4, grad_y: &Tensor4) -> Result<Tensor4> {
    check!(
        x.dims() == grad_y.dims(),
        "relu backward dims mismatch: {:?} vs {:?}",
        x.dims(),
        grad_y.dims()
    );
    let mut gx = grad_y.clone();
    for (g, &v) in gx.data.iter_mut().zip(x.data.iter()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(gx)
}

/// 2x2 average pooling with stride 2; h and w must be even.
pub fn avgpool2x2_forward(x: &Tensor4) -> Result<Tensor4> {
    check!(
        x.h % 2 == 0 && x.w % 2 == 0,
        "avgpool2x2 needs even spatial dims, got {}x{}",
        x.h,
        x.w
    );
    let (n, c, h, w) = x.dims();
    let mut y = Tensor4::zeros(n, c, h / 2, w / 2);
    for b in 0..n {
        for ch in 0..c {
            let xin = x.plane(b, ch);
            let out = y.plane_mut(b, ch);
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let s = xin[2 * i * w + 2 * j]
                        + xin[2 * i * w + 2 * j + 1]
                        + xin[(2 * i + 1) * w + 2 * j]
                        + xin[(2 * i + 1) * w + 2 * j + 1];
                    out[i * (w / 2) + j] = 0.25 * s;
                }
            }
        }
    }
    Ok(y)
}

pub fn avgpool2x2_backward(x_dims: (usize, usize, usize, usize), grad_y: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = x_dims;
    check!(
        grad_y.dims() == (n, c, h / 2, w / 2),
        "avgpool backward dims mismatch"
    );
    let mut gx = Tensor4::zeros(n, c, h, w);
    for b in 0..n {
        for ch in 0..c {
            let go = grad_y.plane(b, ch);
            let gxi = gx.plane_mut(b, ch);
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let g = 0.25 * go[i * (w / 2) + j];
                    gxi[2 * i * w + 2 * j] += g;
                    gxi[2 * i * w + 2 * j + 1] += g;
                    gxi[(2 * i + 1) * w + 2 * j] += g;
                    gxi[(2 * i + 1) * w + 2 * j + 1] += g;
                }
            }
        }
    }
    Ok(gx)
}

/// Spatial mean per (instance, channel); output is (n, c, 1, 1).
pub fn global_avg_pool_forward(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let mut y = Tensor4::zeros(n, c, 1, 1);
    let inv = 1.0 / (h * w) as f64;
    for b in 0..n {
        for ch in 0..c {
            *y.at_mut(b, ch, 0, 0) = x.plane(b, ch).iter().sum::<f64>() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward(
    x_dims: (usize, usize, usize, usize),
    grad_y: &Tensor4,
) -> Result<Tensor4> {
    let (n, c, h, w) = x_dims;
    check!(grad_y.dims() == (n, c, 1, 1), "gap backward dims mismatch");
    let mut gx = Tensor4::zeros(n, c, h, w);
    let inv = 1.0 / (h * w) as f64;
    for b in 0..n {
        for ch in 0..c {
            let g = grad_y.at(b, ch, 0, 0) * inv;
            for v in gx.plane_mut(b, ch) {
                *v = g;
            }
        }
    }
    Ok(gx)
}

/// Fully connected layer on (n, c, 1, 1) inputs. `weight` dims are
/// (k_out, c_in, 1, 1).
pub fn linear_forward(x: &Tensor4, weight: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    check!(x.h == 1 && x.w == 1, "linear expects (n, c, 1, 1) input");
    check!(
        weight.c == x.c && weight.h == 1 && weight.w == 1,
        "linear weight dims {:?} do not match input channels {}",
        weight.dims(),
        x.c
    );
    check!(bias.len() == weight.n, "linear bias length mismatch");
    let (n, c, _, _) = x.dims();
    let k = weight.n;
    let mut y = Tensor4::zeros(n, k, 1, 1);
    for b in 0..n {
        let xin = &x.data[b * c..(b + 1) * c];
        for o in 0..k {
            let wrow = &weight.data[o * c..(o + 1) * c];
            let dot: f64 = xin.iter().zip(wrow).map(|(a, b)| a * b).sum();
            y.data[b * k + o] = dot + bias[o];
        }
    }
    Ok(y)
}

pub fn linear_backward(
    x: &Tensor4,
    weight: &Tensor4,
    grad_y: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    check!(
        grad_y.dims() == (x.n, weight.n, 1, 1),
        "linear backward dims mismatch"
    );
    let (n, c, _, _) = x.dims();
    let k = weight.n;
    let mut gx = Tensor4::zeros(n, c, 1, 1);
    let mut gw = Tensor4::zeros(k, c, 1, 1);
    let mut gb = vec![0.0; k];
    for b in 0..n {
        let xin = &x.data[b * c..(b + 1) * c];
        for o in 0..k {
            let g = grad_y.data[b * k + o];
            gb[o] += g;
            let wrow = &weight.data[o * c..(o + 1) * c];
            let gwrow = &mut gw.data[o * c..(o + 1) * c];
            for ci in 0..c {
                gwrow[ci] += g * xin[ci];
                gx.data[b * c + ci] += g * wrow[ci];
            }
        }
    }
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise softmax over the channel axis of (n, k, 1, 1) logits,
/// stabilized by max subtraction.
pub fn softmax(logits: &Tensor4) -> Tensor4 {
    let (n, k, _, _) = logits.dims();
    let mut p = logits.clone();
    for b in 0..n {
        let row = &mut p.data[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// grad_logits of a scalar loss given grad wrt probabilities.
pub fn softmax_backward(probs: &Tensor4, grad_p: &Tensor4) -> Result<Tensor4> {
    check!(probs.dims() == grad_p.dims(), "softmax backward dims mismatch");
    let (n, k, _, _) = probs.dims();
    let mut gz = Tensor4::zeros(n, k, 1, 1);
    for b in 0..n {
        let p = &probs.data[b * k..(b + 1) * k];
        let gp = &grad_p.data[b * k..(b + 1) * k];
        let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
        for o in 0..k {
            gz.data[b * k + o] = p[o] * (gp[o] - dot);
        }
    }
    Ok(gz)
}

/// Mean negative log-likelihood over the batch.
pub fn cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<f64> {
    let (n, k, _, _) = logits.dims();
    check!(labels.len() == n, "label count {} != batch size {}", labels.len(), n);
    for &y in labels {
        check!(y < k, "label {} out of range for {} classes", y, k);
    }
    let mut loss = 0.0;
    for b in 0..n {
        let row = &logits.data[b * k..(b + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
        loss += lse - row[labels[b]];
    }
    Ok(loss / n as f64)
}

/// Gradient of `cross_entropy` wrt logits: (softmax - one_hot) / n.
pub fn cross_entropy_backward(logits: &Tensor4, labels: &[usize]) -> Result<Tensor4> {
    let (n, k, _, _) = logits.dims();
    check!(labels.len() == n, "label count {} != batch size {}", labels.len(), n);
    for &y in labels {
        check!(y < k, "label {} out of range for {} classes", y, k);
    }
    let mut g = softmax(logits);
    let inv = 1.0 / n as f64;
    for b in 0..n {
        g.data[b * k + labels[b]] -= 1.0;
        for v in &mut g.data[b * k..(b + 1) * k] {
            *v *= inv;
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient estimate of a scalar function of a tensor:
/// (f(x + h e) - f(x - h e)) / 2h per entry.
pub fn finite_diff_grad<F: FnMut(&Tensor4) -> f64>(mut f: F, x: &Tensor4, h: f64) -> Tensor4 {
    let mut g = Tensor4::zeros(x.n, x.c, x.h, x.w);
    let mut probe = x.clone();
    for k in 0..x.data.len() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let fp = f(&probe);
        probe.data[k] = orig - h;
        let fm = f(&probe);
        probe.data[k] = orig;
        g.data[k] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error used throughout the gradient checks:
/// |a - b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Max elementwise relative error between two same-shaped tensors.
pub fn max_rel_err(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor4::zeros(1, 1, 3, 3);
        let mut rng = Rng::new(1);
        let mut w = Tensor4::zeros(1, 1, 3, 3);
        rng.fill_uniform(&mut w, -1.0, 1.0);
        let y = conv2d_forward(&x, &w, &[0.7]).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(2);
        let mut x = Tensor4::zeros(2, 1, 4, 4);
        rng.fill_uniform(&mut x, -1.0, 1.0);
        let mut w = Tensor4::zeros(1, 1, 3, 3);
        *w.at_mut(0, 0, 1, 1) = 1.0;
        let y = conv2d_forward(&x, &w, &[0.0]).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_dim_mismatch_errors() {
        let x = Tensor4::zeros(1, 2, 4, 4);
        let w = Tensor4::zeros(3, 1, 3, 3);
        assert!(conv2d_forward(&x, &w, &[0.0; 3]).is_err());
        let w = Tensor4::zeros(3, 2, 3, 3);
        assert!(conv2d_forward(&x, &w, &[0.0; 2]).is_err());
    }

    #[test]
    fn conv_backward_zero_grad() {
        let mut rng = Rng::new(3);
        let mut x = Tensor4::zeros(1, 2, 4, 4);
        rng.fill_uniform(&mut x, -1.0, 1.0);
        let mut w = Tensor4::zeros(2, 2, 3, 3);
        rng.fill_uniform(&mut w, -1.0, 1.0);
        let go = Tensor4::zeros(1, 2, 4, 4);
        let (gx, gw, gb) = conv2d_backward(&x, &w, &go).unwrap();
        assert!(gx.data.iter().all(|&v| v == 0.0));
        assert!(gw.data.iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_tap() {
        // 1x1 spatial input: only the center tap sees the input.
        let x = Tensor4::from_vec(1, 1, 1, 1, vec![3.0]).unwrap();
        let mut w = Tensor4::zeros(1, 1, 3, 3);
        *w.at_mut(0, 0, 1, 1) = 2.0;
        let go = Tensor4::from_vec(1, 1, 1, 1, vec![5.0]).unwrap();
        let (gx, gw, gb) = conv2d_backward(&x, &w, &go).unwrap();
        assert_eq!(gx.data[0], 10.0); // grad_out * center weight
        assert_eq!(gw.at(0, 0, 1, 1), 15.0); // x * grad_out
        assert_eq!(gb[0], 5.0);
    }

    #[test]
    fn softmax_uniform_logits() {
        let z = Tensor4::full(1, 4, 1, 1, 2.5);
        let p = softmax(&z);
        for &v in &p.data {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_backward_negative_zero_grad() {
        let x = Tensor4::from_vec(1, 1, 1, 2, vec![-1.0, 1.0]).unwrap();
        let g = Tensor4::full(1, 1, 1, 2, 3.0);
        let gx = relu_backward(&x, &g).unwrap();
        assert_eq!(gx.data, vec![0.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let z = Tensor4::zeros(2, 7, 1, 1);
        let loss = cross_entropy(&z, &[0, 3]).unwrap();
        assert!((loss - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct() {
        let mut z = Tensor4::zeros(1, 3, 1, 1);
        z.data[1] = 50.0;
        let loss = cross_entropy(&z, &[1]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let z = Tensor4::zeros(1, 3, 1, 1);
        assert!(cross_entropy(&z, &[3]).is_err());
        assert!(cross_entropy_backward(&z, &[7]).is_err());
    }

    #[test]
    fn finite_diff_quadratic() {
        let mut rng = Rng::new(4);
        let mut x = Tensor4::zeros(1, 2, 2, 2);
        rng.fill_uniform(&mut x, -2.0, 2.0);
        let g = finite_diff_grad(|t| t.data.iter().map(|v| v * v).sum(), &x, 1e-5);
        for (gi, xi) in g.data.iter().zip(x.data.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let x = Tensor4::full(1, 1, 2, 2, 1.5);
        let g = finite_diff_grad(|_| 42.0, &x, 1e-5);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(124);
        assert_ne!(Rng::new(123).next_u64(), c.next_u64());
    }

    #[test]
    fn grad_pair_dims() {
        let p = GradPair::new(Tensor4::zeros(1, 2, 3, 4));
        assert!(p.dims_match());
    }

    #[test]
    fn channel_slice_concat_roundtrip() {
        let mut rng = Rng::new(5);
        let mut x = Tensor4::zeros(2, 4, 3, 3);
        rng.fill_uniform(&mut x, -1.0, 1.0);
        let a = x.slice_channels(0, 2);
        let b = x.slice_channels(2, 4);
        assert_eq!(Tensor4::concat_channels(&a, &b), x);
    }
}
