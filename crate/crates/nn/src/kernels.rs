//! Forward and backward kernels for every op the tape records.
//!
//! Square convolutions with odd kernel size `k > 1` use "same" zero padding
//! and stride 1. Each image is copied into a zero-padded buffer whose rows
//! are `W + 2p` wide; every kernel tap then becomes one GEMM over a shifted
//! view of that buffer. Output columns `W..W+2p` of each row are junk and get
//! cropped away (or are zero on the backward pass).

use crate::error::{shape_err, Result};
use crate::scalar::{gemm, Float, View};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

struct PadGeom {
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    wp: usize,
    plane: usize,
}

impl PadGeom {
    fn new(h: usize, w: usize, k: usize) -> Self {
        let pad = k / 2;
        let wp = w + 2 * pad;
        let hp = h + 2 * pad;
        // trailing slack keeps the shifted views of one channel off the next
        Self { k, pad, h, w, wp, plane: hp * wp + k }
    }

    fn cols(&self) -> usize {
        self.h * self.wp
    }

    fn tap_offset(&self, tap: usize) -> usize {
        (tap / self.k) * self.wp + tap % self.k
    }

    fn pad_into<T: Float>(&self, src: &[T], channels: usize, dst: &mut [T]) {
        let hw = self.h * self.w;
        for c in 0..channels {
            for y in 0..self.h {
                let s = c * hw + y * self.w;
                let d = c * self.plane + (y + self.pad) * self.wp + self.pad;
                dst[d..d + self.w].copy_from_slice(&src[s..s + self.w]);
            }
        }
    }

    /// Copies a `channels x (h*wp)` row-padded matrix into a dense image.
    fn crop_cols<T: Float>(&self, src: &[T], channels: usize, dst: &mut [T]) {
        let cols = self.cols();
        for c in 0..channels {
            for y in 0..self.h {
                let s = c * cols + y * self.wp;
                let d = (c * self.h + y) * self.w;
                dst[d..d + self.w].copy_from_slice(&src[s..s + self.w]);
            }
        }
    }

    fn spread_cols<T: Float>(&self, src: &[T], channels: usize, dst: &mut [T]) {
        let cols = self.cols();
        for c in 0..channels {
            for y in 0..self.h {
                let s = (c * self.h + y) * self.w;
                let d = c * cols + y * self.wp;
                dst[d..d + self.w].copy_from_slice(&src[s..s + self.w]);
            }
        }
    }

    fn crop_padded<T: Float>(&self, src: &[T], channels: usize, dst: &mut [T]) {
        for c in 0..channels {
            for y in 0..self.h {
                let s = c * self.plane + (y + self.pad) * self.wp + self.pad;
                let d = (c * self.h + y) * self.w;
                dst[d..d + self.w].copy_from_slice(&src[s..s + self.w]);
            }
        }
    }
}

fn check_conv<T: Float>(x: &Tensor<T>, w: &Tensor<T>) -> Result<usize> {
    let [co, ci, kh, kw] = w.shape();
    if ci != x.c() || kh != kw || kh % 2 == 0 || co == 0 {
        return shape_err(format!("conv2d: input {:?} with kernel {:?}", x.shape(), w.shape()));
    }
    Ok(kh)
}

fn add_channel_bias<T: Float>(y: &mut Tensor<T>, bias: &Tensor<T>) {
    let [n, c, h, w] = y.shape();
    let b = bias.data();
    let hw = h * w;
    let data = y.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * hw;
            for v in &mut data[start..start + hw] {
                *v += b[ch];
            }
        }
    }
}

/// Per-channel sum over batch and space, returned as a `[1, C, 1, 1]` tensor.
pub fn channel_sum<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = t.shape();
    let mut out = vec![T::zero(); c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += t.plane(i, ch).iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec([1, c, 1, 1], out).expect("channel_sum shape")
}

/// Same-padded, stride-1 convolution. `w` is `[C_out, C_in, k, k]`, `bias`
/// is `[1, C_out, 1, 1]`.
pub fn conv2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let k = check_conv(x, w)?;
    let [n, ci, h, wd] = x.shape();
    let co = w.n();
    let mut y = Tensor::zeros([n, co, h, wd]);
    let hw = h * wd;
    if k == 1 {
        for i in 0..n {
            gemm(
                T::one(),
                w.data(),
                View::dense(0, co, ci),
                x.data(),
                View::dense(i * ci * hw, ci, hw),
                T::zero(),
                y.data_mut(),
                View::dense(i * co * hw, co, hw),
            );
        }
    } else {
        let g = PadGeom::new(h, wd, k);
        let cols = g.cols();
        let mut xp = vec![T::zero(); ci * g.plane];
        let mut yo = vec![T::zero(); co * cols];
        for i in 0..n {
            g.pad_into(x.image(i), ci, &mut xp);
            for tap in 0..k * k {
                gemm(
                    T::one(),
                    w.data(),
                    View::new(tap, co, ci, ci * k * k, k * k),
                    &xp,
                    View::new(g.tap_offset(tap), ci, cols, g.plane, 1),
                    if tap == 0 { T::zero() } else { T::one() },
                    &mut yo,
                    View::dense(0, co, cols),
                );
            }
            g.crop_cols(&yo, co, y.image_mut(i));
        }
    }
    if let Some(b) = bias {
        add_channel_bias(&mut y, b);
    }
    Ok(y)
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
    let k = check_conv(x, w)?;
    let [n, ci, h, wd] = x.shape();
    let co = w.n();
    if dy.shape() != [n, co, h, wd] {
        return shape_err(format!("conv2d_backward: dy {:?}", dy.shape()));
    }
    let hw = h * wd;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    if k == 1 {
        for i in 0..n {
            gemm(
                T::one(),
                dy.data(),
                View::dense(i * co * hw, co, hw),
                x.data(),
                View::new(i * ci * hw, hw, ci, 1, hw),
                T::one(),
                dw.data_mut(),
                View::dense(0, co, ci),
            );
            gemm(
                T::one(),
                w.data(),
                View::new(0, ci, co, 1, ci),
                dy.data(),
                View::dense(i * co * hw, co, hw),
                T::zero(),
                dx.data_mut(),
                View::dense(i * ci * hw, ci, hw),
            );
        }
    } else {
        let g = PadGeom::new(h, wd, k);
        let cols = g.cols();
        let kk = k * k;
        let mut xp = vec![T::zero(); ci * g.plane];
        let mut dxp = vec![T::zero(); ci * g.plane];
        let mut dyo = vec![T::zero(); co * cols];
        for i in 0..n {
            g.pad_into(x.image(i), ci, &mut xp);
            g.spread_cols(dy.image(i), co, &mut dyo);
            dxp.iter_mut().for_each(|v| *v = T::zero());
            for tap in 0..kk {
                let off = g.tap_offset(tap);
                gemm(
                    T::one(),
                    &dyo,
                    View::dense(0, co, cols),
                    &xp,
                    View::new(off, cols, ci, 1, g.plane),
                    T::one(),
                    dw.data_mut(),
                    View::new(tap, co, ci, ci * kk, kk),
                );
                gemm(
                    T::one(),
                    w.data(),
                    View::new(tap, ci, co, kk, ci * kk),
                    &dyo,
                    View::dense(0, co, cols),
                    T::one(),
                    &mut dxp,
                    View::new(off, ci, cols, g.plane, 1),
                );
            }
            g.crop_padded(&dxp, ci, dx.image_mut(i));
        }
    }
    Ok(ConvGrads { dx, dw, db: channel_sum(dy) })
}

/// Transposed convolution with kernel 2 and stride 2. `w` is
/// `[C_in, C_out, 2, 2]`; output is exactly twice the input size.
pub fn conv_transpose2x2<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [n, ci, h, wd] = x.shape();
    let [wci, co, kh, kw] = w.shape();
    if wci != ci || kh != 2 || kw != 2 {
        return shape_err(format!("conv_transpose2x2: input {:?} kernel {:?}", x.shape(), w.shape()));
    }
    let (oh, ow) = (2 * h, 2 * wd);
    let mut y = Tensor::zeros([n, co, oh, ow]);
    let wdat = w.data();
    for i in 0..n {
        for c_in in 0..ci {
            let src = x.plane(i, c_in);
            for c_out in 0..co {
                let kbase = (c_in * co + c_out) * 4;
                let kern = [wdat[kbase], wdat[kbase + 1], wdat[kbase + 2], wdat[kbase + 3]];
                let base = y.index(i, c_out, 0, 0);
                let out = &mut y.data_mut()[base..base + oh * ow];
                for yy in 0..h {
                    for xx in 0..wd {
                        let v = src[yy * wd + xx];
                        let o = 2 * yy * ow + 2 * xx;
                        out[o] += kern[0] * v;
                        out[o + 1] += kern[1] * v;
                        out[o + ow] += kern[2] * v;
                        out[o + ow + 1] += kern[3] * v;
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        add_channel_bias(&mut y, b);
    }
    Ok(y)
}

pub fn conv_transpose2x2_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [n, ci, h, wd] = x.shape();
    let co = w.c();
    let (oh, ow) = (2 * h, 2 * wd);
    if dy.shape() != [n, co, oh, ow] {
        return shape_err(format!("conv_transpose2x2_backward: dy {:?}", dy.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::<T>::zeros(w.shape());
    let wdat = w.data().to_vec();
    for i in 0..n {
        for c_in in 0..ci {
            let src = x.plane(i, c_in).to_vec();
            let dxb = dx.index(i, c_in, 0, 0);
            for c_out in 0..co {
                let kbase = (c_in * co + c_out) * 4;
                let g = dy.plane(i, c_out);
                let mut acc = [T::zero(); 4];
                for yy in 0..h {
                    for xx in 0..wd {
                        let o = 2 * yy * ow + 2 * xx;
                        let d = [g[o], g[o + 1], g[o + ow], g[o + ow + 1]];
                        let v = src[yy * wd + xx];
                        let mut s = T::zero();
                        for t in 0..4 {
                            acc[t] += d[t] * v;
                            s += d[t] * wdat[kbase + t];
                        }
                        dx.data_mut()[dxb + yy * wd + xx] += s;
                    }
                }
                for t in 0..4 {
                    dw.data_mut()[kbase + t] += acc[t];
                }
            }
        }
    }
    Ok(ConvGrads { dx, dw, db: channel_sum(dy) })
}

pub struct BnForward<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for running statistics.
    pub var_unbiased: Vec<T>,
}

fn per_channel_params<T: Float>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.len() != c {
        return shape_err(format!("batch_norm: {what} has {} values for {c} channels", t.len()));
    }
    Ok(())
}

/// Sum and sum of squared deviations of one channel, accumulated in `f64`
/// over `f32`-sized partial sums to keep the inner loop vectorisable.
fn channel_moments<'a, T: Float>(planes: impl Iterator<Item = &'a [T]> + Clone, m: usize) -> (f64, f64) {
    fn chunked_sum<'a, T: Float>(planes: impl Iterator<Item = &'a [T]>, f: impl Fn(T) -> T) -> f64 {
        let mut total = 0.0f64;
        for p in planes {
            for block in p.chunks(512) {
                // independent lanes let the compiler vectorise the adds
                let mut lanes = [T::zero(); 8];
                let mut it = block.chunks_exact(8);
                for c in &mut it {
                    for l in 0..8 {
                        lanes[l] += f(c[l]);
                    }
                }
                let tail = it.remainder().iter().fold(T::zero(), |a, &v| a + f(v));
                total += lanes.iter().fold(tail, |a, &v| a + v).as_f64();
            }
        }
        total
    }
    let mu = chunked_sum(planes.clone(), |v| v) / m as f64;
    let mu_t = T::of(mu);
    let ss = chunked_sum(planes, |v| (v - mu_t) * (v - mu_t));
    (mu, ss)
}

/// Batch normalisation with batch statistics (training mode).
pub fn batch_norm_train<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<BnForward<T>> {
    let [n, c, h, w] = x.shape();
    per_channel_params(gamma, c, "gamma")?;
    per_channel_params(beta, c, "beta")?;
    let m = n * h * w;
    if m < 2 {
        return shape_err("batch_norm_train needs at least two values per channel");
    }
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, ss) = channel_moments((0..n).map(|i| x.plane(i, ch)), m);
        let var = ss / m as f64;
        mean[ch] = T::of(mu);
        inv_std[ch] = T::of(1.0 / (var + BN_EPS).sqrt());
        var_unbiased[ch] = T::of(ss / (m - 1) as f64);
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let hw = h * w;
    let (g, b) = (gamma.data(), beta.data());
    for (idx, ((src, xh), yo)) in x.data().chunks(hw).zip(xhat.chunks_mut(hw)).zip(y.chunks_mut(hw)).enumerate() {
        let ch = idx % c;
        let (mu, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
        for ((o, yv), &v) in xh.iter_mut().zip(yo.iter_mut()).zip(src) {
            let t = (v - mu) * is;
            *o = t;
            *yv = gc * t + bc;
        }
    }
    Ok(BnForward {
        y: Tensor::from_vec(x.shape(), y)?,
        xhat: Tensor::from_vec(x.shape(), xhat)?,
        inv_std,
        mean,
        var_unbiased,
    })
}

/// Batch normalisation with fixed (running) statistics.
pub fn batch_norm_eval<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let [_, c, h, w] = x.shape();
    for (t, what) in [(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")] {
        per_channel_params(t, c, what)?;
    }
    let inv_std: Vec<T> =
        var.data().iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let hw = h * w;
    for (idx, ((src, xh), yo)) in x.data().chunks(hw).zip(xhat.chunks_mut(hw)).zip(y.chunks_mut(hw)).enumerate() {
        let ch = idx % c;
        let (mu, is) = (mean.data()[ch], inv_std[ch]);
        let (gc, bc) = (gamma.data()[ch], beta.data()[ch]);
        for ((o, yv), &v) in xh.iter_mut().zip(yo.iter_mut()).zip(src) {
            let t = (v - mu) * is;
            *o = t;
            *yv = gc * t + bc;
        }
    }
    Ok((Tensor::from_vec(x.shape(), y)?, Tensor::from_vec(x.shape(), xhat)?, inv_std))
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

/// Backward pass of batch normalisation. With `batch_stats` the mean and
/// variance are functions of the input; otherwise they are constants.
pub fn batch_norm_backward<T: Float>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    batch_stats: bool,
) -> BnGrads<T> {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut sdy = vec![0.0f64; c];
    let mut sdyx = vec![0.0f64; c];
    for (idx, (g, xh)) in dy.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
        let ch = idx % c;
        for (gc, xc) in g.chunks(512).zip(xh.chunks(512)) {
            let (mut a, mut b) = ([T::zero(); 8], [T::zero(); 8]);
            let (mut gi, mut xi) = (gc.chunks_exact(8), xc.chunks_exact(8));
            for (g8, x8) in (&mut gi).zip(&mut xi) {
                for l in 0..8 {
                    a[l] += g8[l];
                    b[l] += g8[l] * x8[l];
                }
            }
            for (&g, &x) in gi.remainder().iter().zip(xi.remainder()) {
                a[0] += g;
                b[0] += g * x;
            }
            sdy[ch] += a.iter().fold(T::zero(), |s, &v| s + v).as_f64();
            sdyx[ch] += b.iter().fold(T::zero(), |s, &v| s + v).as_f64();
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for (idx, ((g, xh), d)) in dy.data().chunks(hw).zip(xhat.data().chunks(hw)).zip(dx.chunks_mut(hw)).enumerate() {
        let ch = idx % c;
        let scale = gamma.data()[ch] * inv_std[ch];
        if batch_stats {
            let (mean_dy, mean_dyx) = (T::of(sdy[ch] / m), T::of(sdyx[ch] / m));
            for ((o, &g), &x) in d.iter_mut().zip(g).zip(xh) {
                *o = scale * (g - mean_dy - x * mean_dyx);
            }
        } else {
            for (o, &g) in d.iter_mut().zip(g) {
                *o = scale * g;
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::from_vec([1, c, 1, 1], v.into_iter().map(T::of).collect()).expect("bn shape");
    BnGrads { dx: Tensor::from_vec(dy.shape(), dx).expect("bn shape"), dgamma: to_t(sdyx), dbeta: to_t(sdy) }
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("relu shape")
}

fn check_even<T: Float>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.h() % 2 != 0 || x.w() % 2 != 0 || x.h() == 0 {
        return shape_err(format!("{what}: spatial size {}x{} must be even", x.h(), x.w()));
    }
    Ok(())
}

pub fn avg_pool2<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_even(x, "avg_pool2")?;
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let q = T::of(0.25);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let base = y.index(i, ch, 0, 0);
            let out = &mut y.data_mut()[base..base + oh * ow];
            for yy in 0..oh {
                for xx in 0..ow {
                    let s = 2 * yy * w + 2 * xx;
                    out[yy * ow + xx] = (src[s] + src[s + 1] + src[s + w] + src[s + w + 1]) * q;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward<T: Float>(x_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let ow = w / 2;
    let mut dx = Tensor::zeros(x_shape);
    let q = T::of(0.25);
    for i in 0..n {
        for ch in 0..c {
            let g = dy.plane(i, ch).to_vec();
            let base = dx.index(i, ch, 0, 0);
            let out = &mut dx.data_mut()[base..base + h * w];
            for yy in 0..h {
                for xx in 0..w {
                    out[yy * w + xx] = g[(yy / 2) * ow + xx / 2] * q;
                }
            }
        }
    }
    dx
}

/// 2x2 max pooling; also returns the winning offset (0..4) per output cell.
pub fn max_pool2<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    check_even(x, "max_pool2")?;
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u8; n * c * oh * ow];
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let base = y.index(i, ch, 0, 0);
            for yy in 0..oh {
                for xx in 0..ow {
                    let s = 2 * yy * w + 2 * xx;
                    let cand = [src[s], src[s + 1], src[s + w], src[s + w + 1]];
                    let mut best = 0;
                    for t in 1..4 {
                        if cand[t] > cand[best] {
                            best = t;
                        }
                    }
                    y.data_mut()[base + yy * ow + xx] = cand[best];
                    arg[base + yy * ow + xx] = best as u8;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2_backward<T: Float>(x_shape: [usize; 4], arg: &[u8], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x_shape);
    for i in 0..n {
        for ch in 0..c {
            let obase = dy.index(i, ch, 0, 0);
            let ibase = dx.index(i, ch, 0, 0);
            for yy in 0..oh {
                for xx in 0..ow {
                    let o = obase + yy * ow + xx;
                    let t = arg[o] as usize;
                    let src = ibase + (2 * yy + t / 2) * w + 2 * xx + t % 2;
                    dx.data_mut()[src] += dy.data()[o];
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return shape_err("concat of nothing");
    };
    let [n, _, h, w] = first.shape();
    for p in parts {
        if p.n() != n || p.h() != h || p.w() != w {
            return shape_err(format!("concat: {:?} vs {:?}", p.shape(), first.shape()));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.image(i));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Float>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let [n, _, h, w] = dy.shape();
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
    for i in 0..n {
        let img = dy.image(i);
        let mut off = 0;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&img[off..off + c * hw]);
            off += c * hw;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec([n, c, h, w], d).expect("split shape"))
        .collect()
}

pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::of(1.0 / (h * w) as f64);
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for ch in 0..c {
            out.push(x.plane(i, ch).iter().copied().sum::<T>() * inv);
        }
    }
    Tensor::from_vec([n, c, 1, 1], out).expect("gap shape")
}

pub fn global_avg_pool_backward<T: Float>(x_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let inv = T::of(1.0 / (h * w) as f64);
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in dy.data() {
        data.extend(std::iter::repeat(g * inv).take(h * w));
    }
    Tensor::from_vec([n, c, h, w], data).expect("gap backward shape")
}

/// Fully connected layer on flattened per-item features. `w` is
/// `[C_out, C_in, 1, 1]`; output is `[N, C_out, 1, 1]`.
pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let n = x.n();
    let fin = x.image_len();
    let fout = w.n();
    if w.image_len() != fin {
        return shape_err(format!("linear: input {:?} weight {:?}", x.shape(), w.shape()));
    }
    let mut y = Tensor::zeros([n, fout, 1, 1]);
    gemm(
        T::one(),
        x.data(),
        View::dense(0, n, fin),
        w.data(),
        View::new(0, fin, fout, 1, fin),
        T::zero(),
        y.data_mut(),
        View::dense(0, n, fout),
    );
    if let Some(b) = bias {
        add_channel_bias(&mut y, b);
    }
    Ok(y)
}

pub fn linear_backward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> ConvGrads<T> {
    let n = x.n();
    let fin = x.image_len();
    let fout = w.n();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    gemm(
        T::one(),
        dy.data(),
        View::dense(0, n, fout),
        w.data(),
        View::dense(0, fout, fin),
        T::zero(),
        dx.data_mut(),
        View::dense(0, n, fin),
    );
    gemm(
        T::one(),
        dy.data(),
        View::new(0, fout, n, 1, fout),
        x.data(),
        View::dense(0, n, fin),
        T::zero(),
        dw.data_mut(),
        View::dense(0, fout, fin),
    );
    ConvGrads { dx, dw, db: channel_sum(dy) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let [n, ci, h, wd] = x.shape();
        let [co, _, k, _] = w.shape();
        let p = (k / 2) as isize;
        let mut y = Tensor::zeros([n, co, h, wd]);
        for i in 0..n {
            for o in 0..co {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        s += w.at(o, c, ky, kx) * x.at(i, c, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        y.set(i, o, yy, xx, s);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3, 5] {
            let x = random([2, 3, 5, 7], &mut rng);
            let w = random([4, 3, k, k], &mut rng);
            let y = conv2d(&x, &w, None).unwrap();
            assert!(y.max_abs_diff(&conv_naive(&x, &w)) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> is bilinear, so d/dx and d/dw are the adjoints.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [1, 3] {
            let x = random([2, 3, 6, 5], &mut rng);
            let w = random([2, 3, k, k], &mut rng);
            let dy = random([2, 2, 6, 5], &mut rng);
            let g = conv2d_backward(&x, &w, &dy).unwrap();
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let y = conv2d(&x, &w, None).unwrap();
            let lhs = dot(&y, &dy);
            assert!((lhs - dot(&g.dx, &x)).abs() < 1e-10);
            assert!((lhs - dot(&g.dw, &w)).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_conv_nearest_kernel_upsamples() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full([1, 1, 2, 2], 1.0);
        let y = conv_transpose2x2(&x, &w, None).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn pools_and_concat() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[3.25]);
        let (m, arg) = max_pool2(&x).unwrap();
        assert_eq!((m.data()[0], arg[0]), (5.0, 1));
        let cat = concat_channels(&[&x, &x.scale(2.0)]).unwrap();
        assert_eq!(cat.shape(), [1, 2, 2, 2]);
        let parts = split_channels(&cat, &[1, 1]);
        assert_eq!(parts[1], x.scale(2.0));
        assert!(avg_pool2(&Tensor::<f64>::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn batch_norm_normalises() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([4, 2, 3, 3], &mut rng);
        let g = Tensor::full([1, 2, 1, 1], 1.0);
        let b = Tensor::zeros([1, 2, 1, 1]);
        let out = batch_norm_train(&x, &g, &b).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|i| out.y.plane(i, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
