//! Differentiable primitives. Each forward has a matching backward that
//! returns exact gradients for an upstream gradient of the output's shape.

use super::tensor::{matmul, Mat, Real, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside the pixelwise normalisation square root.
pub const NORM_EPS: f64 = 1e-8;

/// Convolution parameters: weight `[out, in, k, k]` and one bias per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Conv2d<T> {
        Conv2d {
            weight: Tensor::zeros([out_ch, in_ch, kernel, kernel]),
            bias: vec![T::zero(); out_ch],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, &self.bias)
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Gradients of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    /// Input gradient; `None` when it was not requested.
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

fn check_conv(x: &Tensor<impl Real>, w_shape: [usize; 4], bias_len: usize) -> Result<()> {
    let [o, i, kh, kw] = w_shape;
    if x.channels() != i {
        return Err(Error::Shape(format!(
            "conv expects {i} input channels, got {}",
            x.channels()
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!("kernel {kh}x{kw} must be square and odd")));
    }
    if bias_len != o {
        return Err(Error::Shape(format!("{bias_len} biases for {o} outputs")));
    }
    Ok(())
}

/// Unfolds one image `[c, h, w]` into `[c·k·k, h·w]` patch columns with zero
/// padding.
fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let src = &img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        line.fill(T::zero());
                        continue;
                    }
                    let sline = &src[sy as usize * w..(sy as usize + 1) * w];
                    line[..x0].fill(T::zero());
                    line[x1..].fill(T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    line[x0..x1].copy_from_slice(&sline[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let dst = &mut img[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &src[y * w + x0..y * w + x1];
                    let sx0 = (x0 as isize + dx) as usize;
                    let out = &mut dst[sy as usize * w + sx0..sy as usize * w + sx0 + (x1 - x0)];
                    for (o, &v) in out.iter_mut().zip(line) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Same-size, stride-1, zero-padded cross-correlation plus bias.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    check_conv(x, weight.shape(), bias.len())?;
    let [n, c, h, w] = x.shape();
    let [o, _, k, _] = weight.shape();
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = Tensor::zeros([n, o, h, w]);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for b in 0..n {
        let dst = out.item_mut(b);
        for (oc, &bv) in bias.iter().enumerate() {
            dst[oc * hw..(oc + 1) * hw].fill(bv);
        }
        let patches: &[T] = if k == 1 {
            x.item(b)
        } else {
            im2col(x.item(b), c, h, w, k, &mut cols);
            &cols
        };
        matmul(Mat::new(weight.data(), o, ckk), Mat::new(patches, ckk, hw), dst, T::one());
    }
    Ok(out)
}

/// Exact gradients of `conv2d(x, w, b)` contracted with `upstream`.
pub fn conv2d_grad<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, upstream: &Tensor<T>) -> Result<ConvGrads<T>> {
    conv2d_backward(x, weight, upstream, true, true)
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    check_conv(x, weight.shape(), weight.shape()[0])?;
    let [n, c, h, w] = x.shape();
    let [o, _, k, _] = weight.shape();
    if upstream.shape() != [n, o, h, w] {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match conv output {:?}",
            upstream.shape(),
            [n, o, h, w]
        )));
    }
    let hw = h * w;
    let ckk = c * k * k;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![T::zero(); o];
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
    let mut cols = if k == 1 || !need_dw { Vec::new() } else { vec![T::zero(); ckk * hw] };
    let mut dcols = if k == 1 || !need_dx { Vec::new() } else { vec![T::zero(); ckk * hw] };

    for b in 0..n {
        let g = upstream.item(b);
        for (oc, acc) in db.iter_mut().enumerate() {
            *acc += g[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
        }
        if need_dw {
            let patches: &[T] = if k == 1 {
                x.item(b)
            } else {
                im2col(x.item(b), c, h, w, k, &mut cols);
                &cols
            };
            // dW += g · patchesᵀ
            matmul(Mat::new(g, o, hw), Mat::t(patches, ckk, hw), dw.data_mut(), T::one());
        }

        if let Some(dx) = dx.as_mut() {
            // dpatches = Wᵀ · g
            if k == 1 {
                matmul(Mat::t(weight.data(), o, ckk), Mat::new(g, o, hw), dx.item_mut(b), T::zero());
            } else {
                matmul(Mat::t(weight.data(), o, ckk), Mat::new(g, o, hw), &mut dcols, T::zero());
                col2im(&dcols, c, h, w, k, dx.item_mut(b));
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// 2×2 mean pooling with stride 2.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("pooling needs even spatial dims, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros([n, c, h2, w2]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let r0 = &s[2 * y * w..(2 * y + 1) * w];
            let r1 = &s[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..w2 {
                d[y * w2 + xx] = (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

/// Spreads each upstream value over its 2×2 source window, divided by 4.
pub fn avg_pool2_grad<T: Real>(upstream: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = upstream.shape();
    let (h, w) = (2 * h2, 2 * w2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = upstream.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h2 * w2..(p + 1) * h2 * w2];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                d[y * w + xx] = s[(y / 2) * w2 + xx / 2] * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn nn_upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, h2, w2]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Sums the four replicated upstream cells back onto each source pixel.
pub fn nn_upsample2_grad<T: Real>(upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h2, w2] = upstream.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Shape(format!("upsample gradient needs even dims, got {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    let src = upstream.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let s = &src[p * h2 * w2..(p + 1) * h2 * w2];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[(y / 2) * w + xx / 2] += s[y * w2 + xx];
            }
        }
    }
    Ok(out)
}

/// Output of [`pixelwise_norm`] plus what its gradient needs.
#[derive(Debug, Clone)]
pub struct NormOutput<T> {
    pub y: Tensor<T>,
    /// `1/√(σ² + ε)` per (batch, pixel).
    pub inv_sigma: Vec<T>,
}

/// Standardises the channel vector at every pixel to zero mean and unit
/// population standard deviation.
pub fn pixelwise_norm<T: Real>(x: &Tensor<T>) -> NormOutput<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let eps = T::of(NORM_EPS);
    let mut y = Tensor::zeros(x.shape());
    let mut inv_sigma = vec![T::zero(); n * hw];
    let mut mean = vec![T::zero(); hw];
    let mut var = vec![T::zero(); hw];
    for b in 0..n {
        let src = x.item(b);
        mean.fill(T::zero());
        var.fill(T::zero());
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv = &mut inv_sigma[b * hw..(b + 1) * hw];
        for (i, &s) in inv.iter_mut().zip(&var) {
            *i = T::one() / (s * inv_c + eps).sqrt();
        }
        let dst = y.item_mut(b);
        for ch in 0..c {
            let range = ch * hw..(ch + 1) * hw;
            for (((o, &v), &m), &i) in dst[range.clone()].iter_mut().zip(&src[range]).zip(&mean).zip(inv.iter()) {
                *o = (v - m) * i;
            }
        }
    }
    NormOutput { y, inv_sigma }
}

/// `dx = s·(dy − mean_c dy − y·mean_c(dy·y))` with `s = 1/√(σ² + ε)`.
pub fn pixelwise_norm_grad<T: Real>(out: &NormOutput<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = out.y.shape();
    let hw = h * w;
    let inv_c = T::of(1.0 / c as f64);
    let mut dx = Tensor::zeros(out.y.shape());
    let mut mean_g = vec![T::zero(); hw];
    let mut mean_gy = vec![T::zero(); hw];
    for b in 0..n {
        let g = upstream.item(b);
        let y = out.y.item(b);
        mean_g.fill(T::zero());
        mean_gy.fill(T::zero());
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            for ((mg, mgy), (&gv, &yv)) in mean_g.iter_mut().zip(mean_gy.iter_mut()).zip(g[r.clone()].iter().zip(&y[r])) {
                *mg += gv;
                *mgy += gv * yv;
            }
        }
        let inv = &out.inv_sigma[b * hw..(b + 1) * hw];
        let dst = dx.item_mut(b);
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            for (p, o) in dst[r.clone()].iter_mut().enumerate() {
                let i = ch * hw + p;
                *o = inv[p] * (g[i] - mean_g[p] * inv_c - y[i] * mean_gy[p] * inv_c);
            }
        }
    }
    dx
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// ReLU with a prescribed on/off pattern: passes `x` where `on` is set.
/// With the pattern of the point itself this equals [`relu`] there, and stays
/// smooth across the kink.
pub fn relu_masked<T: Real>(x: &Tensor<T>, on: &[bool]) -> Result<Tensor<T>> {
    if on.len() != x.data().len() {
        return Err(Error::Shape(format!("ReLU mask of {} for {:?}", on.len(), x.shape())));
    }
    let data = x.data().iter().zip(on).map(|(&v, &o)| if o { v } else { T::zero() }).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Passes upstream where the pre-activation was positive.
pub fn relu_grad<T: Real>(pre: &Tensor<T>, upstream: &Tensor<T>) -> Tensor<T> {
    let data = pre
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(pre.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-nested-loop reference convolution.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape();
        let [o, _, k, _] = w.shape();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros([n, o, h, wd]);
        for bi in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        acc += w.at(oc, ic, ky, kx) * x.at(bi, ic, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        out.set(bi, oc, y, xx, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = random([2, 1, 5, 4], 1);
        let w = Tensor::filled([1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, &[0.0]).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_one_hot() {
        let mut x = Tensor::zeros([1, 1, 5, 5]);
        x.set(0, 0, 2, 2, 1.0);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &[0.0]).unwrap();
        for yy in 0..5 {
            for xx in 0..5 {
                let inside = (1..=3).contains(&yy) && (1..=3).contains(&xx);
                assert_eq!(y.at(0, 0, yy, xx), if inside { 1.0 } else { 0.0 });
            }
        }
        // hot pixel in the corner: block clipped at the border
        let mut x = Tensor::zeros([1, 1, 5, 5]);
        x.set(0, 0, 0, 0, 1.0);
        let y = conv2d(&x, &w, &[0.0]).unwrap();
        assert_eq!(y.data().iter().sum::<f64>(), 4.0);
        assert_eq!(y.at(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn conv_matches_reference() {
        for (k, seed) in [(3usize, 2u64), (5, 3), (1, 4)] {
            let x = random([2, 3, 7, 6], seed);
            let w = random([4, 3, k, k], seed + 10);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let got = conv2d(&x, &w, &b).unwrap();
            let want = conv_reference(&x, &w, &b);
            for (g, r) in got.data().iter().zip(want.data()) {
                assert!((g - r).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = random([1, 2, 4, 4], 1);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), &[0.0]).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 2, 2]), &[0.0]).is_err());
        let up = Tensor::zeros([1, 2, 4, 4]);
        assert!(conv2d_grad(&x, &Tensor::zeros([1, 2, 3, 3]), &up).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = random([1, 2, 4, 4], 5);
        let w = random([3, 2, 3, 3], 6);
        let g = conv2d_grad(&x, &w, &Tensor::zeros([1, 3, 4, 4])).unwrap();
        assert!(g.dx.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.dw.data().iter().all(|&v| v == 0.0));
        assert!(g.db.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::filled([1, 1, 1, 1], 3.0);
        let w = Tensor::filled([1, 1, 1, 1], -2.0);
        let up = Tensor::filled([1, 1, 1, 1], 0.5);
        let g = conv2d_grad(&x, &w, &up).unwrap();
        assert_eq!(g.dw.data(), &[1.5]);
        assert_eq!(g.dx.unwrap().data(), &[-1.0]);
        assert_eq!(g.db, vec![0.5]);
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::filled([1, 2, 4, 6], 7.0);
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.shape(), [1, 2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 7.0));
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[2.5]);
        assert!(avg_pool2(&Tensor::<f64>::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn pool_of_upsampled_pool_is_pool() {
        let x = random([2, 3, 8, 4], 9);
        let p = avg_pool2(&x).unwrap();
        let again = avg_pool2(&nn_upsample2(&p)).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn pixelwise_norm_examples() {
        let x = Tensor::from_vec([1, 3, 1, 1], vec![5.0, 5.0, 5.0]).unwrap();
        assert!(pixelwise_norm(&x).y.data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = pixelwise_norm(&x).y;
        let want = [-1.2247f64, 0.0, 1.2247];
        for (g, w) in y.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-3);
        }
    }

    #[test]
    fn pixelwise_norm_standardises() {
        let x = random([2, 16, 3, 5], 12);
        let y = pixelwise_norm(&x).y;
        for b in 0..2 {
            for yy in 0..3 {
                for xx in 0..5 {
                    let v: Vec<f64> = (0..16).map(|c| y.at(b, c, yy, xx)).collect();
                    let mean = v.iter().sum::<f64>() / 16.0;
                    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
                    assert!(mean.abs() < 1e-6);
                    assert!((var - 1.0).abs() < 1e-4);
                }
            }
        }
    }
}
