//! Forward and backward kernels on raw tensors. The tape calls into these;
//! they hold no graph state of their own.

use super::float::{matmul, matmul_new};
use super::{check_same_shape, Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects rank-4 input and weight, got {input:?} and {weight:?}"
            )));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wcin, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input channels differ: input {input:?} vs weight {weight:?}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d needs a square kernel, got {weight:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {input:?} with padding {pad}"
            )));
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Output indices `o` in `0..out` whose input coordinate `o * stride + offset - pad`
/// falls inside `0..len`.
fn valid_range(out: usize, stride: usize, offset: usize, pad: usize, len: usize) -> (usize, usize) {
    // o * stride + offset >= pad  and  o * stride + offset < len + pad
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = if len + pad > offset {
        ((len + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds input patches into a `[cin*k*k, n*ho*wo]` matrix.
fn im2col<T: Float>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.patch() * g.positions()];
    let plane = g.h * g.w;
    let mut rows = cols.chunks_exact_mut(g.positions());
    for c in 0..g.cin {
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.stride, ki, g.pad, g.h);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.stride, kj, g.pad, g.w);
                let row = rows.next().expect("one row per patch element");
                let width = ox_hi.saturating_sub(ox_lo);
                if width == 0 {
                    continue;
                }
                for s in 0..g.n {
                    let src = &x[(s * g.cin + c) * plane..(s * g.cin + c + 1) * plane];
                    let dst = &mut row[s * hw_out..(s + 1) * hw_out];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let ix0 = ox_lo * g.stride + kj - g.pad;
                        let out = &mut dst[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        if g.stride == 1 {
                            out.copy_from_slice(&src[iy * g.w + ix0..iy * g.w + ix0 + width]);
                        } else {
                            let src_row = &src[iy * g.w + ix0..(iy + 1) * g.w];
                            for (d, &v) in out.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols_n = g.positions();
    let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
    let hw_out = g.ho * g.wo;
    let plane = g.h * g.w;
    for c in 0..g.cin {
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.stride, ki, g.pad, g.h);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.stride, kj, g.pad, g.w);
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for s in 0..g.n {
                    let dst = &mut x[(s * g.cin + c) * plane..(s * g.cin + c + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.pad;
                        let base = s * hw_out + oy * g.wo;
                        let ix0 = ox_lo * g.stride + kj - g.pad;
                        let dst_row = &mut dst[iy * g.w + ix0..(iy + 1) * g.w];
                        let sv = &src[base + ox_lo..base + ox_hi];
                        if g.stride == 1 {
                            for (d, &v) in dst_row.iter_mut().zip(sv) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst_row.iter_mut().step_by(g.stride).zip(sv) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[cout, n*p]` -> `[n, cout, p]`
fn channels_first_to_batch_first<T: Float>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut dst = Vec::with_capacity(src.len());
    for s in 0..n {
        for ch in 0..c {
            let from = ch * n * p + s * p;
            dst.extend_from_slice(&src[from..from + p]);
        }
    }
    dst
}

fn batch_first_to_channels_first<T: Float>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut dst = Vec::with_capacity(src.len());
    for ch in 0..c {
        for s in 0..n {
            let from = (s * c + ch) * p;
            dst.extend_from_slice(&src[from..from + p]);
        }
    }
    dst
}

/// Cross-correlation. Returns the output and the unfolded input, which the
/// backward pass reuses.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeometry)> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    if bias.numel() != g.cout {
        return Err(Error::shape(format!(
            "conv2d bias has {} elements, expected {}",
            bias.numel(),
            g.cout
        )));
    }
    let cols = im2col(x.data(), &g);
    let p = g.ho * g.wo;
    let np = g.positions();
    let mut out = vec![T::zero(); g.cout * np];
    for (co, row) in out.chunks_mut(np).enumerate() {
        row.iter_mut().for_each(|v| *v = bias.data()[co]);
    }
    matmul(g.cout, g.patch(), np, weight.data(), false, &cols, false, &mut out, true);
    let out = channels_first_to_batch_first(&out, g.n, g.cout, p);
    Ok((Tensor::new(&g.out_shape(), out)?, cols, g))
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Float>(
    g: &ConvGeometry,
    weight: &[T],
    cols: &[T],
    gout: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let p = g.ho * g.wo;
    let np = g.positions();
    let gy = batch_first_to_channels_first(gout, g.n, g.cout, p);
    let gw = matmul_new(g.cout, np, g.patch(), &gy, false, cols, true);
    let gb = gy.chunks(np).map(|row| row.iter().copied().sum()).collect();
    let gx = if need_input {
        let gcols = matmul_new(g.patch(), g.cout, np, weight, true, &gy, false);
        col2im(&gcols, g)
    } else {
        Vec::new()
    };
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Per-channel batch statistics of a `[N, C, H, W]` tensor.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, used for normalization.
    pub var: Vec<T>,
}

pub fn channel_stats<T: Float>(x: &Tensor<T>) -> BatchStats<T> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    BatchStats { mean, var }
}

/// Normalizes with the given per-channel statistics and applies the affine map.
/// Returns the output and the normalized values.
pub fn batchnorm_apply<T: Float>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for i in range {
                let z = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = z;
                out[i] = gamma[ch] * z + beta[ch];
            }
        }
    }
    (Tensor::new(s, out).expect("same shape"), xhat, inv_std)
}

pub struct BatchNormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward of train-mode batch normalization.
pub fn batchnorm_backward<T: Float>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    gout: &[T],
) -> BatchNormGrads<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::from_f64((n * hw) as f64);
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                gbeta[ch] += gout[i];
                ggamma[ch] += gout[i] * xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); gout.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch] / m;
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                gx[i] = scale * (m * gout[i] - gbeta[ch] - xhat[i] * ggamma[ch]);
            }
        }
    }
    BatchNormGrads {
        input: gx,
        gamma: ggamma,
        beta: gbeta,
    }
}

pub fn avg_pool_forward<T: Float>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("avg_pool expects rank-4 input, got {s:?}")));
    }
    if k == 0 || stride == 0 || k > s[2] || k > s[3] {
        return Err(Error::shape(format!(
            "avg_pool window {k} (stride {stride}) does not fit input {s:?}"
        )));
    }
    let (ho, wo) = ((s[2] - k) / stride + 1, (s[3] - k) / stride + 1);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut out = Vec::with_capacity(s[0] * s[1] * ho * wo);
    for plane in x.data().chunks(s[2] * s[3]) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        acc += plane[(oy * stride + i) * s[3] + ox * stride + j];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(&[s[0], s[1], ho, wo], out)
}

pub fn avg_pool_backward<T: Float>(
    in_shape: &[usize],
    k: usize,
    stride: usize,
    gout: &[T],
) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let planes = in_shape[0] * in_shape[1];
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gout[(p * ho + oy) * wo + ox] * inv;
                for i in 0..k {
                    for j in 0..k {
                        gx[p * h * w + (oy * stride + i) * w + ox * stride + j] += g;
                    }
                }
            }
        }
    }
    gx
}

/// `x[N,F] * w[F,K] + b[K]`
pub fn linear_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || b.numel() != ws[1] {
        return Err(Error::shape(format!(
            "fully_connected: input {xs:?}, weight {ws:?}, bias {:?} are incompatible",
            b.shape()
        )));
    }
    let (n, f, k) = (xs[0], xs[1], ws[1]);
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    matmul(n, f, k, x.data(), false, w.data(), false, &mut out, true);
    Tensor::new(&[n, k], out)
}

/// Row-wise softmax of a rank-2 tensor, max-subtracted.
pub fn softmax_rows<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

fn log_sum_exp<T: Float>(vals: impl Iterator<Item = T> + Clone) -> T {
    let max = vals.clone().fold(T::neg_infinity(), T::max);
    max + vals.map(|v| (v - max).exp()).sum::<T>().ln()
}

/// Mean negative log-probability of grouped classes: for each row the target
/// group's probability mass is the sum of softmax probabilities over the
/// classes mapped to it. With the identity grouping this is ordinary softmax
/// cross-entropy. Returns the loss and the softmax probabilities.
pub fn grouped_nll_forward<T: Float>(
    logits: &Tensor<T>,
    group_of: Option<&[usize]>,
    targets: &[usize],
    groups: usize,
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("cross-entropy expects [N, K] logits, got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    if targets.len() != n {
        return Err(Error::shape(format!("{} targets for batch of {n}", targets.len())));
    }
    if let Some(map) = group_of {
        if map.len() != k {
            return Err(Error::shape(format!("group map covers {} of {k} classes", map.len())));
        }
    }
    let mut total = T::zero();
    for (i, &target) in targets.iter().enumerate() {
        if target >= groups {
            return Err(Error::Index(format!(
                "target {target} at sample {i} outside [0, {groups})"
            )));
        }
        let row = logits.row(i);
        let all = log_sum_exp(row.iter().copied());
        let member = |j: &usize| group_of.map_or(*j == target, |m| m[*j] == target);
        let inside = log_sum_exp((0..k).filter(member).map(|j| row[j]));
        total += all - inside;
    }
    Ok((total / T::from_f64(n as f64), softmax_rows(logits)))
}

/// Gradient of [`grouped_nll_forward`] with respect to the logits.
pub fn grouped_nll_backward<T: Float>(
    probs: &Tensor<T>,
    group_of: Option<&[usize]>,
    targets: &[usize],
    upstream: T,
) -> Vec<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / T::from_f64(n as f64);
    let mut grad = vec![T::zero(); n * k];
    for (i, &target) in targets.iter().enumerate() {
        let p = probs.row(i);
        let member = |j: usize| group_of.map_or(j == target, |m| m[j] == target);
        let mass: T = (0..k).filter(|&j| member(j)).map(|j| p[j]).sum();
        for j in 0..k {
            let own = if member(j) { p[j] / mass } else { T::zero() };
            grad[i * k + j] = scale * (p[j] - own);
        }
    }
    grad
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

pub fn hadamard<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("hadamard", a.shape(), b.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let (y, _, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let x = t(&[2, 2, 4, 4], &(0..64).map(|v| v as f64 * 0.1).collect::<Vec<_>>());
        let w = Tensor::<f64>::zeros(&[3, 2, 3, 3]);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let (y, _, _) = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(i / 4) % 3]);
        }
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).is_err());
    }

    #[test]
    fn avg_pool_mean() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = avg_pool_forward(&x, 2, 1).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let c = Tensor::<f64>::full(&[2, 3, 4, 4], 1.75);
        let y = avg_pool_forward(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.75));
        assert!(avg_pool_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let y = linear_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
        let b = t(&[2], &[0.25, -4.0]);
        let y = linear_forward(&x, &Tensor::zeros(&[3, 2]), &b).unwrap();
        assert_eq!(y.data(), &[0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Tensor::<f64>::full(&[3, 5], 0.7);
        let (loss, _) = grouped_nll_forward(&logits, None, &[0, 2, 4], 5).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident() {
        let logits = t(&[1, 2], &[10.0, -10.0]);
        let (loss, _) = grouped_nll_forward(&logits, None, &[0], 2).unwrap();
        // -ln(sigmoid(20)) = ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 2.061e-9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            grouped_nll_forward(&logits, None, &[3], 3),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 2, 2], 3.0);
        let stats = channel_stats(&x);
        let (y, _, _) = batchnorm_apply(&x, &[2.0], &[0.4], &stats.mean, &stats.var, 1e-5);
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        let h = hadamard(&t(&[2], &[2.0, 3.0]), &t(&[2], &[4.0, 5.0])).unwrap();
        assert_eq!(h.data(), &[8.0, 15.0]);
        assert!(add(&t(&[2], &[1.0, 1.0]), &t(&[1, 2], &[1.0, 1.0])).is_err());
    }
}
