//! Forward kernels.
//!
//! Reductions always run in a fixed order. Parallel loops split the output
//! into disjoint planes and never share an accumulator, so results are the
//! same for any thread count.

use rayon::prelude::*;

use super::{check_dims, Activation, ConvSpec, Tensor};
use crate::error::{config_err, Result};

/// Largest `f32` strictly below one.
const ONE_MINUS_ULP: f32 = 1.0 - f32::EPSILON / 2.0;

/// Direct 2-D cross-correlation.
///
/// Each output element accumulates `x * w` over input channel, kernel row
/// and kernel column in that order, starting from zero; the bias is added
/// last.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let [n, c_in, h, w] = input.dims();
    if c_in != spec.in_channels {
        return Err(config_err(format!(
            "conv2d: input has {c_in} channels, spec expects in_channels {}",
            spec.in_channels
        )));
    }
    if weight.dims() != spec.weight_dims() {
        return Err(config_err(format!(
            "conv2d: weight dims {:?} do not match spec {:?}",
            weight.dims(),
            spec.weight_dims()
        )));
    }
    let bias = match (bias, spec.bias) {
        (Some(b), _) => Some(b.as_vector(spec.out_channels, "conv2d bias")?),
        (None, true) => return Err(config_err("conv2d: spec has a bias but none was given")),
        (None, false) => None,
    };
    let (oh, ow) = spec.output_size(h, w)?;
    let c_out = spec.out_channels;
    let cpg_in = c_in / spec.groups;
    let cpg_out = c_out / spec.groups;
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding as isize);
    let x = input.data();
    let wt = weight.data();

    let mut out = vec![0.0f32; n * c_out * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, dst)| {
            let i = plane / c_out;
            let oc = plane % c_out;
            let g = oc / cpg_out;
            for icg in 0..cpg_in {
                let ic = g * cpg_in + icg;
                let src = &x[(i * c_in + ic) * h * w..][..h * w];
                let wbase = (oc * cpg_in + icg) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[wbase + ky * kw + kx];
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..][..w];
                            let drow = &mut dst[oy * ow..][..ow];
                            if s == 1 {
                                // contiguous fast path: ix = ox + kx - p
                                let shift = kx as isize - p;
                                let lo = (-shift).max(0) as usize;
                                let hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                                if lo < hi {
                                    let srow = &row[(lo as isize + shift) as usize..][..hi - lo];
                                    for (d, &v) in drow[lo..hi].iter_mut().zip(srow) {
                                        *d += v * wv;
                                    }
                                }
                            } else {
                                for (ox, d) in drow.iter_mut().enumerate() {
                                    let ix = (ox * s) as isize + kx as isize - p;
                                    if ix >= 0 && ix < w as isize {
                                        *d += row[ix as usize] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                for d in dst.iter_mut() {
                    *d += b[oc];
                }
            }
        });
    Ok(Tensor::from_parts([n, c_out, oh, ow], out))
}

/// Per-channel statistics for inference-mode batch normalization.
#[derive(Debug, Clone, Copy)]
pub struct BnStats<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub mean: &'a Tensor,
    pub var: &'a Tensor,
}

pub(crate) struct BnVectors<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub mean: &'a [f32],
    pub var: &'a [f32],
}

pub(crate) fn bn_vectors<'a>(c: usize, stats: &BnStats<'a>, eps: f32) -> Result<BnVectors<'a>> {
    if !(eps > 0.0) {
        return Err(config_err(format!("batchnorm eps must be > 0, got {eps}")));
    }
    Ok(BnVectors {
        gamma: stats.gamma.as_vector(c, "batchnorm gamma")?,
        beta: stats.beta.as_vector(c, "batchnorm beta")?,
        mean: stats.mean.as_vector(c, "batchnorm mean")?,
        var: stats.var.as_vector(c, "batchnorm var")?,
    })
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm_infer(input: &Tensor, stats: BnStats<'_>, eps: f32) -> Result<Tensor> {
    let [n, c, h, w] = input.dims();
    let v = bn_vectors(c, &stats, eps)?;
    let hw = h * w;
    let mut out = input.data().to_vec();
    for i in 0..n {
        for j in 0..c {
            let inv = 1.0 / (v.var[j] + eps).sqrt();
            for y in &mut out[(i * c + j) * hw..][..hw] {
                *y = v.gamma[j] * (*y - v.mean[j]) * inv + v.beta[j];
            }
        }
    }
    Ok(Tensor::from_parts(input.dims(), out))
}

pub fn relu_scalar(x: f32) -> f32 {
    x.max(0.0)
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// in `f32`.
pub fn sigmoid_scalar(x: f32) -> f32 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f32::MIN_POSITIVE, ONE_MINUS_ULP)
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(relu_scalar),
        Activation::Sigmoid => input.map(sigmoid_scalar),
    }
}

/// Half-open `[start, end)` source range pooled into output cell `i`.
pub fn adaptive_window(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = i * src / dst;
    let end = ((i + 1) * src).div_ceil(dst);
    (start, end)
}

/// Adaptive average pooling down to `target`.
pub fn avgpool_to(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let [n, c, h, w] = input.dims();
    let (th, tw) = target;
    check_dims([1, 1, th, tw])?;
    if th > h || tw > w {
        return Err(config_err(format!(
            "avgpool_to: target {th}x{tw} is larger than input {h}x{w}; upsample with bilinear_resize"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(input.clone());
    }
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in 0..n * c {
        let p = &src[plane * h * w..][..h * w];
        for oy in 0..th {
            let (y0, y1) = adaptive_window(oy, h, th);
            for ox in 0..tw {
                let (x0, x1) = adaptive_window(ox, w, tw);
                let mut acc = 0.0f32;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += p[y * w + x];
                    }
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f32);
            }
        }
    }
    Ok(Tensor::from_parts([n, c, th, tw], out))
}

/// Source taps for one output coordinate of a half-pixel bilinear resize:
/// `(low index, high index, weight of high index)`.
pub fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f32 / dst_len as f32;
    let coord = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f32);
    let lo = coord.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, coord - lo as f32)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let [n, c, h, w] = input.dims();
    let (th, tw) = target;
    check_dims([1, 1, th, tw])?;
    if (th, tw) == (h, w) {
        return Ok(input.clone());
    }
    let ytaps: Vec<_> = (0..th).map(|y| bilinear_taps(y, h, th)).collect();
    let xtaps: Vec<_> = (0..tw).map(|x| bilinear_taps(x, w, tw)).collect();
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in 0..n * c {
        let p = &src[plane * h * w..][..h * w];
        for &(y0, y1, ly) in &ytaps {
            for &(x0, x1, lx) in &xtaps {
                let top = (1.0 - lx) * p[y0 * w + x0] + lx * p[y0 * w + x1];
                let bottom = (1.0 - lx) * p[y1 * w + x0] + lx * p[y1 * w + x1];
                out.push((1.0 - ly) * top + ly * bottom);
            }
        }
    }
    Ok(Tensor::from_parts([n, c, th, tw], out))
}

/// Resizes with average pooling when shrinking and bilinear interpolation
/// when growing. Both axes must move in the same direction.
pub fn resize_to(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    match resize_kind(input.spatial(), target)? {
        ResizeKind::Identity => Ok(input.clone()),
        ResizeKind::Pool => avgpool_to(input, target),
        ResizeKind::Bilinear => bilinear_resize(input, target),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeKind {
    Identity,
    Pool,
    Bilinear,
}

pub fn resize_kind(from: (usize, usize), to: (usize, usize)) -> Result<ResizeKind> {
    if from == to {
        Ok(ResizeKind::Identity)
    } else if to.0 <= from.0 && to.1 <= from.1 {
        Ok(ResizeKind::Pool)
    } else if to.0 >= from.0 && to.1 >= from.1 {
        Ok(ResizeKind::Bilinear)
    } else {
        Err(config_err(format!(
            "cannot resize {}x{} to {}x{}: axes scale in opposite directions",
            from.0, from.1, to.0, to.1
        )))
    }
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| config_err("concat_channels: no inputs"))?;
    let [n, _, h, w] = first.dims();
    for (k, t) in inputs.iter().enumerate() {
        let [tn, _, th, tw] = t.dims();
        if (tn, th, tw) != (n, h, w) {
            return Err(config_err(format!(
                "concat_channels: input {k} has dims {:?}, expected batch {n} and spatial {h}x{w}",
                t.dims()
            )));
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.c()).sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c_total * hw);
    for i in 0..n {
        for t in inputs {
            out.extend_from_slice(&t.data()[i * t.c() * hw..][..t.c() * hw]);
        }
    }
    Ok(Tensor::from_parts([n, c_total, h, w], out))
}

pub fn split_channels(input: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = input.dims();
    let total: usize = sizes.iter().sum();
    if total != c || sizes.iter().any(|&s| s == 0) {
        return Err(config_err(format!(
            "split_channels: sizes {sizes:?} (sum {total}) must be positive and sum to {c} channels"
        )));
    }
    let hw = h * w;
    let mut offset = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let mut data = Vec::with_capacity(n * s * hw);
        for i in 0..n {
            data.extend_from_slice(&input.data()[(i * c + offset) * hw..][..s * hw]);
        }
        parts.push(Tensor::from_parts([n, s, h, w], data));
        offset += s;
    }
    Ok(parts)
}

/// Batched matrix product over the leading `(n, c)` axes:
/// `(n, c, m, k) x (n, c, k, p) -> (n, c, m, p)`.
pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [an, ac, m, k] = a.dims();
    let [bn, bc, bk, p] = b.dims();
    if (an, ac) != (bn, bc) || k != bk {
        return Err(config_err(format!(
            "matmul_batched: cannot multiply {:?} by {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![0.0f32; an * ac * m * p];
    out.par_chunks_mut(m * p)
        .enumerate()
        .for_each(|(batch, dst)| {
            let am = &a.data()[batch * m * k..][..m * k];
            let bm = &b.data()[batch * k * p..][..k * p];
            for i in 0..m {
                let drow = &mut dst[i * p..][..p];
                for kk in 0..k {
                    let av = am[i * k + kk];
                    for (d, &bv) in drow.iter_mut().zip(&bm[kk * p..][..p]) {
                        *d += av * bv;
                    }
                }
            }
        });
    Ok(Tensor::from_parts([an, ac, m, p], out))
}

/// Swaps the last two axes: `(n, c, h, w) -> (n, c, w, h)`.
pub fn transpose_last2(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.dims();
    let src = input.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in 0..n * c {
        let p = &src[plane * h * w..][..h * w];
        for x in 0..w {
            for y in 0..h {
                out.push(p[y * w + x]);
            }
        }
    }
    Tensor::from_parts([n, c, w, h], out)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim(input: &Tensor) -> Tensor {
    let w = input.w();
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(w) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(input.dims(), out)
}

fn zip_same(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(config_err(format!(
            "{what}: dims {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_parts(a.dims(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "mul", |x, y| x * y)
}

pub fn scale(input: &Tensor, factor: f32) -> Tensor {
    input.map(|v| v * factor)
}

pub fn abs(input: &Tensor) -> Tensor {
    input.map(f32::abs)
}

/// Elementwise binary cross-entropy on logits:
/// `max(x, 0) - x * t + ln(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    zip_same(logits, target, "bce_with_logits", |x, t| {
        x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
    })
}

/// Sum of all elements as a `(1, 1, 1, 1)` tensor.
pub fn sum_all(input: &Tensor) -> Tensor {
    Tensor::scalar(input.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_conv_and_sum_of_ones() {
        let x = Tensor::full([1, 1, 3, 3], 2.0);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::new(1, 1, 1)).unwrap();
        assert!(y.bit_eq(&x));

        let ones = Tensor::full([1, 1, 3, 3], 1.0);
        let k = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&ones, &k, None, &ConvSpec::new(1, 1, 3)).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_errors_name_the_dim() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 1, 1]);
        let err = conv2d(&x, &w, None, &ConvSpec::new(3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        let w = Tensor::zeros([1, 2, 3, 3]);
        let err = conv2d(&x, &w, None, &ConvSpec::new(2, 1, 3).stride(2)).unwrap_err();
        assert!(err.to_string().contains("not integral"), "{err}");
    }

    #[test]
    fn batchnorm_identity_and_zero_scale() {
        let x = Tensor::from_fn([1, 2, 2, 2], |_, j, y, x| {
            j as f32 - y as f32 + 0.5 * x as f32
        });
        let one = Tensor::vector(vec![1.0; 2]);
        let zero = Tensor::vector(vec![0.0; 2]);
        let y = batchnorm_infer(
            &x,
            BnStats {
                gamma: &one,
                beta: &zero,
                mean: &zero,
                var: &one,
            },
            1e-5,
        )
        .unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-6) + 1e-6);
        }
        let beta = Tensor::vector(vec![3.0, -1.0]);
        let y = batchnorm_infer(
            &x,
            BnStats {
                gamma: &zero,
                beta: &beta,
                mean: &zero,
                var: &one,
            },
            1e-5,
        )
        .unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 3.0));
        assert!(y.data()[4..].iter().all(|&v| v == -1.0));
        let short = Tensor::vector(vec![1.0]);
        assert!(batchnorm_infer(
            &x,
            BnStats {
                gamma: &short,
                beta: &zero,
                mean: &zero,
                var: &one
            },
            1e-5
        )
        .is_err());
    }

    #[test]
    fn activations() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        for v in [-20.0f32, 20.0, -200.0, 200.0] {
            let s = sigmoid_scalar(v);
            assert!(s > 0.0 && s < 1.0, "sigmoid({v}) = {s}");
        }
        let oracle = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((sigmoid_scalar(20.0) as f64 - oracle(20.0)).abs() <= 1e-7);
        assert!((sigmoid_scalar(-20.0) as f64 - oracle(-20.0)).abs() <= 1e-7);
        assert!(sigmoid_scalar(-20.0) < sigmoid_scalar(20.0));
    }

    #[test]
    fn avgpool_cases() {
        let ones = Tensor::full([1, 1, 4, 4], 1.0);
        assert!(avgpool_to(&ones, (2, 2))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool_to(&x, (1, 1)).unwrap().data(), &[2.5]);
        assert!(avgpool_to(&x, (2, 2)).unwrap().bit_eq(&x));
        assert!(avgpool_to(&x, (3, 2)).is_err());
    }

    #[test]
    fn adaptive_windows_cover_input() {
        // 5 -> 3: [0,2), [1,4), [3,5)
        assert_eq!(adaptive_window(0, 5, 3), (0, 2));
        assert_eq!(adaptive_window(1, 5, 3), (1, 4));
        assert_eq!(adaptive_window(2, 5, 3), (3, 5));
    }

    #[test]
    fn bilinear_cases() {
        let x = Tensor::full([1, 1, 1, 1], 5.0);
        let y = bilinear_resize(&x, (2, 2)).unwrap();
        assert_eq!(y.data(), &[5.0; 4]);
        let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(bilinear_resize(&x, (2, 2)).unwrap().bit_eq(&x));
        let y = bilinear_resize(&x, (4, 4)).unwrap();
        // first row: coords -0.25 -> 0, 0.25, 0.75, 1.25 -> 1
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::full([1, 2, 2, 2], 1.0);
        let b = Tensor::full([1, 2, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.dims(), [1, 4, 2, 2]);
        assert!(y.data()[..8].iter().all(|&v| v == 1.0));
        assert!(concat_channels(&[&a]).unwrap().bit_eq(&a));
        assert!(concat_channels(&[&a, &Tensor::zeros([1, 1, 3, 2])]).is_err());

        let x = Tensor::from_fn([1, 96, 4, 4], |_, j, y, x| (j * 16 + y * 4 + x) as f32);
        let parts = split_channels(&x, &[32, 64]).unwrap();
        assert_eq!(parts[0].dims(), [1, 32, 4, 4]);
        assert_eq!(parts[1].dims(), [1, 64, 4, 4]);
        assert!(split_channels(&x, &[96]).unwrap()[0].bit_eq(&x));
        let err = split_channels(&x, &[32, 32]).unwrap_err();
        assert!(err.to_string().contains("sum 64") && err.to_string().contains("96"));
    }

    #[test]
    fn matmul_small_cases() {
        let id = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matmul_batched(&id, &m).unwrap().bit_eq(&m));
        let a = Tensor::scalar(3.0);
        let b = Tensor::scalar(-2.0);
        assert_eq!(matmul_batched(&a, &b).unwrap().data(), &[-6.0]);
        assert!(matmul_batched(&m, &Tensor::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_lastdim(&Tensor::scalar(7.0)).data(), &[1.0]);
        assert_eq!(
            softmax_lastdim(&Tensor::vector(vec![0.0, 0.0])).data(),
            &[0.5, 0.5]
        );
        let s = softmax_lastdim(&Tensor::vector(vec![1000.0, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn resize_direction() {
        assert_eq!(resize_kind((4, 4), (4, 4)).unwrap(), ResizeKind::Identity);
        assert_eq!(resize_kind((4, 4), (2, 2)).unwrap(), ResizeKind::Pool);
        assert_eq!(resize_kind((2, 2), (4, 4)).unwrap(), ResizeKind::Bilinear);
        assert!(resize_kind((2, 4), (4, 2)).is_err());
    }
}
