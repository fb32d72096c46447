//! Vector-Jacobian products for the forward kernels.
//!
//! Forward values stay `f32`; gradients flowing backwards are held in `f64`
//! [`Grad`] buffers and rounded once when handed out. Structurally zero
//! gradients (a per-channel shift of attention keys, say) then come out at
//! `f64` round-off instead of `f32` round-off.

use rayon::prelude::*;

use super::ops::{adaptive_window, bilinear_taps, bn_vectors, BnStats};
use super::{numel, ConvSpec, Dims, Tensor};
use crate::error::{config_err, Result};

/// Gradient buffer, NCHW like [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    dims: Dims,
    data: Vec<f64>,
}

impl Grad {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; numel(dims)],
        }
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; numel(dims)],
        }
    }

    pub fn from_parts(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(dims), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.dims, self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn reshape(&self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(config_err(format!(
                "cannot reshape gradient {:?} to {dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `f(g, x)` against a forward value of the same shape.
    pub fn zip_value(&self, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if x.dims() != self.dims {
            return Err(config_err(format!(
                "gradient {:?} against value {:?}",
                self.dims,
                x.dims()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| f(g, v as f64))
            .collect();
        Ok(Self {
            dims: self.dims,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Grad) -> Result<()> {
        if self.dims != other.dims {
            return Err(crate::error::Error::State(format!(
                "gradient shape mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Grad> {
        let [n, c, h, w] = self.dims;
        let hw = h * w;
        let mut offset = 0;
        sizes
            .iter()
            .map(|&len| {
                let mut data = Vec::with_capacity(n * len * hw);
                for i in 0..n {
                    data.extend_from_slice(&self.data[(i * c + offset) * hw..][..len * hw]);
                }
                offset += len;
                Grad::from_parts([n, len, h, w], data)
            })
            .collect()
    }

    /// Places `self` as channels `[offset, offset + c)` of a zero gradient
    /// shaped `dims`.
    pub fn embed_channels(&self, dims: Dims, offset: usize) -> Grad {
        let [n, c, h, w] = dims;
        let len = self.c();
        let hw = h * w;
        let mut full = vec![0.0; numel(dims)];
        for i in 0..n {
            full[(i * c + offset) * hw..][..len * hw]
                .copy_from_slice(&self.data[i * len * hw..][..len * hw]);
        }
        Grad::from_parts(dims, full)
    }

    pub fn transpose_last2(&self) -> Grad {
        let [n, c, h, w] = self.dims;
        let mut out = Vec::with_capacity(self.data.len());
        for plane in 0..n * c {
            let p = &self.data[plane * h * w..][..h * w];
            for x in 0..w {
                for y in 0..h {
                    out.push(p[y * w + x]);
                }
            }
        }
        Grad::from_parts([n, c, w, h], out)
    }
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input(
    grad_out: &Grad,
    weight: &Tensor,
    spec: &ConvSpec,
    input_dims: Dims,
) -> Grad {
    let [n, c_in, h, w] = input_dims;
    let [_, c_out, oh, ow] = grad_out.dims();
    let cpg_in = c_in / spec.groups;
    let cpg_out = c_out / spec.groups;
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding as isize);
    let g = grad_out.data();
    let wt = weight.data();

    let mut out = vec![0.0f64; n * c_in * h * w];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let i = plane / c_in;
            let ic = plane % c_in;
            let grp = ic / cpg_in;
            let icg = ic % cpg_in;
            for ocg in 0..cpg_out {
                let oc = grp * cpg_out + ocg;
                let gp = &g[(i * c_out + oc) * oh * ow..][..oh * ow];
                let wbase = (oc * cpg_in + icg) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[wbase + ky * kw + kx] as f64;
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let drow = &mut dst[iy as usize * w..][..w];
                            for ox in 0..ow {
                                let ix = (ox * s) as isize + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    drow[ix as usize] += gp[oy * ow + ox] * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Grad::from_parts(input_dims, out)
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_grad_weight(grad_out: &Grad, input: &Tensor, spec: &ConvSpec) -> Grad {
    let [n, c_in, h, w] = input.dims();
    let [_, c_out, oh, ow] = grad_out.dims();
    let cpg_in = c_in / spec.groups;
    let cpg_out = c_out / spec.groups;
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride, spec.padding as isize);
    let g = grad_out.data();
    let x = input.data();

    let mut out = vec![0.0f64; c_out * cpg_in * kh * kw];
    out.par_chunks_mut(cpg_in * kh * kw)
        .enumerate()
        .for_each(|(oc, dst)| {
            let grp = oc / cpg_out;
            for icg in 0..cpg_in {
                let ic = grp * cpg_in + icg;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f64;
                        for i in 0..n {
                            let gp = &g[(i * c_out + oc) * oh * ow..][..oh * ow];
                            let xp = &x[(i * c_in + ic) * h * w..][..h * w];
                            for oy in 0..oh {
                                let iy = (oy * s) as isize + ky as isize - p;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * s) as isize + kx as isize - p;
                                    if ix >= 0 && ix < w as isize {
                                        acc += gp[oy * ow + ox]
                                            * xp[iy as usize * w + ix as usize] as f64;
                                    }
                                }
                            }
                        }
                        dst[(icg * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });
    Grad::from_parts(spec.weight_dims(), out)
}

/// Per-channel sum over batch and spatial axes, as a `(1, 1, 1, c)` vector.
pub fn channel_sum(t: &Grad) -> Grad {
    let [n, c, h, w] = t.dims();
    let hw = h * w;
    let mut out = vec![0.0f64; c];
    for i in 0..n {
        for (j, acc) in out.iter_mut().enumerate() {
            *acc += t.data()[(i * c + j) * hw..][..hw].iter().sum::<f64>();
        }
    }
    Grad::from_parts([1, 1, 1, c], out)
}

pub struct BnGrads {
    pub input: Grad,
    pub gamma: Grad,
    pub beta: Grad,
    pub mean: Grad,
    pub var: Grad,
}

/// Gradients of inference-mode batchnorm with respect to the input and all
/// four per-channel vectors.
pub fn batchnorm_grad(
    grad_out: &Grad,
    input: &Tensor,
    stats: BnStats<'_>,
    eps: f32,
) -> Result<BnGrads> {
    let [n, c, h, w] = input.dims();
    let v = bn_vectors(c, &stats, eps)?;
    let hw = h * w;
    let g = grad_out.data();
    let x = input.data();
    let mut dx = vec![0.0f64; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dmean = vec![0.0f64; c];
    let mut dvar = vec![0.0f64; c];
    for j in 0..c {
        let gamma = v.gamma[j] as f64;
        let mean = v.mean[j] as f64;
        let inv = 1.0 / (v.var[j] as f64 + eps as f64).sqrt();
        let mut sum_g = 0.0f64;
        let mut sum_gxc = 0.0f64;
        for i in 0..n {
            let base = (i * c + j) * hw;
            for k in base..base + hw {
                let xc = x[k] as f64 - mean;
                dx[k] = g[k] * gamma * inv;
                sum_g += g[k];
                sum_gxc += g[k] * xc;
            }
        }
        dgamma[j] = sum_gxc * inv;
        dbeta[j] = sum_g;
        dmean[j] = -gamma * inv * sum_g;
        dvar[j] = -0.5 * gamma * sum_gxc * inv * inv * inv;
    }
    Ok(BnGrads {
        input: Grad::from_parts(input.dims(), dx),
        gamma: Grad::from_parts(stats.gamma.dims(), dgamma),
        beta: Grad::from_parts(stats.beta.dims(), dbeta),
        mean: Grad::from_parts(stats.mean.dims(), dmean),
        var: Grad::from_parts(stats.var.dims(), dvar),
    })
}

/// Scatters pooled gradients back over each cell's window.
pub fn avgpool_grad(grad_out: &Grad, input_dims: Dims) -> Grad {
    let [n, c, h, w] = input_dims;
    let [_, _, th, tw] = grad_out.dims();
    if (th, tw) == (h, w) {
        return grad_out.clone();
    }
    let g = grad_out.data();
    let mut out = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut out[plane * h * w..][..h * w];
        let gp = &g[plane * th * tw..][..th * tw];
        for oy in 0..th {
            let (y0, y1) = adaptive_window(oy, h, th);
            for ox in 0..tw {
                let (x0, x1) = adaptive_window(ox, w, tw);
                let share = gp[oy * tw + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        dst[y * w + x] += share;
                    }
                }
            }
        }
    }
    Grad::from_parts(input_dims, out)
}

/// Scatters resized gradients back onto the four source taps.
pub fn bilinear_grad(grad_out: &Grad, input_dims: Dims) -> Grad {
    let [n, c, h, w] = input_dims;
    let [_, _, th, tw] = grad_out.dims();
    if (th, tw) == (h, w) {
        return grad_out.clone();
    }
    let ytaps: Vec<_> = (0..th).map(|y| bilinear_taps(y, h, th)).collect();
    let xtaps: Vec<_> = (0..tw).map(|x| bilinear_taps(x, w, tw)).collect();
    let g = grad_out.data();
    let mut out = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut out[plane * h * w..][..h * w];
        let gp = &g[plane * th * tw..][..th * tw];
        for (oy, &(y0, y1, ly)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xtaps.iter().enumerate() {
                let (ly, lx) = (ly as f64, lx as f64);
                let gv = gp[oy * tw + ox];
                let top = (1.0 - ly) * gv;
                let bottom = ly * gv;
                dst[y0 * w + x0] += (1.0 - lx) * top;
                dst[y0 * w + x1] += lx * top;
                dst[y1 * w + x0] += (1.0 - lx) * bottom;
                dst[y1 * w + x1] += lx * bottom;
            }
        }
    }
    Grad::from_parts(input_dims, out)
}

/// `dx = y * (g - sum(g * y))` per last-axis row.
///
/// The dot product is divided by the stored row sum, so each row of `dx`
/// sums to zero even though the `f32` probabilities do not sum to exactly
/// one.
pub fn softmax_grad(grad_out: &Grad, output: &Tensor) -> Grad {
    let w = output.w();
    let mut dx = vec![0.0f64; output.numel()];
    for ((d, g), y) in dx
        .chunks_mut(w)
        .zip(grad_out.data().chunks(w))
        .zip(output.data().chunks(w))
    {
        let total: f64 = y.iter().map(|&v| v as f64).sum();
        let dot = g.iter().zip(y).map(|(&a, &b)| a * b as f64).sum::<f64>() / total;
        for k in 0..w {
            d[k] = y[k] as f64 * (g[k] - dot);
        }
    }
    Grad::from_parts(output.dims(), dx)
}

/// Gradients of `a x b` given the output gradient: `(g bᵀ, aᵀ g)`.
pub fn matmul_grad(grad_out: &Grad, a: &Tensor, b: &Tensor) -> (Grad, Grad) {
    let [n, c, m, k] = a.dims();
    let p = b.w();
    let g = grad_out.data();
    let mut da = vec![0.0f64; a.numel()];
    let mut db = vec![0.0f64; b.numel()];
    for batch in 0..n * c {
        let am = &a.data()[batch * m * k..][..m * k];
        let bm = &b.data()[batch * k * p..][..k * p];
        let gm = &g[batch * m * p..][..m * p];
        let dam = &mut da[batch * m * k..][..m * k];
        let dbm = &mut db[batch * k * p..][..k * p];
        for i in 0..m {
            for kk in 0..k {
                let mut acc = 0.0f64;
                for j in 0..p {
                    acc += gm[i * p + j] * bm[kk * p + j] as f64;
                }
                dam[i * k + kk] = acc;
            }
        }
        for kk in 0..k {
            for j in 0..p {
                let mut acc = 0.0f64;
                for i in 0..m {
                    acc += am[i * k + kk] as f64 * gm[i * p + j];
                }
                dbm[kk * p + j] = acc;
            }
        }
    }
    (
        Grad::from_parts(a.dims(), da),
        Grad::from_parts(b.dims(), db),
    )
}
