//! Naive-loop reference implementations of every kernel, generic over the
//! float type.
//!
//! These are deliberately written as the textbook loops and share no code
//! with the optimized kernels. Instantiated at `f32` they are the oracles the
//! kernel tests compare against; at `f64` they back the finite-difference
//! gradient check through [`ReferenceExec`].

use num_traits::Float;

use crate::autodiff::{sign_class, Exec};
use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Activation, ConvSpec, Dims, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RefTensor<T> {
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Float> RefTensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![T::zero(); numel(dims)],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            dims: t.dims(),
            data: t.data().iter().map(|&v| T::from(v).unwrap()).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.dims,
            self.data.iter().map(|v| v.to_f32().unwrap()).collect(),
        )
        .unwrap()
    }

    fn idx(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let [_, c, h, w] = self.dims;
        ((i * c + j) * h + y) * w + x
    }

    pub fn get(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.idx(i, j, y, x)]
    }

    fn set(&mut self, i: usize, j: usize, y: usize, x: usize, v: T) {
        let k = self.idx(i, j, y, x);
        self.data[k] = v;
    }
}

fn c<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

pub fn conv2d<T: Float>(
    x: &RefTensor<T>,
    w: &RefTensor<T>,
    b: Option<&RefTensor<T>>,
    spec: &ConvSpec,
) -> Result<RefTensor<T>> {
    spec.validate()?;
    let [n, cin, h, wd] = x.dims;
    if cin != spec.in_channels || w.dims != spec.weight_dims() {
        return Err(config_err("reference conv2d: shape mismatch"));
    }
    let (oh, ow) = spec.output_size(h, wd)?;
    let cout = spec.out_channels;
    let cpg_in = cin / spec.groups;
    let cpg_out = cout / spec.groups;
    let (kh, kw) = spec.kernel;
    let mut out = RefTensor::zeros([n, cout, oh, ow]);
    for i in 0..n {
        for oc in 0..cout {
            let g = oc / cpg_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for icg in 0..cpg_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + x.get(i, g * cpg_in + icg, iy as usize, ix as usize)
                                        * w.get(oc, icg, ky, kx);
                            }
                        }
                    }
                    if let Some(b) = b {
                        acc = acc + b.data[oc];
                    }
                    out.set(i, oc, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn batchnorm<T: Float>(
    x: &RefTensor<T>,
    s: [&RefTensor<T>; 4],
    eps: f32,
) -> Result<RefTensor<T>> {
    let [n, ch, h, w] = x.dims;
    if s.iter().any(|v| v.data.len() != ch) {
        return Err(config_err("reference batchnorm: stat length mismatch"));
    }
    let eps = T::from(eps).unwrap();
    let mut out = RefTensor::zeros(x.dims);
    for i in 0..n {
        for j in 0..ch {
            let (gamma, beta, mean, var) = (s[0].data[j], s[1].data[j], s[2].data[j], s[3].data[j]);
            let inv = T::one() / (var + eps).sqrt();
            for y in 0..h {
                for xx in 0..w {
                    out.set(
                        i,
                        j,
                        y,
                        xx,
                        gamma * (x.get(i, j, y, xx) - mean) * inv + beta,
                    );
                }
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Float>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn avgpool_to<T: Float>(x: &RefTensor<T>, th: usize, tw: usize) -> Result<RefTensor<T>> {
    let [n, ch, h, w] = x.dims;
    if th > h || tw > w || th == 0 || tw == 0 {
        return Err(config_err("reference avgpool: bad target"));
    }
    let mut out = RefTensor::zeros([n, ch, th, tw]);
    for i in 0..n {
        for j in 0..ch {
            for oy in 0..th {
                let y0 = (oy * h) / th;
                let y1 = ((oy + 1) * h + th - 1) / th;
                for ox in 0..tw {
                    let x0 = (ox * w) / tw;
                    let x1 = ((ox + 1) * w + tw - 1) / tw;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + x.get(i, j, y, xx);
                        }
                    }
                    out.set(i, j, oy, ox, acc / T::from((y1 - y0) * (x1 - x0)).unwrap());
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear<T: Float>(x: &RefTensor<T>, th: usize, tw: usize) -> RefTensor<T> {
    let [n, ch, h, w] = x.dims;
    let mut out = RefTensor::zeros([n, ch, th, tw]);
    let half = c::<T>(0.5);
    let sy = T::from(h).unwrap() / T::from(th).unwrap();
    let sx = T::from(w).unwrap() / T::from(tw).unwrap();
    for i in 0..n {
        for j in 0..ch {
            for oy in 0..th {
                let fy = ((T::from(oy).unwrap() + half) * sy - half)
                    .max(T::zero())
                    .min(T::from(h - 1).unwrap());
                let y0 = fy.floor().to_usize().unwrap();
                let y1 = (y0 + 1).min(h - 1);
                let ly = fy - T::from(y0).unwrap();
                for ox in 0..tw {
                    let fx = ((T::from(ox).unwrap() + half) * sx - half)
                        .max(T::zero())
                        .min(T::from(w - 1).unwrap());
                    let x0 = fx.floor().to_usize().unwrap();
                    let x1 = (x0 + 1).min(w - 1);
                    let lx = fx - T::from(x0).unwrap();
                    let top = (T::one() - lx) * x.get(i, j, y0, x0) + lx * x.get(i, j, y0, x1);
                    let bottom = (T::one() - lx) * x.get(i, j, y1, x0) + lx * x.get(i, j, y1, x1);
                    out.set(i, j, oy, ox, (T::one() - ly) * top + ly * bottom);
                }
            }
        }
    }
    out
}

pub fn concat<T: Float>(xs: &[RefTensor<T>]) -> Result<RefTensor<T>> {
    let [n, _, h, w] = xs
        .first()
        .ok_or_else(|| config_err("reference concat: empty"))?
        .dims;
    let total: usize = xs.iter().map(|t| t.dims[1]).sum();
    let mut out = RefTensor::zeros([n, total, h, w]);
    let mut base = 0;
    for t in xs {
        if t.dims[0] != n || t.dims[2] != h || t.dims[3] != w {
            return Err(config_err("reference concat: mismatch"));
        }
        for i in 0..n {
            for j in 0..t.dims[1] {
                for y in 0..h {
                    for x in 0..w {
                        out.set(i, base + j, y, x, t.get(i, j, y, x));
                    }
                }
            }
        }
        base += t.dims[1];
    }
    Ok(out)
}

pub fn split<T: Float>(x: &RefTensor<T>, sizes: &[usize]) -> Result<Vec<RefTensor<T>>> {
    let [n, ch, h, w] = x.dims;
    if sizes.iter().sum::<usize>() != ch {
        return Err(config_err("reference split: bad sizes"));
    }
    let mut base = 0;
    let mut out = Vec::new();
    for &s in sizes {
        let mut t = RefTensor::zeros([n, s, h, w]);
        for i in 0..n {
            for j in 0..s {
                for y in 0..h {
                    for xx in 0..w {
                        t.set(i, j, y, xx, x.get(i, base + j, y, xx));
                    }
                }
            }
        }
        base += s;
        out.push(t);
    }
    Ok(out)
}

pub fn matmul<T: Float>(a: &RefTensor<T>, b: &RefTensor<T>) -> Result<RefTensor<T>> {
    let [n, ch, m, k] = a.dims;
    let [bn, bc, bk, p] = b.dims;
    if (n, ch, k) != (bn, bc, bk) {
        return Err(config_err("reference matmul: mismatch"));
    }
    let mut out = RefTensor::zeros([n, ch, m, p]);
    for i in 0..n {
        for j in 0..ch {
            for r in 0..m {
                for col in 0..p {
                    let mut acc = T::zero();
                    for kk in 0..k {
                        acc = acc + a.get(i, j, r, kk) * b.get(i, j, kk, col);
                    }
                    out.set(i, j, r, col, acc);
                }
            }
        }
    }
    Ok(out)
}

pub fn transpose<T: Float>(x: &RefTensor<T>) -> RefTensor<T> {
    let [n, ch, h, w] = x.dims;
    let mut out = RefTensor::zeros([n, ch, w, h]);
    for i in 0..n {
        for j in 0..ch {
            for y in 0..h {
                for xx in 0..w {
                    out.set(i, j, xx, y, x.get(i, j, y, xx));
                }
            }
        }
    }
    out
}

pub fn softmax<T: Float>(x: &RefTensor<T>) -> RefTensor<T> {
    let w = x.dims[3];
    let mut out = x.clone();
    for row in out.data.chunks_mut(w) {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

fn zip<T: Float>(
    a: &RefTensor<T>,
    b: &RefTensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<RefTensor<T>> {
    if a.dims != b.dims {
        return Err(config_err("reference elementwise: dims differ"));
    }
    Ok(RefTensor {
        dims: a.dims,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

fn map<T: Float>(a: &RefTensor<T>, f: impl Fn(T) -> T) -> RefTensor<T> {
    RefTensor {
        dims: a.dims,
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

/// Reference backend. Parameters are read from an `f32` store, widened to
/// `T`, and one coordinate may be shifted by a perturbation.
pub struct ReferenceExec<'a, T> {
    params: &'a ParamStore,
    perturb: Option<(String, usize, T)>,
    signature: Vec<i8>,
}

impl<'a, T: Float> ReferenceExec<'a, T> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            perturb: None,
            signature: Vec::new(),
        }
    }

    pub fn with_perturbation(params: &'a ParamStore, name: &str, index: usize, delta: T) -> Self {
        Self {
            params,
            perturb: Some((name.to_string(), index, delta)),
            signature: Vec::new(),
        }
    }

    /// Sign classes of every ReLU and abs input seen so far, in call order.
    pub fn kink_signature(&self) -> &[i8] {
        &self.signature
    }
}

impl<T: Float> Exec for ReferenceExec<'_, T> {
    type Value = RefTensor<T>;

    fn dims(&self, v: &RefTensor<T>) -> Dims {
        v.dims
    }

    fn constant(&mut self, t: Tensor) -> RefTensor<T> {
        RefTensor::from_tensor(&t)
    }

    fn param(&mut self, name: &str) -> Result<RefTensor<T>> {
        let mut t = RefTensor::from_tensor(self.params.require(name)?);
        if let Some((pname, idx, delta)) = &self.perturb {
            if pname == name {
                t.data[*idx] = t.data[*idx] + *delta;
            }
        }
        Ok(t)
    }

    fn conv2d(
        &mut self,
        x: &RefTensor<T>,
        w: &RefTensor<T>,
        b: Option<&RefTensor<T>>,
        spec: &ConvSpec,
    ) -> Result<RefTensor<T>> {
        conv2d(x, w, b, spec)
    }

    fn batchnorm(
        &mut self,
        x: &RefTensor<T>,
        s: [&RefTensor<T>; 4],
        eps: f32,
    ) -> Result<RefTensor<T>> {
        batchnorm(x, s, eps)
    }

    fn activation(&mut self, x: &RefTensor<T>, kind: Activation) -> Result<RefTensor<T>> {
        Ok(match kind {
            Activation::Relu => {
                self.signature
                    .extend(x.data.iter().map(|&v| (v > T::zero()) as i8));
                map(x, relu)
            }
            Activation::Sigmoid => map(x, sigmoid),
        })
    }

    fn avgpool_to(&mut self, x: &RefTensor<T>, target: (usize, usize)) -> Result<RefTensor<T>> {
        avgpool_to(x, target.0, target.1)
    }

    fn bilinear_resize(
        &mut self,
        x: &RefTensor<T>,
        target: (usize, usize),
    ) -> Result<RefTensor<T>> {
        Ok(bilinear(x, target.0, target.1))
    }

    fn concat_channels(&mut self, xs: &[RefTensor<T>]) -> Result<RefTensor<T>> {
        concat(xs)
    }

    fn split_channels(&mut self, x: &RefTensor<T>, sizes: &[usize]) -> Result<Vec<RefTensor<T>>> {
        split(x, sizes)
    }

    fn matmul_batched(&mut self, a: &RefTensor<T>, b: &RefTensor<T>) -> Result<RefTensor<T>> {
        matmul(a, b)
    }

    fn transpose_last2(&mut self, x: &RefTensor<T>) -> Result<RefTensor<T>> {
        Ok(transpose(x))
    }

    fn softmax_lastdim(&mut self, x: &RefTensor<T>) -> Result<RefTensor<T>> {
        Ok(softmax(x))
    }

    fn reshape(&mut self, x: &RefTensor<T>, dims: Dims) -> Result<RefTensor<T>> {
        if numel(dims) != x.data.len() {
            return Err(config_err("reference reshape: element count differs"));
        }
        Ok(RefTensor {
            dims,
            data: x.data.clone(),
        })
    }

    fn add(&mut self, a: &RefTensor<T>, b: &RefTensor<T>) -> Result<RefTensor<T>> {
        zip(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &RefTensor<T>, b: &RefTensor<T>) -> Result<RefTensor<T>> {
        zip(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &RefTensor<T>, b: &RefTensor<T>) -> Result<RefTensor<T>> {
        zip(a, b, |x, y| x * y)
    }

    fn scale(&mut self, x: &RefTensor<T>, factor: f32) -> Result<RefTensor<T>> {
        let f = T::from(factor).unwrap();
        Ok(map(x, |v| v * f))
    }

    fn abs(&mut self, x: &RefTensor<T>) -> Result<RefTensor<T>> {
        self.signature
            .extend(x.data.iter().map(|&v| sign_class(v.to_f64().unwrap())));
        Ok(map(x, T::abs))
    }

    fn bce_with_logits(
        &mut self,
        logits: &RefTensor<T>,
        target: &RefTensor<T>,
    ) -> Result<RefTensor<T>> {
        // -t ln(s) - (1 - t) ln(1 - s), written in log-sum-exp form
        zip(logits, target, |x, t| {
            let softplus_neg = (T::one() + (-x.abs()).exp()).ln();
            x.max(T::zero()) - x * t + softplus_neg
        })
    }

    fn sum_all(&mut self, x: &RefTensor<T>) -> Result<RefTensor<T>> {
        let mut acc = T::zero();
        for &v in &x.data {
            acc = acc + v;
        }
        Ok(RefTensor {
            dims: [1, 1, 1, 1],
            data: vec![acc],
        })
    }
}
