//! Execution backends and reverse-mode differentiation.
//!
//! Model code is written once against [`Exec`]. [`Eager`] evaluates directly
//! on the tensor kernels, [`Tape`] evaluates through the same kernels while
//! recording every step so [`Tape::backward`] can replay it in reverse. The
//! analysis module adds a shape-only backend that counts FLOPs.

use std::collections::BTreeMap;

use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Activation, BnStats, ConvSpec, Dims, Grad, ResizeKind, Tensor};

/// The op set every backend implements.
pub trait Exec {
    type Value: Clone;

    fn dims(&self, v: &Self::Value) -> Dims;
    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn param(&mut self, name: &str) -> Result<Self::Value>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        spec: &ConvSpec,
    ) -> Result<Self::Value>;
    /// Inference batchnorm; `stats` is `[gamma, beta, mean, var]`.
    fn batchnorm(
        &mut self,
        x: &Self::Value,
        stats: [&Self::Value; 4],
        eps: f32,
    ) -> Result<Self::Value>;
    fn activation(&mut self, x: &Self::Value, kind: Activation) -> Result<Self::Value>;
    fn avgpool_to(&mut self, x: &Self::Value, target: (usize, usize)) -> Result<Self::Value>;
    fn bilinear_resize(&mut self, x: &Self::Value, target: (usize, usize)) -> Result<Self::Value>;
    fn concat_channels(&mut self, xs: &[Self::Value]) -> Result<Self::Value>;
    fn split_channels(&mut self, x: &Self::Value, sizes: &[usize]) -> Result<Vec<Self::Value>>;
    fn matmul_batched(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn transpose_last2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn softmax_lastdim(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, dims: Dims) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, factor: f32) -> Result<Self::Value>;
    fn abs(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn bce_with_logits(
        &mut self,
        logits: &Self::Value,
        target: &Self::Value,
    ) -> Result<Self::Value>;
    /// Sum of every element, as a `(1, 1, 1, 1)` value.
    fn sum_all(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// Attribution scopes for analysis backends; no-ops elsewhere.
    fn enter_scope(&mut self, _name: &str) {}
    fn exit_scope(&mut self) {}

    /// Average-pools when shrinking, bilinear when growing, passes through
    /// when the size already matches.
    fn resize_to(&mut self, x: &Self::Value, target: (usize, usize)) -> Result<Self::Value> {
        let d = self.dims(x);
        match tensor::resize_kind((d[2], d[3]), target)? {
            ResizeKind::Identity => Ok(x.clone()),
            ResizeKind::Pool => self.avgpool_to(x, target),
            ResizeKind::Bilinear => self.bilinear_resize(x, target),
        }
    }

    fn mean_all(&mut self, x: &Self::Value) -> Result<Self::Value> {
        let n = tensor::numel(self.dims(x));
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n as f32)
    }
}

/// A composition of ops that runs on any backend.
pub trait Graph {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>>;
}

pub(crate) fn expect_inputs<'v, V>(inputs: &'v [V], n: usize, what: &str) -> Result<&'v [V]> {
    if inputs.len() != n {
        return Err(config_err(format!(
            "{what} takes {n} input(s), got {}",
            inputs.len()
        )));
    }
    Ok(inputs)
}

/// `Graph` for a module with `forward(ex, x) -> Result<Value>`.
macro_rules! unary_graph {
    ($($ty:ty),+) => {$(
        impl $crate::autodiff::Graph for $ty {
            fn forward<E: $crate::autodiff::Exec>(
                &self,
                ex: &mut E,
                inputs: &[E::Value],
            ) -> $crate::error::Result<Vec<E::Value>> {
                let x = $crate::autodiff::expect_inputs(inputs, 1, stringify!($ty))?;
                Ok(vec![<$ty>::forward(self, ex, &x[0])?])
            }
        }
    )+};
}
pub(crate) use unary_graph;

/// Untraced evaluation straight on the tensor kernels.
pub struct Eager<'a> {
    params: &'a ParamStore,
}

impl<'a> Eager<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params }
    }
}

impl Exec for Eager<'_> {
    type Value = Tensor;

    fn dims(&self, v: &Tensor) -> Dims {
        v.dims()
    }

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, name: &str) -> Result<Tensor> {
        self.params.require(name).cloned()
    }

    fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        spec: &ConvSpec,
    ) -> Result<Tensor> {
        tensor::conv2d(x, w, b, spec)
    }

    fn batchnorm(&mut self, x: &Tensor, s: [&Tensor; 4], eps: f32) -> Result<Tensor> {
        tensor::batchnorm_infer(
            x,
            BnStats {
                gamma: s[0],
                beta: s[1],
                mean: s[2],
                var: s[3],
            },
            eps,
        )
    }

    fn activation(&mut self, x: &Tensor, kind: Activation) -> Result<Tensor> {
        Ok(tensor::activation(x, kind))
    }

    fn avgpool_to(&mut self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        tensor::avgpool_to(x, target)
    }

    fn bilinear_resize(&mut self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        tensor::bilinear_resize(x, target)
    }

    fn concat_channels(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = xs.iter().collect();
        tensor::concat_channels(&refs)
    }

    fn split_channels(&mut self, x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
        tensor::split_channels(x, sizes)
    }

    fn matmul_batched(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul_batched(a, b)
    }

    fn transpose_last2(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::transpose_last2(x))
    }

    fn softmax_lastdim(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::softmax_lastdim(x))
    }

    fn reshape(&mut self, x: &Tensor, dims: Dims) -> Result<Tensor> {
        x.reshape(dims)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mul(a, b)
    }

    fn scale(&mut self, x: &Tensor, factor: f32) -> Result<Tensor> {
        Ok(tensor::scale(x, factor))
    }

    fn abs(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::abs(x))
    }

    fn bce_with_logits(&mut self, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
        tensor::bce_with_logits(logits, target)
    }

    fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::sum_all(x))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Constant,
    Param(String),
    Conv2d(ConvSpec),
    BatchNorm {
        eps: f32,
    },
    Activation(Activation),
    AvgPool,
    Bilinear,
    Concat,
    /// Channel slice `[offset, offset + len)` of the input.
    Slice {
        offset: usize,
    },
    MatMul,
    Transpose,
    Softmax,
    Reshape,
    Add,
    Sub,
    Mul,
    Scale(f32),
    Abs,
    Bce,
    SumAll,
}

/// One recorded step. Inputs always precede the node on the tape.
#[derive(Debug, Clone)]
pub struct TapeNode {
    pub op: Op,
    pub inputs: Vec<Var>,
    pub value: Tensor,
}

/// Recording backend.
pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<TapeNode>,
    leaves: BTreeMap<String, Var>,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_leaf_count(&self) -> usize {
        self.leaves.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Var {
        self.nodes.push(TapeNode { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    /// Sign classes of every ReLU and abs input, in tape order. Two
    /// evaluations with equal signatures sit on the same linear piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Activation(Activation::Relu) => {
                    let x = self.value(node.inputs[0]);
                    sig.extend(x.data().iter().map(|&v| (v > 0.0) as i8));
                }
                Op::Abs => {
                    let x = self.value(node.inputs[0]);
                    sig.extend(x.data().iter().map(|&v| sign_class(v as f64)));
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`. Every parameter in the store gets
    /// an entry; parameters the graph never touched get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradientSet> {
        let seed_dims = self.value(loss).dims();
        if tensor::numel(seed_dims) != 1 {
            return Err(config_err(format!(
                "backward needs a scalar loss, got dims {seed_dims:?}"
            )));
        }
        let mut grads: Vec<Option<Grad>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Grad::full(seed_dims, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contrib) in self.vjp(node, &g)? {
                match &mut grads[input.0] {
                    None => grads[input.0] = Some(contrib),
                    Some(acc) => acc.add_assign(&contrib)?,
                }
            }
        }

        let mut out = GradientSet::zeros_like(self.params);
        for (name, var) in &self.leaves {
            if let Some(Some(g)) = grads.get(var.0) {
                out.grads.insert(name.clone(), g.to_tensor());
            }
        }
        Ok(out)
    }

    fn vjp(&self, node: &TapeNode, g: &Grad) -> Result<Vec<(Var, Grad)>> {
        let inp = |k: usize| self.value(node.inputs[k]);
        let v = |k: usize| node.inputs[k];
        Ok(match &node.op {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::Conv2d(spec) => {
                let x = inp(0);
                let w = inp(1);
                let mut out = vec![
                    (v(0), tensor::conv2d_grad_input(g, w, spec, x.dims())),
                    (v(1), tensor::conv2d_grad_weight(g, x, spec)),
                ];
                if node.inputs.len() == 3 {
                    let db = tensor::channel_sum(g).reshape(inp(2).dims())?;
                    out.push((v(2), db));
                }
                out
            }
            Op::BatchNorm { eps } => {
                let stats = BnStats {
                    gamma: inp(1),
                    beta: inp(2),
                    mean: inp(3),
                    var: inp(4),
                };
                let gr = tensor::batchnorm_grad(g, inp(0), stats, *eps)?;
                vec![
                    (v(0), gr.input),
                    (v(1), gr.gamma),
                    (v(2), gr.beta),
                    (v(3), gr.mean),
                    (v(4), gr.var),
                ]
            }
            Op::Activation(Activation::Relu) => {
                vec![(
                    v(0),
                    g.zip_value(inp(0), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
                )]
            }
            Op::Activation(Activation::Sigmoid) => {
                vec![(
                    v(0),
                    g.zip_value(&node.value, |gv, yv| gv * yv * (1.0 - yv))?,
                )]
            }
            Op::AvgPool => vec![(v(0), tensor::avgpool_grad(g, inp(0).dims()))],
            Op::Bilinear => vec![(v(0), tensor::bilinear_grad(g, inp(0).dims()))],
            Op::Concat => {
                let sizes: Vec<usize> = node.inputs.iter().map(|&i| self.value(i).c()).collect();
                node.inputs
                    .iter()
                    .copied()
                    .zip(g.split_channels(&sizes))
                    .collect()
            }
            Op::Slice { offset } => vec![(v(0), g.embed_channels(inp(0).dims(), *offset))],
            Op::MatMul => {
                let (da, db) = tensor::matmul_grad(g, inp(0), inp(1));
                vec![(v(0), da), (v(1), db)]
            }
            Op::Transpose => vec![(v(0), g.transpose_last2())],
            Op::Softmax => vec![(v(0), tensor::softmax_grad(g, &node.value))],
            Op::Reshape => vec![(v(0), g.reshape(inp(0).dims())?)],
            Op::Add => vec![(v(0), g.clone()), (v(1), g.clone())],
            Op::Sub => vec![(v(0), g.clone()), (v(1), g.map(|x| -x))],
            Op::Mul => vec![
                (v(0), g.zip_value(inp(1), |gv, b| gv * b)?),
                (v(1), g.zip_value(inp(0), |gv, a| gv * a)?),
            ],
            Op::Scale(f) => {
                let f = *f as f64;
                vec![(v(0), g.map(|x| x * f))]
            }
            Op::Abs => {
                let d = g.zip_value(inp(0), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                vec![(v(0), d)]
            }
            Op::Bce => {
                // d/dx = sigmoid(x) - t, d/dt = -x
                let x = inp(0);
                let t = inp(1);
                let dx = x
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(g.data())
                    .map(|((&xv, &tv), &gv)| gv * (exact_sigmoid(xv as f64) - tv as f64))
                    .collect();
                let dt = g.zip_value(x, |gv, xv| -gv * xv)?;
                vec![(v(0), Grad::from_parts(x.dims(), dx)), (v(1), dt)]
            }
            Op::SumAll => vec![(v(0), Grad::full(inp(0).dims(), g.data()[0]))],
        })
    }
}

fn exact_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sign_class(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

impl Exec for Tape<'_> {
    type Value = Var;

    fn dims(&self, v: &Var) -> Dims {
        self.value(*v).dims()
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, Vec::new(), t)
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?.clone();
        let v = self.push(Op::Param(name.to_string()), Vec::new(), t);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let out = tensor::conv2d(
            self.value(*x),
            self.value(*w),
            b.map(|b| self.value(*b)),
            spec,
        )?;
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        Ok(self.push(Op::Conv2d(spec.clone()), inputs, out))
    }

    fn batchnorm(&mut self, x: &Var, s: [&Var; 4], eps: f32) -> Result<Var> {
        let stats = BnStats {
            gamma: self.value(*s[0]),
            beta: self.value(*s[1]),
            mean: self.value(*s[2]),
            var: self.value(*s[3]),
        };
        let out = tensor::batchnorm_infer(self.value(*x), stats, eps)?;
        Ok(self.push(
            Op::BatchNorm { eps },
            vec![*x, *s[0], *s[1], *s[2], *s[3]],
            out,
        ))
    }

    fn activation(&mut self, x: &Var, kind: Activation) -> Result<Var> {
        let out = tensor::activation(self.value(*x), kind);
        Ok(self.push(Op::Activation(kind), vec![*x], out))
    }

    fn avgpool_to(&mut self, x: &Var, target: (usize, usize)) -> Result<Var> {
        let out = tensor::avgpool_to(self.value(*x), target)?;
        Ok(self.push(Op::AvgPool, vec![*x], out))
    }

    fn bilinear_resize(&mut self, x: &Var, target: (usize, usize)) -> Result<Var> {
        let out = tensor::bilinear_resize(self.value(*x), target)?;
        Ok(self.push(Op::Bilinear, vec![*x], out))
    }

    fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let out = tensor::concat_channels(&refs)?;
        Ok(self.push(Op::Concat, xs.to_vec(), out))
    }

    fn split_channels(&mut self, x: &Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let parts = tensor::split_channels(self.value(*x), sizes)?;
        let mut offset = 0;
        let mut out = Vec::with_capacity(parts.len());
        for (part, &len) in parts.into_iter().zip(sizes) {
            out.push(self.push(Op::Slice { offset }, vec![*x], part));
            offset += len;
        }
        Ok(out)
    }

    fn matmul_batched(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::matmul_batched(self.value(*a), self.value(*b))?;
        Ok(self.push(Op::MatMul, vec![*a, *b], out))
    }

    fn transpose_last2(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::transpose_last2(self.value(*x));
        Ok(self.push(Op::Transpose, vec![*x], out))
    }

    fn softmax_lastdim(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::softmax_lastdim(self.value(*x));
        Ok(self.push(Op::Softmax, vec![*x], out))
    }

    fn reshape(&mut self, x: &Var, dims: Dims) -> Result<Var> {
        let out = self.value(*x).reshape(dims)?;
        Ok(self.push(Op::Reshape, vec![*x], out))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::add(self.value(*a), self.value(*b))?;
        Ok(self.push(Op::Add, vec![*a, *b], out))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::sub(self.value(*a), self.value(*b))?;
        Ok(self.push(Op::Sub, vec![*a, *b], out))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::mul(self.value(*a), self.value(*b))?;
        Ok(self.push(Op::Mul, vec![*a, *b], out))
    }

    fn scale(&mut self, x: &Var, factor: f32) -> Result<Var> {
        let out = tensor::scale(self.value(*x), factor);
        Ok(self.push(Op::Scale(factor), vec![*x], out))
    }

    fn abs(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::abs(self.value(*x));
        Ok(self.push(Op::Abs, vec![*x], out))
    }

    fn bce_with_logits(&mut self, logits: &Var, target: &Var) -> Result<Var> {
        let out = tensor::bce_with_logits(self.value(*logits), self.value(*target))?;
        Ok(self.push(Op::Bce, vec![*logits, *target], out))
    }

    fn sum_all(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::sum_all(self.value(*x));
        Ok(self.push(Op::SumAll, vec![*x], out))
    }
}

/// Gradients keyed by parameter name; shapes match the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.dims())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Runs `graph` untraced.
pub fn forward_eager<G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    params: &ParamStore,
) -> Result<Vec<Tensor>> {
    let mut ex = Eager::new(params);
    graph.forward(&mut ex, inputs)
}

/// A traced forward: the tape plus the handles of the graph outputs.
pub struct Traced<'a> {
    pub tape: Tape<'a>,
    pub outputs: Vec<Var>,
}

impl Traced<'_> {
    pub fn output(&self, k: usize) -> &Tensor {
        self.tape.value(self.outputs[k])
    }

    pub fn output_tensors(&self) -> Vec<Tensor> {
        self.outputs
            .iter()
            .map(|&v| self.tape.value(v).clone())
            .collect()
    }

    /// Gradient of the single scalar output.
    pub fn backward(&self) -> Result<GradientSet> {
        match self.outputs.as_slice() {
            [loss] => self.tape.backward(*loss),
            _ => Err(config_err(format!(
                "backward needs exactly one scalar output, graph produced {}",
                self.outputs.len()
            ))),
        }
    }
}

/// Runs `graph` on a fresh tape.
pub fn forward_traced<'a, G: Graph>(
    graph: &G,
    inputs: &[Tensor],
    params: &'a ParamStore,
) -> Result<Traced<'a>> {
    let mut tape = Tape::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let outputs = graph.forward(&mut tape, &vars)?;
    Ok(Traced { tape, outputs })
}

/// How graph outputs are reduced to the scalar that gets differentiated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduction {
    Sum,
    Mean,
    /// `sum(out * r)` with fixed standard-normal `r` drawn from the seed;
    /// gives every output element a distinct weight.
    Projection(u64),
}

/// Wraps a graph so its outputs are reduced to one scalar.
pub struct Reduced<'g, G> {
    pub graph: &'g G,
    pub reduction: Reduction,
}

impl<G: Graph> Graph for Reduced<'_, G> {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let outs = self.graph.forward(ex, inputs)?;
        let mut total: Option<E::Value> = None;
        for (k, out) in outs.iter().enumerate() {
            let term = match self.reduction {
                Reduction::Sum => ex.sum_all(out)?,
                Reduction::Mean => ex.mean_all(out)?,
                Reduction::Projection(seed) => {
                    let r = projection_weights(ex.dims(out), seed.wrapping_add(k as u64));
                    let r = ex.constant(r);
                    let prod = ex.mul(out, &r)?;
                    ex.sum_all(&prod)?
                }
            };
            total = Some(match total {
                None => term,
                Some(acc) => ex.add(&acc, &term)?,
            });
        }
        Ok(vec![
            total.ok_or_else(|| config_err("graph produced no outputs"))?
        ])
    }
}

fn projection_weights(dims: Dims, seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..tensor::numel(dims))
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::from_parts(dims, data)
}
