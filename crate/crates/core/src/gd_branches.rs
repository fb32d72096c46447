//! Low-stage and high-stage gather branches.
//!
//! The low stage aligns `{B2, B3, B4, B5}` to B4's resolution and fuses the
//! stack with a RepBlock; the high stage pools `{P3, P4, P5}` to P5's
//! resolution and fuses with transformer blocks. Each branch ends in a
//! channel split producing the two injection tensors.

use crate::autodiff::{expect_inputs, unary_graph, Exec, Graph};
use crate::error::{config_err, Result};
use crate::layers::{Conv, ConvBn, Module};
use crate::params::{join, ParamSpec};
use crate::repconv::{RepBlock, RepConv};
use crate::tensor::{Activation, ConvSpec, Dims, Tensor};

/// Named pyramid levels, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<(String, Tensor)>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<(String, Tensor)>) -> Result<Self> {
        let dims: Vec<Dims> = levels.iter().map(|(_, t)| t.dims()).collect();
        let names: Vec<&str> = levels.iter().map(|(n, _)| n.as_str()).collect();
        check_levels(&dims, &names)?;
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.levels.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn levels(&self) -> &[(String, Tensor)] {
        &self.levels
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.levels.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn into_levels(self) -> Vec<(String, Tensor)> {
        self.levels
    }
}

/// Checks shared batch size and per-axis halving between consecutive levels.
pub fn check_levels(dims: &[Dims], names: &[&str]) -> Result<()> {
    for (k, pair) in dims.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        if a[0] != b[0] {
            return Err(config_err(format!(
                "pyramid levels {} and {} have batch sizes {} and {}",
                names[k],
                names[k + 1],
                a[0],
                b[0]
            )));
        }
        if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
            return Err(config_err(format!(
                "pyramid level {} is {}x{} but must be half of {} ({}x{})",
                names[k + 1],
                b[2],
                b[3],
                names[k],
                a[2],
                a[3]
            )));
        }
    }
    Ok(())
}

fn check_inputs<E: Exec>(ex: &E, levels: &[E::Value], names: &[&str], what: &str) -> Result<()> {
    if levels.len() != names.len() {
        return Err(config_err(format!(
            "{what} expects {} levels ({}), got {}",
            names.len(),
            names.join(", "),
            levels.len()
        )));
    }
    let dims: Vec<Dims> = levels.iter().map(|v| ex.dims(v)).collect();
    check_levels(&dims, names)
}

fn align_to<E: Exec>(ex: &mut E, levels: &[E::Value], target: (usize, usize)) -> Result<E::Value> {
    let resized = levels
        .iter()
        .map(|v| ex.resize_to(v, target))
        .collect::<Result<Vec<_>>>()?;
    ex.concat_channels(&resized)
}

/// `[B2, B3, B4, B5]` resized to B4's resolution and concatenated.
pub fn low_fam<E: Exec>(ex: &mut E, levels: &[E::Value]) -> Result<E::Value> {
    check_inputs(ex, levels, &["B2", "B3", "B4", "B5"], "low_fam")?;
    let d = ex.dims(&levels[2]);
    align_to(ex, levels, (d[2], d[3]))
}

/// `[P3, P4, P5]` pooled to P5's resolution and concatenated.
pub fn high_fam<E: Exec>(ex: &mut E, levels: &[E::Value]) -> Result<E::Value> {
    check_inputs(ex, levels, &["P3", "P4", "P5"], "high_fam")?;
    let d = ex.dims(&levels[2]);
    align_to(ex, levels, (d[2], d[3]))
}

fn split_pair<E: Exec>(
    ex: &mut E,
    x: &E::Value,
    sizes: (usize, usize),
) -> Result<(E::Value, E::Value)> {
    let mut parts = ex.split_channels(x, &[sizes.0, sizes.1])?;
    let b = parts.pop().expect("two parts");
    let a = parts.pop().expect("two parts");
    Ok((a, b))
}

/// RepBlock fusion of the aligned low-stage stack followed by a 1x1
/// projection to `s3 + s4` channels and a split.
#[derive(Debug, Clone, PartialEq)]
pub struct LowIfm {
    pub name: String,
    pub block: RepBlock,
    pub proj: ConvBn,
    pub splits: (usize, usize),
}

impl LowIfm {
    pub fn new(
        name: &str,
        align_channels: usize,
        mid: usize,
        depth: usize,
        splits: (usize, usize),
    ) -> Result<Self> {
        if splits.0 == 0 || splits.1 == 0 {
            return Err(config_err(format!(
                "{name}: split sizes must be positive, got {splits:?}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            block: RepBlock::new(&join(name, "block"), align_channels, mid, depth)?,
            proj: ConvBn::relu(
                &join(name, "proj"),
                ConvSpec::new(mid, splits.0 + splits.1, 1),
            ),
            splits,
        })
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, f_align: &E::Value) -> Result<(E::Value, E::Value)> {
        ex.enter_scope(&self.name);
        let out = (|| {
            let y = self.block.forward(ex, f_align)?;
            let y = self.proj.forward(ex, &y)?;
            split_pair(ex, &y, self.splits)
        })();
        ex.exit_scope();
        out
    }
}

impl Module for LowIfm {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.block.param_specs(out);
        self.proj.param_specs(out);
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        self.block.for_each_repconv(f)
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        self.block.for_each_repconv_mut(f)
    }
}

/// Multi-head attention plus depthwise FFN, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub key_dim: usize,
}

impl TransformerBlock {
    pub fn new(name: &str, channels: usize, heads: usize, key_dim: usize) -> Result<Self> {
        if channels == 0 || heads == 0 || key_dim == 0 {
            return Err(config_err(format!(
                "{name}: channels, heads and key_dim must be positive ({channels}, {heads}, {key_dim})"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            channels,
            heads,
            key_dim,
        })
    }

    pub fn value_dim(&self) -> usize {
        2 * self.key_dim
    }

    pub fn hidden(&self) -> usize {
        2 * self.channels
    }

    pub fn query(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "attn.q"),
            ConvSpec::new(self.channels, self.heads * self.key_dim, 1),
        )
    }

    pub fn key(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "attn.k"),
            ConvSpec::new(self.channels, self.heads * self.key_dim, 1),
        )
    }

    pub fn value(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "attn.v"),
            ConvSpec::new(self.channels, self.heads * self.value_dim(), 1),
        )
    }

    pub fn out_proj(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "attn.proj"),
            ConvSpec::new(self.heads * self.value_dim(), self.channels, 1),
        )
    }

    pub fn ffn_expand(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "ffn.fc1"),
            ConvSpec::new(self.channels, self.hidden(), 1),
        )
    }

    pub fn ffn_dw(&self) -> ConvBn {
        let h = self.hidden();
        ConvBn::relu(
            &join(&self.name, "ffn.dw"),
            ConvSpec::same(h, h, 3).groups(h),
        )
    }

    pub fn ffn_reduce(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "ffn.fc2"),
            ConvSpec::new(self.hidden(), self.channels, 1),
        )
    }

    fn check<E: Exec>(&self, ex: &E, x: &E::Value) -> Result<Dims> {
        let d = ex.dims(x);
        if d[1] != self.channels {
            return Err(config_err(format!(
                "{}: input width {} differs from block width {}",
                self.name, d[1], self.channels
            )));
        }
        Ok(d)
    }

    fn heads_view<E: Exec>(&self, ex: &mut E, x: &E::Value, per_head: usize) -> Result<E::Value> {
        let d = ex.dims(x);
        ex.reshape(x, [d[0], self.heads, per_head, d[2] * d[3]])
    }

    /// Per-head attention weights `(n, heads, tokens, tokens)`; rows are
    /// queries, columns keys.
    pub fn attention_weights<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        self.check(ex, x)?;
        let q = self.query().forward(ex, x)?;
        let k = self.key().forward(ex, x)?;
        let q = self.heads_view(ex, &q, self.key_dim)?;
        let k = self.heads_view(ex, &k, self.key_dim)?;
        let qt = ex.transpose_last2(&q)?;
        let scores = ex.matmul_batched(&qt, &k)?;
        let scores = ex.scale(&scores, 1.0 / (self.key_dim as f32).sqrt())?;
        ex.softmax_lastdim(&scores)
    }

    /// The attention branch without its residual.
    pub fn attention<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        let d = self.check(ex, x)?;
        let attn = self.attention_weights(ex, x)?;
        let v = self.value().forward(ex, x)?;
        let v = self.heads_view(ex, &v, self.value_dim())?;
        let at = ex.transpose_last2(&attn)?;
        let y = ex.matmul_batched(&v, &at)?;
        let y = ex.reshape(&y, [d[0], self.heads * self.value_dim(), d[2], d[3]])?;
        let y = ex.activation(&y, Activation::Relu)?;
        self.out_proj().forward(ex, &y)
    }

    /// The feed-forward branch without its residual.
    pub fn ffn<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        self.check(ex, x)?;
        let y = self.ffn_expand().forward(ex, x)?;
        let y = self.ffn_dw().forward(ex, &y)?;
        self.ffn_reduce().forward(ex, &y)
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        ex.enter_scope(&self.name);
        let out = (|| {
            let a = self.attention(ex, x)?;
            let x = ex.add(x, &a)?;
            let f = self.ffn(ex, &x)?;
            ex.add(&x, &f)
        })();
        ex.exit_scope();
        out
    }
}

impl Module for TransformerBlock {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for cb in [
            self.query(),
            self.key(),
            self.value(),
            self.out_proj(),
            self.ffn_expand(),
            self.ffn_dw(),
            self.ffn_reduce(),
        ] {
            cb.param_specs(out);
        }
    }
}

/// Pre-projection to the embedding width, `L` transformer blocks, a 1x1
/// reduction to `s4 + s5` channels and a split.
#[derive(Debug, Clone, PartialEq)]
pub struct HighIfm {
    pub name: String,
    pub embed: ConvBn,
    pub blocks: Vec<TransformerBlock>,
    pub reduce: Conv,
    pub splits: (usize, usize),
}

impl HighIfm {
    pub fn new(
        name: &str,
        align_channels: usize,
        embed_width: usize,
        depth: usize,
        heads: usize,
        key_dim: usize,
        splits: (usize, usize),
    ) -> Result<Self> {
        if depth == 0 {
            return Err(config_err(format!(
                "{name}: transformer depth must be >= 1"
            )));
        }
        if splits.0 == 0 || splits.1 == 0 {
            return Err(config_err(format!(
                "{name}: split sizes must be positive, got {splits:?}"
            )));
        }
        let blocks = (0..depth)
            .map(|k| {
                TransformerBlock::new(
                    &join(name, &format!("block{k}")),
                    embed_width,
                    heads,
                    key_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            embed: ConvBn::linear(
                &join(name, "embed"),
                ConvSpec::new(align_channels, embed_width, 1),
            ),
            blocks,
            reduce: Conv::new(
                join(name, "reduce"),
                ConvSpec::new(embed_width, splits.0 + splits.1, 1).with_bias(true),
            ),
            splits,
        })
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, f_align: &E::Value) -> Result<(E::Value, E::Value)> {
        ex.enter_scope(&self.name);
        let out = (|| {
            let mut y = self.embed.forward(ex, f_align)?;
            for b in &self.blocks {
                y = b.forward(ex, &y)?;
            }
            let y = self.reduce.forward(ex, &y)?;
            split_pair(ex, &y, self.splits)
        })();
        ex.exit_scope();
        out
    }
}

impl Module for HighIfm {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.embed.param_specs(out);
        for b in &self.blocks {
            b.param_specs(out);
        }
        self.reduce.param_specs(out);
    }
}

unary_graph!(TransformerBlock);

impl Graph for LowIfm {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let x = expect_inputs(inputs, 1, "LowIfm")?;
        let (a, b) = LowIfm::forward(self, ex, &x[0])?;
        Ok(vec![a, b])
    }
}

impl Graph for HighIfm {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let x = expect_inputs(inputs, 1, "HighIfm")?;
        let (a, b) = HighIfm::forward(self, ex, &x[0])?;
        Ok(vec![a, b])
    }
}
