//! Information injection and lightweight adjacent-layer fusion (LAF).
//!
//! [`Inject`] gates a level's local embedding with a sigmoid map computed
//! from global features, adds a global embedding and refines the sum with a
//! RepBlock. [`Laf`] merges a level with its immediate neighbours before
//! injection using only resizes and 1x1 convolutions.

use crate::autodiff::{expect_inputs, Exec, Graph};
use crate::error::{config_err, Result};
use crate::layers::{Conv, ConvBn, Module};
use crate::params::{join, ParamSpec};
use crate::repconv::{RepBlock, RepConv};
use crate::tensor::{Activation, ConvSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Inject {
    pub name: String,
    pub local_channels: usize,
    pub inj_channels: usize,
    pub out_channels: usize,
    pub tail: RepBlock,
}

impl Inject {
    pub fn new(
        name: &str,
        local_channels: usize,
        inj_channels: usize,
        out_channels: usize,
        depth: usize,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            local_channels,
            inj_channels,
            out_channels,
            tail: RepBlock::new(&join(name, "tail"), out_channels, out_channels, depth)?,
        })
    }

    pub fn local_embed(&self) -> Conv {
        Conv::new(
            join(&self.name, "local_embed"),
            ConvSpec::new(self.local_channels, self.out_channels, 1).with_bias(true),
        )
    }

    pub fn global_embed(&self) -> Conv {
        Conv::new(
            join(&self.name, "global_embed"),
            ConvSpec::new(self.inj_channels, self.out_channels, 1).with_bias(true),
        )
    }

    pub fn act(&self) -> Conv {
        Conv::new(
            join(&self.name, "act"),
            ConvSpec::new(self.inj_channels, self.out_channels, 1).with_bias(true),
        )
    }

    /// Sigmoid attention map from the injected features, at `target` size.
    pub fn gate<E: Exec>(
        &self,
        ex: &mut E,
        f_inj: &E::Value,
        target: (usize, usize),
    ) -> Result<E::Value> {
        let act = self.act().forward(ex, f_inj)?;
        let act = ex.activation(&act, Activation::Sigmoid)?;
        ex.resize_to(&act, target)
    }

    /// The gated sum before the RepBlock tail.
    pub fn att_fuse<E: Exec>(
        &self,
        ex: &mut E,
        f_local: &E::Value,
        f_inj: &E::Value,
        target: (usize, usize),
    ) -> Result<E::Value> {
        let ld = ex.dims(f_local);
        if (ld[2], ld[3]) != target {
            return Err(config_err(format!(
                "{}: target {}x{} differs from local feature {}x{}",
                self.name, target.0, target.1, ld[2], ld[3]
            )));
        }
        let id = ex.dims(f_inj);
        if ld[1] != self.local_channels || id[1] != self.inj_channels {
            return Err(config_err(format!(
                "{}: expected local/inject channels {}/{}, got {}/{}",
                self.name, self.local_channels, self.inj_channels, ld[1], id[1]
            )));
        }
        let act = self.gate(ex, f_inj, target)?;
        let embed = self.global_embed().forward(ex, f_inj)?;
        let embed = ex.resize_to(&embed, target)?;
        let local = self.local_embed().forward(ex, f_local)?;
        let gated = ex.mul(&local, &act)?;
        ex.add(&gated, &embed)
    }

    pub fn forward<E: Exec>(
        &self,
        ex: &mut E,
        f_local: &E::Value,
        f_inj: &E::Value,
        target: (usize, usize),
    ) -> Result<E::Value> {
        ex.enter_scope(&self.name);
        let out = self
            .att_fuse(ex, f_local, f_inj, target)
            .and_then(|fused| self.tail.forward(ex, &fused));
        ex.exit_scope();
        out
    }
}

impl Module for Inject {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.local_embed().param_specs(out);
        self.global_embed().param_specs(out);
        self.act().param_specs(out);
        self.tail.param_specs(out);
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        self.tail.for_each_repconv(f)
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        self.tail.for_each_repconv_mut(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LafMerge {
    #[default]
    Concat,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LafMode {
    /// Finer and coarser neighbour.
    Low,
    /// Finer neighbour only.
    High,
}

/// Adjacent-layer fusion for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct Laf {
    pub name: String,
    /// Level label used in error messages, e.g. `"P3"`.
    pub level: String,
    pub local_channels: usize,
    pub finer: Option<usize>,
    pub coarser: Option<usize>,
    pub merge: LafMerge,
    pub reducer_relu: bool,
}

impl Laf {
    pub fn low(
        name: &str,
        level: &str,
        finer: usize,
        local: usize,
        coarser: usize,
        merge: LafMerge,
        reducer_relu: bool,
    ) -> Self {
        Self {
            name: name.to_string(),
            level: level.to_string(),
            local_channels: local,
            finer: Some(finer),
            coarser: Some(coarser),
            merge,
            reducer_relu,
        }
    }

    pub fn high(
        name: &str,
        level: &str,
        finer: usize,
        local: usize,
        merge: LafMerge,
        reducer_relu: bool,
    ) -> Self {
        Self {
            name: name.to_string(),
            level: level.to_string(),
            local_channels: local,
            finer: Some(finer),
            coarser: None,
            merge,
            reducer_relu,
        }
    }

    pub fn mode(&self) -> LafMode {
        if self.coarser.is_some() {
            LafMode::Low
        } else {
            LafMode::High
        }
    }

    fn adapter(&self, which: &str, channels: usize) -> Option<Conv> {
        (channels != self.local_channels).then(|| {
            Conv::new(
                join(&self.name, which),
                ConvSpec::new(channels, self.local_channels, 1).with_bias(true),
            )
        })
    }

    pub fn finer_adapter(&self) -> Option<Conv> {
        self.finer.and_then(|c| self.adapter("finer_adapter", c))
    }

    pub fn coarser_adapter(&self) -> Option<Conv> {
        self.coarser
            .and_then(|c| self.adapter("coarser_adapter", c))
    }

    pub fn merged_channels(&self) -> usize {
        match self.merge {
            LafMerge::Concat => {
                let parts =
                    1 + usize::from(self.finer.is_some()) + usize::from(self.coarser.is_some());
                parts * self.local_channels
            }
            LafMerge::Add => self.local_channels,
        }
    }

    pub fn reducer(&self) -> ConvBn {
        let act = self.reducer_relu.then_some(Activation::Relu);
        ConvBn::new(
            &join(&self.name, "reduce"),
            ConvSpec::new(self.merged_channels(), self.local_channels, 1),
            act,
        )
    }

    fn neighbour<E: Exec>(
        &self,
        ex: &mut E,
        x: Option<&E::Value>,
        channels: Option<usize>,
        adapter: Option<Conv>,
        which: &str,
        target: (usize, usize),
    ) -> Result<Option<E::Value>> {
        let Some(expected) = channels else {
            return Ok(None);
        };
        let x = x.ok_or_else(|| {
            config_err(format!(
                "{}: LAF at level {} is missing its {which} neighbour",
                self.name, self.level
            ))
        })?;
        let c = ex.dims(x)[1];
        if c != expected {
            return Err(config_err(format!(
                "{}: {which} neighbour of level {} has {c} channels, expected {expected}",
                self.name, self.level
            )));
        }
        let x = ex.resize_to(x, target)?;
        Ok(Some(match adapter {
            Some(conv) => conv.forward(ex, &x)?,
            None => x,
        }))
    }

    /// Merges `local` with its neighbours at `local`'s resolution.
    pub fn forward<E: Exec>(
        &self,
        ex: &mut E,
        local: &E::Value,
        finer: Option<&E::Value>,
        coarser: Option<&E::Value>,
    ) -> Result<E::Value> {
        let d = ex.dims(local);
        if d[1] != self.local_channels {
            return Err(config_err(format!(
                "{}: level {} has {} channels, expected {}",
                self.name, self.level, d[1], self.local_channels
            )));
        }
        ex.enter_scope(&self.name);
        let target = (d[2], d[3]);
        let out = (|| {
            let f = self.neighbour(ex, finer, self.finer, self.finer_adapter(), "finer", target)?;
            let c = self.neighbour(
                ex,
                coarser,
                self.coarser,
                self.coarser_adapter(),
                "coarser",
                target,
            )?;
            let parts: Vec<E::Value> = f.into_iter().chain([local.clone()]).chain(c).collect();
            let merged = match self.merge {
                LafMerge::Concat => ex.concat_channels(&parts)?,
                LafMerge::Add => {
                    let mut acc = parts[0].clone();
                    for p in &parts[1..] {
                        acc = ex.add(&acc, p)?;
                    }
                    acc
                }
            };
            self.reducer().forward(ex, &merged)
        })();
        ex.exit_scope();
        out
    }
}

impl Module for Laf {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        if let Some(a) = self.finer_adapter() {
            a.param_specs(out);
        }
        if let Some(a) = self.coarser_adapter() {
            a.param_specs(out);
        }
        self.reducer().param_specs(out);
    }
}

/// Injection with an optional LAF front end. With `laf` absent the local
/// feature goes straight into the injection.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectLaf {
    pub laf: Option<Laf>,
    pub inject: Inject,
}

impl InjectLaf {
    pub fn forward<E: Exec>(
        &self,
        ex: &mut E,
        local: &E::Value,
        finer: Option<&E::Value>,
        coarser: Option<&E::Value>,
        f_inj: &E::Value,
    ) -> Result<E::Value> {
        let d = ex.dims(local);
        let fused = match &self.laf {
            Some(laf) => laf.forward(ex, local, finer, coarser)?,
            None => local.clone(),
        };
        self.inject.forward(ex, &fused, f_inj, (d[2], d[3]))
    }
}

impl Module for InjectLaf {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        if let Some(laf) = &self.laf {
            laf.param_specs(out);
        }
        self.inject.param_specs(out);
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        self.inject.for_each_repconv(f)
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        self.inject.for_each_repconv_mut(f)
    }
}

/// Inputs `[f_local, f_inj]`; the target is `f_local`'s spatial size.
impl Graph for Inject {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let x = expect_inputs(inputs, 2, "Inject")?;
        let d = ex.dims(&x[0]);
        Ok(vec![Inject::forward(self, ex, &x[0], &x[1], (d[2], d[3]))?])
    }
}
