//! Parameterized building blocks shared by the neck modules.
//!
//! A layer is a description: a parameter-name prefix plus geometry. Weights
//! live in a [`ParamStore`](crate::params::ParamStore) and are fetched by name
//! through the executing backend.

use crate::autodiff::{unary_graph, Exec};
use crate::error::Result;
use crate::params::{join, Init, ParamSpec, ParamSpecs};
use crate::repconv::RepConv;
use crate::tensor::{Activation, ConvSpec};

pub const BN_EPS: f32 = 1e-5;

/// Parameter declarations for a layer tree.
pub trait Module {
    fn param_specs(&self, out: &mut Vec<ParamSpec>);

    /// Visits every re-parameterizable unit in the tree.
    fn for_each_repconv<'a>(&'a self, _f: &mut dyn FnMut(&'a RepConv)) {}

    fn for_each_repconv_mut(&mut self, _f: &mut dyn FnMut(&mut RepConv)) {}

    /// Collected parameter declarations.
    fn specs(&self) -> Result<ParamSpecs> {
        let mut v = Vec::new();
        self.param_specs(&mut v);
        ParamSpecs::new(v)
    }
}

/// Plain convolution with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        let w = ex.param(&self.weight_name())?;
        let b = if self.spec.bias {
            Some(ex.param(&self.bias_name())?)
        } else {
            None
        };
        ex.conv2d(x, &w, b.as_ref(), &self.spec)
    }
}

impl Module for Conv {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let [_, cin_g, kh, kw] = self.spec.weight_dims();
        out.push(ParamSpec::new(
            self.weight_name(),
            self.spec.weight_dims(),
            Init::FanIn {
                fan_in: cin_g * kh * kw,
                gain: 1.0,
            },
        ));
        if self.spec.bias {
            out.push(ParamSpec::new(
                self.bias_name(),
                self.spec.bias_dims(),
                Init::Uniform {
                    low: -0.1,
                    high: 0.1,
                },
            ));
        }
    }
}

/// Inference batchnorm over `channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    /// `[gamma, beta, running_mean, running_var]`
    pub fn stat_names(&self) -> [String; 4] {
        ["gamma", "beta", "running_mean", "running_var"].map(|s| join(&self.name, s))
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        let [g, b, m, v] = self.stat_names();
        let g = ex.param(&g)?;
        let b = ex.param(&b)?;
        let m = ex.param(&m)?;
        let v = ex.param(&v)?;
        ex.batchnorm(x, [&g, &b, &m, &v], BN_EPS)
    }
}

impl Module for BatchNorm {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        let dims = [1, 1, 1, self.channels];
        let [g, b, m, v] = self.stat_names();
        out.push(ParamSpec::new(
            g,
            dims,
            Init::Uniform {
                low: 0.8,
                high: 1.2,
            },
        ));
        out.push(ParamSpec::new(
            b,
            dims,
            Init::Uniform {
                low: -0.1,
                high: 0.1,
            },
        ));
        out.push(
            ParamSpec::new(
                m,
                dims,
                Init::Uniform {
                    low: -0.1,
                    high: 0.1,
                },
            )
            .frozen(),
        );
        out.push(
            ParamSpec::new(
                v,
                dims,
                Init::Uniform {
                    low: 0.5,
                    high: 1.5,
                },
            )
            .frozen(),
        );
    }
}

unary_graph!(Conv, BatchNorm);

/// Bias-free convolution, batchnorm, optional activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new(name: &str, spec: ConvSpec, act: Option<Activation>) -> Self {
        let channels = spec.out_channels;
        Self {
            conv: Conv::new(join(name, "conv"), spec.with_bias(false)),
            bn: BatchNorm::new(join(name, "bn"), channels),
            act,
        }
    }

    pub fn relu(name: &str, spec: ConvSpec) -> Self {
        Self::new(name, spec, Some(Activation::Relu))
    }

    pub fn linear(name: &str, spec: ConvSpec) -> Self {
        Self::new(name, spec, None)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.conv.spec
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        let y = self.conv.forward(ex, x)?;
        let y = self.bn.forward(ex, &y)?;
        match self.act {
            Some(kind) => ex.activation(&y, kind),
            None => Ok(y),
        }
    }
}

impl Module for ConvBn {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.param_specs(out);
        self.bn.param_specs(out);
    }
}

unary_graph!(ConvBn);
