//! Re-parameterizable 3x3 convolution (RepConv) and stacks of them
//! (RepBlock).
//!
//! In train form a unit computes `relu(bn(conv3x3(x)) + bn(conv1x1(x)) +
//! bn(x))`, the identity branch existing only when input and output widths
//! match. [`fuse_repconv`] folds the three branches into one biased 3x3
//! convolution that computes the same function.

use crate::autodiff::{unary_graph, Exec};
use crate::error::{config_err, Error, Result};
use crate::layers::{BatchNorm, Conv, ConvBn, Module, BN_EPS};
use crate::params::{join, ParamSpec, ParamStore};
use crate::tensor::{Activation, ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepMode {
    /// Three parallel branches.
    #[default]
    Train,
    /// Single fused 3x3 convolution; requires fused parameters.
    Deploy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepConv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: RepMode,
}

impl RepConv {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            mode: RepMode::Train,
        }
    }

    pub fn has_identity(&self) -> bool {
        self.in_channels == self.out_channels
    }

    pub fn dense(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "dense"),
            ConvSpec::same(self.in_channels, self.out_channels, 3),
        )
    }

    pub fn pointwise(&self) -> ConvBn {
        ConvBn::linear(
            &join(&self.name, "pointwise"),
            ConvSpec::new(self.in_channels, self.out_channels, 1),
        )
    }

    pub fn identity(&self) -> Option<BatchNorm> {
        self.has_identity()
            .then(|| BatchNorm::new(join(&self.name, "identity"), self.out_channels))
    }

    pub fn fused(&self) -> Conv {
        Conv::new(
            join(&self.name, "fused"),
            ConvSpec::same(self.in_channels, self.out_channels, 3).with_bias(true),
        )
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        let c = ex.dims(x)[1];
        if c != self.in_channels {
            return Err(config_err(format!(
                "{}: input has {c} channels, expected {}",
                self.name, self.in_channels
            )));
        }
        let sum = match self.mode {
            RepMode::Train => {
                let a = self.dense().forward(ex, x)?;
                let b = self.pointwise().forward(ex, x)?;
                let mut s = ex.add(&a, &b)?;
                if let Some(bn) = self.identity() {
                    let i = bn.forward(ex, x)?;
                    s = ex.add(&s, &i)?;
                }
                s
            }
            RepMode::Deploy => self.fused().forward(ex, x).map_err(|e| match e {
                Error::Config(msg) if msg.starts_with("missing parameter") => Error::State(
                    format!("{}: deploy form requested before fusing ({msg})", self.name),
                ),
                other => other,
            })?,
        };
        ex.activation(&sum, Activation::Relu)
    }
}

impl Module for RepConv {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        match self.mode {
            RepMode::Train => {
                self.dense().param_specs(out);
                self.pointwise().param_specs(out);
                if let Some(bn) = self.identity() {
                    bn.param_specs(out);
                }
            }
            RepMode::Deploy => self.fused().param_specs(out),
        }
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        f(self)
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        f(self)
    }
}

/// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
fn bn_affine(store: &ParamStore, bn: &BatchNorm) -> Result<(Vec<f32>, Vec<f32>)> {
    let [g, b, m, v] = bn.stat_names();
    let c = bn.channels;
    let gamma = store.require(&g)?.as_vector(c, &g)?;
    let beta = store.require(&b)?.as_vector(c, &b)?;
    let mean = store.require(&m)?.as_vector(c, &m)?;
    let var = store.require(&v)?.as_vector(c, &v)?;
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for j in 0..c {
        let denom = var[j] + BN_EPS;
        if ![gamma[j], beta[j], mean[j], var[j]]
            .iter()
            .all(|x| x.is_finite())
            || !(denom > 0.0)
        {
            return Err(Error::Numerical(format!(
                "{}: channel {j} has unusable statistics (gamma {}, beta {}, mean {}, var {})",
                bn.name, gamma[j], beta[j], mean[j], var[j]
            )));
        }
        let s = gamma[j] / denom.sqrt();
        scale.push(s);
        shift.push(beta[j] - mean[j] * s);
    }
    Ok((scale, shift))
}

/// Folds a unit's branches into `{name}.fused.{weight,bias}`.
///
/// Returns a copy of `store` with the branch parameters replaced by the
/// fused ones. A store that is already fused comes back unchanged.
pub fn fuse_repconv(unit: &RepConv, store: &ParamStore) -> Result<ParamStore> {
    let fused = unit.fused();
    let dense = unit.dense();
    let dense_w_name = dense.conv.weight_name();
    if !store.contains(&dense_w_name) {
        if store.contains(&fused.weight_name()) && store.contains(&fused.bias_name()) {
            return Ok(store.clone());
        }
        return Err(config_err(format!(
            "{}: no branch or fused parameters to fuse",
            unit.name
        )));
    }
    let (cin, cout) = (unit.in_channels, unit.out_channels);
    let mut kernel = vec![0.0f32; cout * cin * 9];
    let mut bias = vec![0.0f32; cout];

    let w3 = store.require(&dense_w_name)?;
    if w3.dims() != [cout, cin, 3, 3] {
        return Err(config_err(format!("{dense_w_name}: dims {:?}", w3.dims())));
    }
    let (s3, t3) = bn_affine(store, &dense.bn)?;
    for oc in 0..cout {
        for k in 0..cin * 9 {
            kernel[oc * cin * 9 + k] += w3.data()[oc * cin * 9 + k] * s3[oc];
        }
        bias[oc] += t3[oc];
    }

    let pw = unit.pointwise();
    let w1 = store.require(&pw.conv.weight_name())?;
    if w1.dims() != [cout, cin, 1, 1] {
        return Err(config_err(format!(
            "{}: dims {:?}",
            pw.conv.weight_name(),
            w1.dims()
        )));
    }
    let (s1, t1) = bn_affine(store, &pw.bn)?;
    for oc in 0..cout {
        for ic in 0..cin {
            // centre tap of the 3x3 window
            kernel[(oc * cin + ic) * 9 + 4] += w1.data()[oc * cin + ic] * s1[oc];
        }
        bias[oc] += t1[oc];
    }

    if let Some(bn) = unit.identity() {
        let (si, ti) = bn_affine(store, &bn)?;
        for oc in 0..cout {
            kernel[(oc * cin + oc) * 9 + 4] += si[oc];
            bias[oc] += ti[oc];
        }
    }

    if !kernel.iter().chain(&bias).all(|v| v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{}: fused parameters are not finite",
            unit.name
        )));
    }

    let mut out = store.clone();
    out.remove_prefix(&format!("{}.", join(&unit.name, "dense")));
    out.remove_prefix(&format!("{}.", join(&unit.name, "pointwise")));
    out.remove_prefix(&format!("{}.", join(&unit.name, "identity")));
    out.insert(fused.weight_name(), Tensor::new([cout, cin, 3, 3], kernel)?);
    out.insert(fused.bias_name(), Tensor::vector(bias));
    Ok(out)
}

/// Fuses every RepConv in `module`.
pub fn fuse_all<M: Module>(module: &M, store: &ParamStore) -> Result<ParamStore> {
    let mut units = Vec::new();
    module.for_each_repconv(&mut |u| units.push(u));
    let mut out = store.clone();
    for u in units {
        out = fuse_repconv(u, &out)?;
    }
    Ok(out)
}

/// Switches every RepConv in `module` to `mode`.
pub fn set_mode<M: Module>(module: &mut M, mode: RepMode) {
    module.for_each_repconv_mut(&mut |u| u.mode = mode);
}

/// A `deploy` copy of `module` together with its fused parameters.
pub fn deploy<M: Module + Clone>(module: &M, store: &ParamStore) -> Result<(M, ParamStore)> {
    let fused = fuse_all(module, store)?;
    let mut m = module.clone();
    set_mode(&mut m, RepMode::Deploy);
    Ok((m, fused))
}

/// Sequential RepConv units; the first may change width, the rest keep it.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlock {
    pub name: String,
    pub units: Vec<RepConv>,
}

impl RepBlock {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(config_err(format!("{name}: RepBlock depth must be >= 1")));
        }
        let units = (0..depth)
            .map(|k| {
                let cin = if k == 0 { in_channels } else { out_channels };
                RepConv::new(join(name, &format!("unit{k}")), cin, out_channels)
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            units,
        })
    }

    /// Builds from explicit units, checking that widths chain.
    pub fn from_units(name: &str, units: Vec<RepConv>) -> Result<Self> {
        if units.is_empty() {
            return Err(config_err(format!(
                "{name}: RepBlock needs at least one unit"
            )));
        }
        for pair in units.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(config_err(format!(
                    "{name}: {} emits {} channels but {} expects {}",
                    pair[0].name, pair[0].out_channels, pair[1].name, pair[1].in_channels
                )));
            }
        }
        Ok(Self {
            name: name.to_string(),
            units,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.units[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.units.last().expect("non-empty").out_channels
    }

    pub fn depth(&self) -> usize {
        self.units.len()
    }

    pub fn forward<E: Exec>(&self, ex: &mut E, x: &E::Value) -> Result<E::Value> {
        let mut y = self.units[0].forward(ex, x)?;
        for u in &self.units[1..] {
            y = u.forward(ex, &y)?;
        }
        Ok(y)
    }
}

impl Module for RepBlock {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for u in &self.units {
            u.param_specs(out);
        }
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        self.units.iter().for_each(|u| f(u));
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        self.units.iter_mut().for_each(|u| f(u));
    }
}

unary_graph!(RepConv, RepBlock);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use crate::params::ParamSpecs;

    fn specs_of<M: Module>(m: &M) -> ParamSpecs {
        let mut v = Vec::new();
        m.param_specs(&mut v);
        ParamSpecs::new(v).unwrap()
    }

    fn identity_bn(store: &mut ParamStore, bn: &BatchNorm) {
        let c = bn.channels;
        let [g, b, m, v] = bn.stat_names();
        store.insert(g, Tensor::vector(vec![1.0; c]));
        store.insert(b, Tensor::vector(vec![0.0; c]));
        store.insert(m, Tensor::vector(vec![0.0; c]));
        store.insert(v, Tensor::vector(vec![1.0; c]));
    }

    fn input(c: usize) -> Tensor {
        Tensor::from_fn([1, c, 5, 5], |_, j, y, x| {
            ((j * 7 + y * 3 + x) % 11) as f32 / 3.0 - 1.5
        })
    }

    #[test]
    fn zero_branches_reduce_to_relu_of_2x() {
        let u = RepConv::new("u", 3, 3);
        let mut store = specs_of(&u).init(1);
        for cb in [u.dense(), u.pointwise()] {
            let w = store.get_mut(&cb.conv.weight_name()).unwrap();
            w.data_mut().fill(0.0);
            identity_bn(&mut store, &cb.bn);
        }
        identity_bn(&mut store, &u.identity().unwrap());
        let x = input(3);
        let y = u.forward(&mut Eager::new(&store), &x).unwrap();
        let expected = x.map(|v| (v / (1.0f32 + BN_EPS).sqrt()).max(0.0));
        assert!(y.max_abs_diff(&expected) <= 1e-6);
        // bn identity is 1/sqrt(1 + eps); against relu(2x) the gap stays tiny
        // only because both the dense and pointwise branches are zero here
        assert!(y.max_abs_diff(&x.map(|v| v.max(0.0))) <= 1e-4);
    }

    #[test]
    fn width_change_drops_identity() {
        let u = RepConv::new("u", 2, 4);
        assert!(u.identity().is_none());
        let store = specs_of(&u).init(2);
        let y = u.forward(&mut Eager::new(&store), &input(2)).unwrap();
        assert_eq!(y.dims(), [1, 4, 5, 5]);
    }

    #[test]
    fn deploy_before_fuse_is_a_state_error() {
        let mut u = RepConv::new("u", 2, 2);
        let store = specs_of(&u).init(3);
        u.mode = RepMode::Deploy;
        let err = u.forward(&mut Eager::new(&store), &input(2)).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn dense_only_fuses_to_its_own_kernel() {
        let u = RepConv::new("u", 2, 3);
        let mut store = specs_of(&u).init(4);
        identity_bn(&mut store, &u.dense().bn);
        identity_bn(&mut store, &u.pointwise().bn);
        store
            .get_mut(&u.pointwise().conv.weight_name())
            .unwrap()
            .data_mut()
            .fill(0.0);
        let fused = fuse_repconv(&u, &store).unwrap();
        let k = fused.get("u.fused.weight").unwrap();
        let scale = 1.0 / (1.0f32 + BN_EPS).sqrt();
        let expected = store
            .get(&u.dense().conv.weight_name())
            .unwrap()
            .map(|v| v * scale);
        assert!(k.max_abs_diff(&expected) <= 1e-7);
    }

    #[test]
    fn identity_only_fuses_to_dirac() {
        let u = RepConv::new("u", 3, 3);
        let mut store = specs_of(&u).init(5);
        for cb in [u.dense(), u.pointwise()] {
            store
                .get_mut(&cb.conv.weight_name())
                .unwrap()
                .data_mut()
                .fill(0.0);
            identity_bn(&mut store, &cb.bn);
        }
        let idb = u.identity().unwrap();
        identity_bn(&mut store, &idb);
        store.insert(
            idb.stat_names()[3].clone(),
            Tensor::vector(vec![1.0 - BN_EPS; 3]),
        );
        let fused = fuse_repconv(&u, &store).unwrap();
        let k = fused.get("u.fused.weight").unwrap();
        for oc in 0..3 {
            for ic in 0..3 {
                for t in 0..9 {
                    let want = if oc == ic && t == 4 { 1.0 } else { 0.0 };
                    assert_eq!(k.data()[(oc * 3 + ic) * 9 + t], want);
                }
            }
        }
    }

    #[test]
    fn fusing_twice_is_idempotent() {
        let u = RepConv::new("u", 4, 4);
        let store = specs_of(&u).init(6);
        let once = fuse_repconv(&u, &store).unwrap();
        let twice = fuse_repconv(&u, &once).unwrap();
        assert_eq!(once, twice);
        assert!(once.count("u.") < store.count("u."));
    }

    #[test]
    fn non_finite_stats_rejected() {
        let u = RepConv::new("u", 2, 2);
        let mut store = specs_of(&u).init(7);
        store.insert(
            "u.dense.bn.running_var",
            Tensor::vector(vec![f32::NAN, 1.0]),
        );
        assert!(matches!(fuse_repconv(&u, &store), Err(Error::Numerical(_))));
    }

    #[test]
    fn chaining_is_checked() {
        let units = vec![RepConv::new("a", 2, 4), RepConv::new("b", 3, 3)];
        assert!(RepBlock::from_units("blk", units).is_err());
        assert!(RepBlock::new("blk", 2, 4, 0).is_err());
    }
}
