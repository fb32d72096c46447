//! Neck assembly, the PAFPN baseline, and the toy detector used for
//! end-to-end training checks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{forward_traced, Exec, Graph};
use crate::error::{config_err, Error, Result};
use crate::gd_branches::{check_levels, high_fam, low_fam, FeaturePyramid, HighIfm, LowIfm};
use crate::inject_laf::{Inject, Laf, LafMerge};
use crate::layers::{Conv, ConvBn, Module};
use crate::params::{join, ParamSpec, ParamSpecs, ParamStore};
use crate::repconv::{RepBlock, RepConv};
use crate::tensor::{ConvSpec, Dims, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    N,
    S,
    M,
    L,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::N, Scale::S, Scale::M, Scale::L];

    /// Width multiplier applied to `(128, 256, 512, 1024)`.
    pub fn width(self) -> f64 {
        match self {
            Scale::N => 0.25,
            Scale::S => 0.5,
            Scale::M => 0.75,
            Scale::L => 1.0,
        }
    }

    pub fn transformer_depth(self) -> usize {
        match self {
            Scale::N | Scale::S => 2,
            Scale::M | Scale::L => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::N => "N",
            Scale::S => "S",
            Scale::M => "M",
            Scale::L => "L",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" => Ok(Scale::N),
            "S" | "s" => Ok(Scale::S),
            "M" | "m" => Ok(Scale::M),
            "L" | "l" => Ok(Scale::L),
            other => Err(config_err(format!(
                "unknown scale preset {other:?} (expected N, S, M or L)"
            ))),
        }
    }
}

/// Which gather-and-distribute components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Toggles {
    pub low_gd: bool,
    pub high_gd: bool,
    pub laf: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        low_gd: true,
        high_gd: true,
        laf: true,
    };
    pub const NONE: Toggles = Toggles {
        low_gd: false,
        high_gd: false,
        laf: false,
    };

    /// The five structure-ablation rows in display order.
    pub const TABLE: [Toggles; 5] = [
        Toggles {
            low_gd: true,
            high_gd: false,
            laf: false,
        },
        Toggles {
            low_gd: false,
            high_gd: true,
            laf: false,
        },
        Toggles {
            low_gd: false,
            high_gd: false,
            laf: true,
        },
        Toggles {
            low_gd: true,
            high_gd: true,
            laf: false,
        },
        Toggles {
            low_gd: true,
            high_gd: true,
            laf: true,
        },
    ];

    /// `"Low+High+LAF"` style label; `"none"` when everything is off.
    pub fn label(self) -> String {
        let parts: Vec<&str> = [
            (self.low_gd, "Low"),
            (self.high_gd, "High"),
            (self.laf, "LAF"),
        ]
        .into_iter()
        .filter_map(|(on, s)| on.then_some(s))
        .collect();
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Toggles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::NONE;
        if s.trim().eq_ignore_ascii_case("none") {
            return Ok(t);
        }
        for part in s.split('+') {
            let flag = match part.trim().to_ascii_lowercase().as_str() {
                "low" => &mut t.low_gd,
                "high" => &mut t.high_gd,
                "laf" => &mut t.laf,
                other => {
                    return Err(config_err(format!(
                        "unknown ablation component {other:?} in {s:?} (expected Low, High, LAF or none)"
                    )))
                }
            };
            if *flag {
                return Err(config_err(format!("ablation component repeated in {s:?}")));
            }
            *flag = true;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeckConfig {
    /// Preset the widths were derived from, if any.
    pub scale: Option<Scale>,
    /// `C_B2..C_B5`.
    pub channels: [usize; 4],
    pub low_mid: usize,
    /// Injection widths `(P3, P4)` of the low stage.
    pub low_splits: (usize, usize),
    /// Injection widths `(N4, N5)` of the high stage.
    pub high_splits: (usize, usize),
    pub repblock_depth: usize,
    pub transformer_depth: usize,
    pub key_dim: usize,
    pub heads: usize,
    pub embed_width: usize,
    pub enable_low_gd: bool,
    pub enable_high_gd: bool,
    pub enable_laf: bool,
    pub laf_merge: LafMerge,
    pub laf_reducer_relu: bool,
}

impl NeckConfig {
    /// Widths derived from `channels` by the default rules.
    pub fn from_channels(channels: [usize; 4]) -> Self {
        let [_, _, c4, c5] = channels;
        Self {
            scale: None,
            channels,
            low_mid: c4,
            low_splits: (c4, c5),
            high_splits: (c4, c5),
            repblock_depth: 3,
            transformer_depth: 2,
            key_dim: 16,
            heads: 4,
            embed_width: 2 * (c4 + c5),
            enable_low_gd: true,
            enable_high_gd: true,
            enable_laf: true,
            laf_merge: LafMerge::Concat,
            laf_reducer_relu: true,
        }
    }

    pub fn preset(scale: Scale) -> Self {
        let w = |base: usize| ((base as f64) * scale.width()).round() as usize;
        let mut cfg = Self::from_channels([w(128), w(256), w(512), w(1024)]);
        cfg.scale = Some(scale);
        cfg.low_mid = w(512);
        cfg.transformer_depth = scale.transformer_depth();
        cfg
    }

    /// Small widths for gradient checks and the toy trainer.
    pub fn micro() -> Self {
        let mut cfg = Self::from_channels([8, 16, 32, 64]);
        cfg.low_mid = 32;
        cfg.repblock_depth = 1;
        cfg.transformer_depth = 1;
        cfg.key_dim = 4;
        cfg.heads = 2;
        cfg.embed_width = 32;
        cfg
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            low_gd: self.enable_low_gd,
            high_gd: self.enable_high_gd,
            laf: self.enable_laf,
        }
    }

    pub fn with_toggles(mut self, t: Toggles) -> Self {
        self.enable_low_gd = t.low_gd;
        self.enable_high_gd = t.high_gd;
        self.enable_laf = t.laf;
        self
    }

    pub fn output_channels(&self) -> [usize; 3] {
        [self.channels[1], self.channels[2], self.channels[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels[0]", self.channels[0]),
            ("channels[1]", self.channels[1]),
            ("channels[2]", self.channels[2]),
            ("channels[3]", self.channels[3]),
            ("low_mid", self.low_mid),
            ("low_splits[0]", self.low_splits.0),
            ("low_splits[1]", self.low_splits.1),
            ("high_splits[0]", self.high_splits.0),
            ("high_splits[1]", self.high_splits.1),
            ("repblock_depth", self.repblock_depth),
            ("transformer_depth", self.transformer_depth),
            ("key_dim", self.key_dim),
            ("heads", self.heads),
            ("embed_width", self.embed_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// One level's LAF front end and injection; either may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub name: String,
    pub laf: Option<Laf>,
    pub inject: Option<Inject>,
}

impl Site {
    pub fn forward<E: Exec>(
        &self,
        ex: &mut E,
        local: &E::Value,
        finer: Option<&E::Value>,
        coarser: Option<&E::Value>,
        f_inj: Option<&E::Value>,
    ) -> Result<E::Value> {
        let x = match &self.laf {
            Some(laf) => laf.forward(ex, local, finer, coarser)?,
            None => local.clone(),
        };
        match (&self.inject, f_inj) {
            (Some(inj), Some(g)) => {
                let d = ex.dims(&x);
                inj.forward(ex, &x, g, (d[2], d[3]))
            }
            (Some(_), None) => Err(config_err(format!(
                "{}: injection enabled without global features",
                self.name
            ))),
            (None, _) => Ok(x),
        }
    }
}

impl Module for Site {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        if let Some(l) = &self.laf {
            l.param_specs(out);
        }
        if let Some(i) = &self.inject {
            i.param_specs(out);
        }
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        if let Some(i) = &self.inject {
            i.for_each_repconv(f)
        }
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        if let Some(i) = &mut self.inject {
            i.for_each_repconv_mut(f)
        }
    }
}

/// Gather-and-distribute neck: `[B2, B3, B4, B5] -> [N3, N4, N5]`.
///
/// P5 is B5 unchanged and N3 is P3 unchanged. A disabled branch leaves its
/// levels to LAF alone (when enabled) or passes them through.
#[derive(Debug, Clone, PartialEq)]
pub struct GdNeck {
    pub name: String,
    pub cfg: NeckConfig,
    pub low_ifm: Option<LowIfm>,
    pub high_ifm: Option<HighIfm>,
    pub p3: Site,
    pub p4: Site,
    pub n4: Site,
    pub n5: Site,
}

impl GdNeck {
    pub fn new(name: &str, cfg: &NeckConfig) -> Result<Self> {
        cfg.validate()?;
        let [c2, c3, c4, c5] = cfg.channels;
        let depth = cfg.repblock_depth;
        let merge = cfg.laf_merge;
        let relu = cfg.laf_reducer_relu;
        let low_on = cfg.enable_low_gd;
        let high_on = cfg.enable_high_gd;
        let laf_on = cfg.enable_laf;

        let site = |level: &str, laf: Option<Laf>, inject: Option<Inject>| Site {
            name: join(name, level),
            laf,
            inject,
        };
        let n = |level: &str, part: &str| join(&join(name, level), part);

        let p3 = site(
            "p3",
            laf_on.then(|| Laf::low(&n("p3", "laf"), "P3", c2, c3, c4, merge, relu)),
            if low_on {
                Some(Inject::new(
                    &n("p3", "inject"),
                    c3,
                    cfg.low_splits.0,
                    c3,
                    depth,
                )?)
            } else {
                None
            },
        );
        let p4 = site(
            "p4",
            laf_on.then(|| Laf::low(&n("p4", "laf"), "P4", c3, c4, c5, merge, relu)),
            if low_on {
                Some(Inject::new(
                    &n("p4", "inject"),
                    c4,
                    cfg.low_splits.1,
                    c4,
                    depth,
                )?)
            } else {
                None
            },
        );
        let n4 = site(
            "n4",
            laf_on.then(|| Laf::high(&n("n4", "laf"), "N4", c3, c4, merge, relu)),
            if high_on {
                Some(Inject::new(
                    &n("n4", "inject"),
                    c4,
                    cfg.high_splits.0,
                    c4,
                    depth,
                )?)
            } else {
                None
            },
        );
        let n5 = site(
            "n5",
            laf_on.then(|| Laf::high(&n("n5", "laf"), "N5", c4, c5, merge, relu)),
            if high_on {
                Some(Inject::new(
                    &n("n5", "inject"),
                    c5,
                    cfg.high_splits.1,
                    c5,
                    depth,
                )?)
            } else {
                None
            },
        );
        let low_ifm = if low_on {
            Some(LowIfm::new(
                &join(name, "low_ifm"),
                c2 + c3 + c4 + c5,
                cfg.low_mid,
                depth,
                cfg.low_splits,
            )?)
        } else {
            None
        };
        let high_ifm = if high_on {
            Some(HighIfm::new(
                &join(name, "high_ifm"),
                c3 + c4 + c5,
                cfg.embed_width,
                cfg.transformer_depth,
                cfg.heads,
                cfg.key_dim,
                cfg.high_splits,
            )?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            cfg: cfg.clone(),
            low_ifm,
            high_ifm,
            p3,
            p4,
            n4,
            n5,
        })
    }

    fn check_inputs<E: Exec>(&self, ex: &E, b: &[E::Value]) -> Result<()> {
        const NAMES: [&str; 4] = ["B2", "B3", "B4", "B5"];
        if b.len() != 4 {
            return Err(config_err(format!(
                "{}: expected 4 levels B2..B5, got {}",
                self.name,
                b.len()
            )));
        }
        let dims: Vec<Dims> = b.iter().map(|v| ex.dims(v)).collect();
        for (k, d) in dims.iter().enumerate() {
            if d[1] != self.cfg.channels[k] {
                return Err(config_err(format!(
                    "{}: {} has {} channels, config expects {}",
                    self.name, NAMES[k], d[1], self.cfg.channels[k]
                )));
            }
        }
        check_levels(&dims, &NAMES)
    }

    /// Runs the neck and returns `[P3, P4, P5, N3, N4, N5]`.
    pub fn forward_all<E: Exec>(&self, ex: &mut E, b: &[E::Value]) -> Result<Vec<E::Value>> {
        self.check_inputs(ex, b)?;
        let (i3, i4) = match &self.low_ifm {
            Some(ifm) => {
                ex.enter_scope(&join(&self.name, "low_fam"));
                let f = low_fam(ex, b);
                ex.exit_scope();
                let (a, c) = ifm.forward(ex, &f?)?;
                (Some(a), Some(c))
            }
            None => (None, None),
        };
        let p3 = self
            .p3
            .forward(ex, &b[1], Some(&b[0]), Some(&b[2]), i3.as_ref())?;
        let p4 = self
            .p4
            .forward(ex, &b[2], Some(&b[1]), Some(&b[3]), i4.as_ref())?;
        let p5 = b[3].clone();
        let (j4, j5) = match &self.high_ifm {
            Some(ifm) => {
                ex.enter_scope(&join(&self.name, "high_fam"));
                let f = high_fam(ex, &[p3.clone(), p4.clone(), p5.clone()]);
                ex.exit_scope();
                let (a, c) = ifm.forward(ex, &f?)?;
                (Some(a), Some(c))
            }
            None => (None, None),
        };
        let n4 = self.n4.forward(ex, &p4, Some(&p3), None, j4.as_ref())?;
        let n5 = self.n5.forward(ex, &p5, Some(&p4), None, j5.as_ref())?;
        let n3 = p3.clone();
        Ok(vec![p3, p4, p5, n3, n4, n5])
    }

    /// Eager forward over a tensor pyramid `{B2..B5}`.
    pub fn forward_pyramid(
        &self,
        pyramid: &FeaturePyramid,
        store: &ParamStore,
    ) -> Result<FeaturePyramid> {
        let out = crate::autodiff::forward_eager(self, &pyramid.tensors(), store)?;
        FeaturePyramid::new(
            ["N3", "N4", "N5"]
                .iter()
                .map(|s| s.to_string())
                .zip(out)
                .collect(),
        )
    }
}

impl Graph for GdNeck {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let mut all = self.forward_all(ex, inputs)?;
        Ok(all.split_off(3))
    }
}

impl Module for GdNeck {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        if let Some(m) = &self.low_ifm {
            m.param_specs(out);
        }
        if let Some(m) = &self.high_ifm {
            m.param_specs(out);
        }
        for s in [&self.p3, &self.p4, &self.n4, &self.n5] {
            s.param_specs(out);
        }
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        if let Some(m) = &self.low_ifm {
            m.for_each_repconv(f);
        }
        for s in [&self.p3, &self.p4, &self.n4, &self.n5] {
            s.for_each_repconv(f);
        }
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        if let Some(m) = &mut self.low_ifm {
            m.for_each_repconv_mut(f);
        }
        for s in [&mut self.p3, &mut self.p4, &mut self.n4, &mut self.n5] {
            s.for_each_repconv_mut(f);
        }
    }
}

/// Top-down then bottom-up adjacent-level fusion:
/// `[B2, B3, B4, B5] -> [N3, N4, N5]`. B2 is not used. A single-level input
/// is returned unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Pafpn {
    pub name: String,
    pub channels: [usize; 4],
    pub lat5: ConvBn,
    pub td4: RepBlock,
    pub lat4: ConvBn,
    pub td3: RepBlock,
    pub down3: ConvBn,
    pub bu4: RepBlock,
    pub down4: ConvBn,
    pub bu5: RepBlock,
}

impl Pafpn {
    pub fn new(name: &str, channels: [usize; 4], depth: usize) -> Result<Self> {
        let [_, c3, c4, c5] = channels;
        let n = |s: &str| join(name, s);
        Ok(Self {
            name: name.to_string(),
            channels,
            lat5: ConvBn::relu(&n("lat5"), ConvSpec::new(c5, c4, 1)),
            td4: RepBlock::new(&n("td4"), 2 * c4, c4, depth)?,
            lat4: ConvBn::relu(&n("lat4"), ConvSpec::new(c4, c3, 1)),
            td3: RepBlock::new(&n("td3"), 2 * c3, c3, depth)?,
            down3: ConvBn::relu(&n("down3"), ConvSpec::new(c3, c3, 2).stride(2)),
            bu4: RepBlock::new(&n("bu4"), 2 * c3, c4, depth)?,
            down4: ConvBn::relu(&n("down4"), ConvSpec::new(c4, c4, 2).stride(2)),
            bu5: RepBlock::new(&n("bu5"), 2 * c4, c5, depth)?,
        })
    }

    pub fn from_config(name: &str, cfg: &NeckConfig) -> Result<Self> {
        cfg.validate()?;
        Self::new(name, cfg.channels, cfg.repblock_depth)
    }

    /// Name prefix of the level-4 top-down merge, the only route from B5 to
    /// N3.
    pub fn td4_prefix(&self) -> String {
        format!("{}.", self.td4.name)
    }
}

impl Graph for Pafpn {
    fn forward<E: Exec>(&self, ex: &mut E, b: &[E::Value]) -> Result<Vec<E::Value>> {
        if b.len() == 1 {
            return Ok(b.to_vec());
        }
        const NAMES: [&str; 4] = ["B2", "B3", "B4", "B5"];
        if b.len() != 4 {
            return Err(config_err(format!(
                "{}: expected 4 levels B2..B5, got {}",
                self.name,
                b.len()
            )));
        }
        let dims: Vec<Dims> = b.iter().map(|v| ex.dims(v)).collect();
        check_levels(&dims, &NAMES)?;
        let size = |k: usize| (dims[k][2], dims[k][3]);
        ex.enter_scope(&self.name);
        let out = (|| {
            let lat5 = self.lat5.forward(ex, &b[3])?;
            let up5 = ex.resize_to(&lat5, size(2))?;
            let cat = ex.concat_channels(&[up5, b[2].clone()])?;
            let td4 = self.td4.forward(ex, &cat)?;
            let lat4 = self.lat4.forward(ex, &td4)?;
            let up4 = ex.resize_to(&lat4, size(1))?;
            let cat = ex.concat_channels(&[up4, b[1].clone()])?;
            let n3 = self.td3.forward(ex, &cat)?;
            let d3 = self.down3.forward(ex, &n3)?;
            let cat = ex.concat_channels(&[d3, lat4])?;
            let n4 = self.bu4.forward(ex, &cat)?;
            let d4 = self.down4.forward(ex, &n4)?;
            let cat = ex.concat_channels(&[d4, lat5])?;
            let n5 = self.bu5.forward(ex, &cat)?;
            Ok(vec![n3, n4, n5])
        })();
        ex.exit_scope();
        out
    }
}

impl Module for Pafpn {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.lat5.param_specs(out);
        self.td4.param_specs(out);
        self.lat4.param_specs(out);
        self.td3.param_specs(out);
        self.down3.param_specs(out);
        self.bu4.param_specs(out);
        self.down4.param_specs(out);
        self.bu5.param_specs(out);
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        for b in [&self.td4, &self.td3, &self.bu4, &self.bu5] {
            b.for_each_repconv(f);
        }
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        for b in [&mut self.td4, &mut self.td3, &mut self.bu4, &mut self.bu5] {
            b.for_each_repconv_mut(f);
        }
    }
}

/// Five stride-2 2x2 conv+bn+relu stages; stages 2..5 emit B2..B5 at
/// strides 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub name: String,
    pub stem: ConvBn,
    pub stages: Vec<ConvBn>,
}

impl ToyBackbone {
    pub fn new(name: &str, in_channels: usize, channels: [usize; 4]) -> Self {
        let stem_c = (channels[0] / 2).max(1);
        let stem = ConvBn::relu(
            &join(name, "stem"),
            ConvSpec::new(in_channels, stem_c, 2).stride(2),
        );
        let mut prev = stem_c;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let s = ConvBn::relu(
                    &join(name, &format!("stage{}", k + 2)),
                    ConvSpec::new(prev, c, 2).stride(2),
                );
                prev = c;
                s
            })
            .collect();
        Self {
            name: name.to_string(),
            stem,
            stages,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.stem.spec().in_channels
    }
}

impl Graph for ToyBackbone {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let [image] = inputs else {
            return Err(config_err(format!(
                "{}: expected one image input",
                self.name
            )));
        };
        let d = ex.dims(image);
        if d[1] != self.in_channels() {
            return Err(config_err(format!(
                "{}: image has {} channels, expected {}",
                self.name,
                d[1],
                self.in_channels()
            )));
        }
        if d[2] % 32 != 0 || d[3] % 32 != 0 {
            return Err(config_err(format!(
                "{}: image size {}x{} is not divisible by 32",
                self.name, d[2], d[3]
            )));
        }
        ex.enter_scope(&self.name);
        let out = (|| {
            let mut x = self.stem.forward(ex, image)?;
            let mut levels = Vec::with_capacity(4);
            for s in &self.stages {
                x = s.forward(ex, &x)?;
                levels.push(x.clone());
            }
            Ok(levels)
        })();
        ex.exit_scope();
        out
    }
}

impl Module for ToyBackbone {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.stem.param_specs(out);
        for s in &self.stages {
            s.param_specs(out);
        }
    }
}

/// Per-level 1x1 convolutions to class logits and 4 box values.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHead {
    pub name: String,
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

/// Per-level `(class_logits, boxes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub levels: Vec<(Tensor, Tensor)>,
}

impl DetectorOutput {
    /// Splits a flat `[cls, box, cls, box, ...]` list.
    pub fn from_flat(flat: Vec<Tensor>) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(config_err(
                "detector outputs must come in (class, box) pairs",
            ));
        }
        let mut it = flat.into_iter();
        let mut levels = Vec::new();
        while let (Some(c), Some(b)) = (it.next(), it.next()) {
            levels.push((c, b));
        }
        Ok(Self { levels })
    }
}

impl ToyHead {
    pub fn new(name: &str, channels: &[usize], num_classes: usize) -> Self {
        Self {
            name: name.to_string(),
            channels: channels.to_vec(),
            num_classes,
        }
    }

    pub fn cls(&self, k: usize) -> Conv {
        Conv::new(
            join(&self.name, &format!("cls{k}")),
            ConvSpec::new(self.channels[k], self.num_classes, 1).with_bias(true),
        )
    }

    pub fn reg(&self, k: usize) -> Conv {
        Conv::new(
            join(&self.name, &format!("box{k}")),
            ConvSpec::new(self.channels[k], 4, 1).with_bias(true),
        )
    }
}

impl Graph for ToyHead {
    /// Returns `[cls_0, box_0, cls_1, box_1, ...]`.
    fn forward<E: Exec>(&self, ex: &mut E, levels: &[E::Value]) -> Result<Vec<E::Value>> {
        if levels.len() != self.channels.len() {
            return Err(config_err(format!(
                "{}: expected {} levels, got {}",
                self.name,
                self.channels.len(),
                levels.len()
            )));
        }
        ex.enter_scope(&self.name);
        let out = (|| {
            let mut out = Vec::with_capacity(2 * levels.len());
            for (k, x) in levels.iter().enumerate() {
                out.push(self.cls(k).forward(ex, x)?);
                out.push(self.reg(k).forward(ex, x)?);
            }
            Ok(out)
        })();
        ex.exit_scope();
        out
    }
}

impl Module for ToyHead {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        for k in 0..self.channels.len() {
            self.cls(k).param_specs(out);
            self.reg(k).param_specs(out);
        }
    }
}

/// Backbone, neck and head: image in, `[cls, box]` per level out.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub backbone: ToyBackbone,
    pub neck: GdNeck,
    pub head: ToyHead,
}

impl Detector {
    pub fn new(cfg: &NeckConfig, num_classes: usize) -> Result<Self> {
        let neck = GdNeck::new("neck", cfg)?;
        Ok(Self {
            backbone: ToyBackbone::new("backbone", 3, cfg.channels),
            head: ToyHead::new("head", &cfg.output_channels(), num_classes),
            neck,
        })
    }
}

impl Graph for Detector {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let b = self.backbone.forward(ex, inputs)?;
        let n = self.neck.forward(ex, &b)?;
        self.head.forward(ex, &n)
    }
}

impl Module for Detector {
    fn param_specs(&self, out: &mut Vec<ParamSpec>) {
        self.backbone.param_specs(out);
        self.neck.param_specs(out);
        self.head.param_specs(out);
    }

    fn for_each_repconv<'a>(&'a self, f: &mut dyn FnMut(&'a RepConv)) {
        self.neck.for_each_repconv(f)
    }

    fn for_each_repconv_mut(&mut self, f: &mut dyn FnMut(&mut RepConv)) {
        self.neck.for_each_repconv_mut(f)
    }
}

/// Targets for one output level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    /// `(n, 1, h, w)`, 1 at cells holding a square centre.
    pub objectness: Tensor,
    /// `(n, 4, h, w)`: centre offset within the cell and size relative to
    /// the image.
    pub boxes: Tensor,
    /// `(n, 4, h, w)`, 1 at positive cells.
    pub mask: Tensor,
}

/// Images with bright axis-aligned squares on a dark noisy background.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareDataset {
    pub images: Tensor,
    pub levels: Vec<LevelTargets>,
    /// `(x0, y0, side)` per image.
    pub squares: Vec<Vec<(usize, usize, usize)>>,
}

pub const TOY_STRIDES: [usize; 3] = [8, 16, 32];

impl SquareDataset {
    pub fn generate(count: usize, size: usize, seed: u64) -> Result<Self> {
        if count == 0 || size == 0 || size % 32 != 0 {
            return Err(config_err(format!(
                "square dataset needs count >= 1 and a size divisible by 32 (count {count}, size {size})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Tensor::zeros([count, 3, size, size]);
        let mut squares = Vec::with_capacity(count);
        for i in 0..count {
            let k = rng.random_range(1..=2usize);
            let mut sq = Vec::with_capacity(k);
            for _ in 0..k {
                let side = rng.random_range(size / 8..=size / 3);
                let x0 = rng.random_range(0..=size - side);
                let y0 = rng.random_range(0..=size - side);
                sq.push((x0, y0, side));
            }
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let inside = sq
                            .iter()
                            .any(|&(x0, y0, s)| x >= x0 && x < x0 + s && y >= y0 && y < y0 + s);
                        let v = if inside {
                            1.0
                        } else {
                            rng.random_range(-0.1..0.1)
                        };
                        let idx = images.index(i, c, y, x);
                        images.data_mut()[idx] = v;
                    }
                }
            }
            squares.push(sq);
        }
        let levels = TOY_STRIDES
            .iter()
            .map(|&stride| {
                let g = size / stride;
                let mut obj = Tensor::zeros([count, 1, g, g]);
                let mut boxes = Tensor::zeros([count, 4, g, g]);
                let mut mask = Tensor::zeros([count, 4, g, g]);
                for (i, sq) in squares.iter().enumerate() {
                    for &(x0, y0, s) in sq {
                        let cx = x0 as f32 + s as f32 / 2.0;
                        let cy = y0 as f32 + s as f32 / 2.0;
                        let gx = ((cx / stride as f32) as usize).min(g - 1);
                        let gy = ((cy / stride as f32) as usize).min(g - 1);
                        let o = obj.index(i, 0, gy, gx);
                        obj.data_mut()[o] = 1.0;
                        let vals = [
                            cx / stride as f32 - gx as f32,
                            cy / stride as f32 - gy as f32,
                            s as f32 / size as f32,
                            s as f32 / size as f32,
                        ];
                        for (c, v) in vals.into_iter().enumerate() {
                            let j = boxes.index(i, c, gy, gx);
                            boxes.data_mut()[j] = v;
                            mask.data_mut()[j] = 1.0;
                        }
                    }
                }
                LevelTargets {
                    objectness: obj,
                    boxes,
                    mask,
                }
            })
            .collect();
        Ok(Self {
            images,
            levels,
            squares,
        })
    }

    /// `[image, obj_0, box_0, mask_0, obj_1, ...]`, the input layout of
    /// [`ToyLoss`].
    pub fn loss_inputs(&self) -> Vec<Tensor> {
        let mut v = vec![self.images.clone()];
        for l in &self.levels {
            v.extend([l.objectness.clone(), l.boxes.clone(), l.mask.clone()]);
        }
        v
    }
}

/// Mean objectness BCE plus masked L1 box error, summed over levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLoss {
    pub detector: Detector,
}

impl Graph for ToyLoss {
    fn forward<E: Exec>(&self, ex: &mut E, inputs: &[E::Value]) -> Result<Vec<E::Value>> {
        let levels = self.detector.head.channels.len();
        if inputs.len() != 1 + 3 * levels {
            return Err(config_err(format!(
                "toy loss expects an image and {levels} target triples, got {} inputs",
                inputs.len()
            )));
        }
        let out = self.detector.forward(ex, &inputs[..1])?;
        let mut total: Option<E::Value> = None;
        for k in 0..levels {
            let (obj, boxes, mask) = (&inputs[1 + 3 * k], &inputs[2 + 3 * k], &inputs[3 + 3 * k]);
            let bce = ex.bce_with_logits(&out[2 * k], obj)?;
            let cls = ex.mean_all(&bce)?;
            let diff = ex.sub(&out[2 * k + 1], boxes)?;
            let diff = ex.abs(&diff)?;
            let masked = ex.mul(&diff, mask)?;
            let l1 = ex.sum_all(&masked)?;
            let positives = ex.dims(mask);
            let count = positives[0] as f32;
            let l1 = ex.scale(&l1, 1.0 / count)?;
            let level = ex.add(&cls, &l1)?;
            total = Some(match total {
                None => level,
                Some(t) => ex.add(&t, &level)?,
            });
        }
        Ok(vec![total.expect("at least one level")])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            image_size: 32,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Loss before each update.
    pub losses: Vec<f32>,
    pub params: ParamStore,
}

/// Parameter names the trainer updates: everything except frozen
/// batchnorm statistics.
pub fn trainable(specs: &ParamSpecs) -> Vec<String> {
    specs
        .iter()
        .filter(|s| !s.frozen)
        .map(|s| s.name.clone())
        .collect()
}

/// SGD with momentum on the toy detector over a fixed synthetic batch.
pub fn toy_train(neck: &NeckConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    if train.lr < 0.0 || !train.lr.is_finite() || !(0.0..1.0).contains(&train.momentum) {
        return Err(config_err(format!(
            "train.lr must be finite and >= 0 and train.momentum in [0, 1) (lr {}, momentum {})",
            train.lr, train.momentum
        )));
    }
    let loss = ToyLoss {
        detector: Detector::new(neck, 1)?,
    };
    let specs = loss.detector.specs()?;
    let mut params = specs.init(train.seed);
    let data = SquareDataset::generate(train.batch_size, train.image_size, train.seed ^ 0xda7a)?;
    let inputs = data.loss_inputs();
    let names = trainable(&specs);
    let mut velocity: Vec<Tensor> = names
        .iter()
        .map(|n| Tensor::zeros(specs.get(n).expect("spec").dims))
        .collect();
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let traced = forward_traced(&loss, &inputs, &params)?;
        let value = traced.output(0).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "toy training diverged at step {step}: loss {value}"
            )));
        }
        losses.push(value);
        let grads = traced.backward()?;
        drop(traced);
        for (name, v) in names.iter().zip(velocity.iter_mut()) {
            let g = grads.get(name).expect("gradient for every parameter");
            let p = params.get_mut(name).expect("parameter");
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = train.momentum * *vi + gi;
                *pi -= train.lr * *vi;
            }
        }
    }
    Ok(TrainOutcome { losses, params })
}
