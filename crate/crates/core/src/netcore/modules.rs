//! Module tree: convolution units, the seven block kinds and the six
//! interaction variants. Modules describe structure and reference their
//! parameters by id; weights live separately in [`super::ops::Weights`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ConvGeometry, Real, Shape, Tensor};

use super::ops::{Ops, Weights};
use super::{BlockKind, InteractionKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Collects parameter and buffer definitions while a module tree is built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    pub params: Vec<ParamDef>,
    pub buffers: Vec<ParamDef>,
}

impl Registry {
    fn param(&mut self, name: String, shape: Shape, init: Init) -> ParamId {
        self.params.push(ParamDef { name, shape, init });
        ParamId(self.params.len() - 1)
    }

    fn buffer(&mut self, name: String, shape: Shape, value: f64) -> usize {
        self.buffers.push(ParamDef {
            name,
            shape,
            init: Init::Constant(value),
        });
        self.buffers.len() - 1
    }

    /// Registers a convolution (plus normalization) named `{prefix}/conv/...`.
    pub fn conv_unit(&mut self, prefix: &str, geometry: ConvGeometry, opts: UnitOpts) -> ConvUnit {
        let ws = geometry.weight_shape();
        let fan_in = ws.c * ws.h * ws.w;
        let weight = self.param(format!("{prefix}/conv/weight"), ws, Init::He { fan_in });
        let bias = opts.bias.then(|| {
            self.param(
                format!("{prefix}/conv/bias"),
                Shape::new(1, geometry.out_channels, 1, 1),
                Init::Constant(0.0),
            )
        });
        let norm = opts.norm.then(|| {
            let s = Shape::new(1, geometry.out_channels, 1, 1);
            Norm {
                gamma: self.param(format!("{prefix}/norm/weight"), s, Init::Constant(1.0)),
                beta: self.param(format!("{prefix}/norm/bias"), s, Init::Constant(0.0)),
                mean: self.buffer(format!("{prefix}/norm/mean"), s, 0.0),
                var: self.buffer(format!("{prefix}/norm/var"), s, 1.0),
            }
        });
        ConvUnit {
            name: prefix.to_string(),
            geometry,
            weight,
            bias,
            norm,
            relu: opts.relu,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.shape.numel()).sum()
    }

    /// Deterministic initial weights: every tensor is drawn in registry order
    /// from one seeded stream.
    pub fn init_weights<T: Real>(&self, seed: u64) -> Weights<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |d: &ParamDef, rng: &mut ChaCha8Rng| -> Tensor<T> {
            match d.init {
                Init::Constant(v) => Tensor::full(d.shape, T::from_f64(v)),
                Init::He { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    let data = (0..d.shape.numel())
                        .map(|_| T::from_f64(normal.sample(rng)))
                        .collect();
                    Tensor::from_vec(d.shape, data)
                }
            }
        };
        Weights {
            params: self.params.iter().map(|d| make(d, &mut rng)).collect(),
            buffers: self.buffers.iter().map(|d| make(d, &mut rng)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UnitOpts {
    pub bias: bool,
    pub norm: bool,
    pub relu: bool,
}

impl UnitOpts {
    /// conv + norm + ReLU
    pub const CBR: UnitOpts = UnitOpts {
        bias: false,
        norm: true,
        relu: true,
    };
    /// conv + norm
    pub const CB: UnitOpts = UnitOpts {
        bias: false,
        norm: true,
        relu: false,
    };
    /// plain conv with bias
    pub const LINEAR: UnitOpts = UnitOpts {
        bias: true,
        norm: false,
        relu: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: usize,
    pub var: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub geometry: ConvGeometry,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub norm: Option<Norm>,
    pub relu: bool,
}

pub fn geometry(cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding: kernel / 2,
        groups,
    }
}

/// One convolutional block of a stage.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    /// 3x3 conv + norm + ReLU.
    Conv3x3 { unit: ConvUnit },
    /// Depthwise 3x3 then pointwise 1x1, each normalized and rectified.
    SepConv3x3 { depthwise: ConvUnit, pointwise: ConvUnit },
    /// Two 3x3 convs with a shortcut.
    Residual {
        name: String,
        first: ConvUnit,
        second: ConvUnit,
        shortcut: Option<ConvUnit>,
    },
    /// 1x1 reduce, 3x3, 1x1 expand with a shortcut.
    Bottleneck {
        name: String,
        reduce: ConvUnit,
        conv: ConvUnit,
        expand: ConvUnit,
        shortcut: Option<ConvUnit>,
    },
    /// Channel-split unit with a depthwise branch and channel shuffle.
    Shuffle {
        name: String,
        /// `None` for the split (stride 1, equal width) variant.
        left: Option<[ConvUnit; 2]>,
        right: [ConvUnit; 3],
        in_channels: usize,
        out_channels: usize,
    },
    /// 1x1 expansion, depthwise 3x3, linear 1x1 projection.
    InvertedResidual {
        name: String,
        expand: ConvUnit,
        depthwise: ConvUnit,
        project: ConvUnit,
        residual: bool,
    },
    /// Half the outputs from a 1x1 conv, the other half from a cheap depthwise
    /// conv over them.
    Ghost {
        name: String,
        down: Option<ConvUnit>,
        primary: ConvUnit,
        cheap: ConvUnit,
        out_channels: usize,
    },
}

/// Expansion factor of inverted residual blocks.
pub const INVERTED_EXPANSION: usize = 6;

impl Block {
    pub fn build(
        reg: &mut Registry,
        kind: BlockKind,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Block {
        let p = |s: &str| format!("{prefix}/{s}");
        let shortcut = |reg: &mut Registry| {
            (stride != 1 || cin != cout)
                .then(|| reg.conv_unit(&p("shortcut"), geometry(cin, cout, 1, stride, 1), UnitOpts::CB))
        };
        match kind {
            BlockKind::Conv3x3 => Block::Conv3x3 {
                unit: reg.conv_unit(prefix, geometry(cin, cout, 3, stride, 1), UnitOpts::CBR),
            },
            BlockKind::SepConv3x3 => Block::SepConv3x3 {
                depthwise: reg.conv_unit(&p("dw"), geometry(cin, cin, 3, stride, cin), UnitOpts::CBR),
                pointwise: reg.conv_unit(&p("pw"), geometry(cin, cout, 1, 1, 1), UnitOpts::CBR),
            },
            BlockKind::Residual => Block::Residual {
                name: prefix.to_string(),
                first: reg.conv_unit(&p("conv1"), geometry(cin, cout, 3, stride, 1), UnitOpts::CBR),
                second: reg.conv_unit(&p("conv2"), geometry(cout, cout, 3, 1, 1), UnitOpts::CB),
                shortcut: shortcut(reg),
            },
            BlockKind::Bottleneck => {
                let mid = (cout / 4).max(1);
                Block::Bottleneck {
                    name: prefix.to_string(),
                    reduce: reg.conv_unit(&p("reduce"), geometry(cin, mid, 1, 1, 1), UnitOpts::CBR),
                    conv: reg.conv_unit(&p("conv"), geometry(mid, mid, 3, stride, 1), UnitOpts::CBR),
                    expand: reg.conv_unit(&p("expand"), geometry(mid, cout, 1, 1, 1), UnitOpts::CB),
                    shortcut: shortcut(reg),
                }
            }
            BlockKind::ShuffleUnit => {
                let split = stride == 1 && cin == cout;
                let half = cout / 2;
                let (right_in, right_out) = if split { (cin - cin / 2, cout - cout / 2) } else { (cin, cout - half) };
                let left = (!split).then(|| {
                    [
                        reg.conv_unit(&p("left_dw"), geometry(cin, cin, 3, stride, cin), UnitOpts::CB),
                        reg.conv_unit(&p("left_pw"), geometry(cin, half, 1, 1, 1), UnitOpts::CBR),
                    ]
                });
                let right = [
                    reg.conv_unit(&p("right_pw1"), geometry(right_in, right_out, 1, 1, 1), UnitOpts::CBR),
                    reg.conv_unit(
                        &p("right_dw"),
                        geometry(right_out, right_out, 3, stride, right_out),
                        UnitOpts::CB,
                    ),
                    reg.conv_unit(&p("right_pw2"), geometry(right_out, right_out, 1, 1, 1), UnitOpts::CBR),
                ];
                Block::Shuffle {
                    name: prefix.to_string(),
                    left,
                    right,
                    in_channels: cin,
                    out_channels: cout,
                }
            }
            BlockKind::InvertedResidual => {
                let hidden = cin * INVERTED_EXPANSION;
                Block::InvertedResidual {
                    name: prefix.to_string(),
                    expand: reg.conv_unit(&p("expand"), geometry(cin, hidden, 1, 1, 1), UnitOpts::CBR),
                    depthwise: reg.conv_unit(
                        &p("dw"),
                        geometry(hidden, hidden, 3, stride, hidden),
                        UnitOpts::CBR,
                    ),
                    project: reg.conv_unit(&p("project"), geometry(hidden, cout, 1, 1, 1), UnitOpts::CB),
                    residual: stride == 1 && cin == cout,
                }
            }
            BlockKind::GhostModule => {
                let down = (stride != 1)
                    .then(|| reg.conv_unit(&p("down"), geometry(cin, cin, 3, stride, cin), UnitOpts::CB));
                let init = cout.div_ceil(2);
                Block::Ghost {
                    name: prefix.to_string(),
                    down,
                    primary: reg.conv_unit(&p("primary"), geometry(cin, init, 1, 1, 1), UnitOpts::CBR),
                    cheap: reg.conv_unit(&p("cheap"), geometry(init, init, 3, 1, init), UnitOpts::CBR),
                    out_channels: cout,
                }
            }
        }
    }

    pub fn forward<O: Ops>(&self, ops: &mut O, x: &O::Value) -> O::Value {
        match self {
            Block::Conv3x3 { unit } => ops.conv_unit(unit, x),
            Block::SepConv3x3 { depthwise, pointwise } => {
                let y = ops.conv_unit(depthwise, x);
                ops.conv_unit(pointwise, &y)
            }
            Block::Residual {
                name,
                first,
                second,
                shortcut,
            } => {
                let y = ops.conv_unit(first, x);
                let y = ops.conv_unit(second, &y);
                let s = match shortcut {
                    Some(u) => ops.conv_unit(u, x),
                    None => x.clone(),
                };
                let sum = ops.add(&format!("{name}/add"), &y, &s);
                ops.relu(&format!("{name}/relu"), &sum)
            }
            Block::Bottleneck {
                name,
                reduce,
                conv,
                expand,
                shortcut,
            } => {
                let y = ops.conv_unit(reduce, x);
                let y = ops.conv_unit(conv, &y);
                let y = ops.conv_unit(expand, &y);
                let s = match shortcut {
                    Some(u) => ops.conv_unit(u, x),
                    None => x.clone(),
                };
                let sum = ops.add(&format!("{name}/add"), &y, &s);
                ops.relu(&format!("{name}/relu"), &sum)
            }
            Block::Shuffle {
                name,
                left,
                right,
                in_channels,
                out_channels,
            } => {
                let (l, r_in) = match left {
                    None => {
                        let half = in_channels / 2;
                        let l = ops.select(&format!("{name}/split_left"), x, &(0..half).collect::<Vec<_>>());
                        let r = ops.select(
                            &format!("{name}/split_right"),
                            x,
                            &(half..*in_channels).collect::<Vec<_>>(),
                        );
                        (l, r)
                    }
                    Some([dw, pw]) => {
                        let l = ops.conv_unit(dw, x);
                        (ops.conv_unit(pw, &l), x.clone())
                    }
                };
                let mut r = r_in;
                for u in right {
                    r = ops.conv_unit(u, &r);
                }
                let cat = ops.concat(&format!("{name}/concat"), &[l, r]);
                ops.select(&format!("{name}/shuffle"), &cat, &shuffle_order(*out_channels, 2))
            }
            Block::InvertedResidual {
                name,
                expand,
                depthwise,
                project,
                residual,
            } => {
                let y = ops.conv_unit(expand, x);
                let y = ops.conv_unit(depthwise, &y);
                let y = ops.conv_unit(project, &y);
                if *residual {
                    ops.add(&format!("{name}/add"), &y, x)
                } else {
                    y
                }
            }
            Block::Ghost {
                name,
                down,
                primary,
                cheap,
                out_channels,
            } => {
                let x = match down {
                    Some(u) => ops.conv_unit(u, x),
                    None => x.clone(),
                };
                let a = ops.conv_unit(primary, &x);
                let b = ops.conv_unit(cheap, &a);
                let cat = ops.concat(&format!("{name}/concat"), &[a, b]);
                let out = *out_channels;
                if ops.shape_of(&cat).c == out {
                    cat
                } else {
                    ops.select(&format!("{name}/trim"), &cat, &(0..out).collect::<Vec<_>>())
                }
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Conv3x3 { unit } => unit.geometry.out_channels,
            Block::SepConv3x3 { pointwise, .. } => pointwise.geometry.out_channels,
            Block::Residual { second, .. } => second.geometry.out_channels,
            Block::Bottleneck { expand, .. } => expand.geometry.out_channels,
            Block::Shuffle { out_channels, .. } => *out_channels,
            Block::InvertedResidual { project, .. } => project.geometry.out_channels,
            Block::Ghost { out_channels, .. } => *out_channels,
        }
    }
}

/// Channel permutation that interleaves `groups` equal groups.
pub fn shuffle_order(channels: usize, groups: usize) -> Vec<usize> {
    let per = channels / groups;
    (0..channels).map(|i| (i % groups) * per + i / groups).collect()
}

/// One interaction module between a higher- and a lower-resolution path.
#[derive(Debug, Clone, PartialEq)]
pub enum Interaction {
    DirectA {
        name: String,
        transform: ConvUnit,
    },
    DirectB {
        name: String,
        transform: ConvUnit,
        fuse: ConvUnit,
    },
    AttentionA {
        name: String,
        transform_high: ConvUnit,
        transform_low: ConvUnit,
        attention_low: ConvUnit,
    },
    AttentionB {
        name: String,
        transform_high: ConvUnit,
        transform_low: ConvUnit,
        attention_high: ConvUnit,
        attention_low: ConvUnit,
    },
    BilateralA {
        name: String,
        low_to_high: ConvUnit,
        high_to_low: ConvUnit,
    },
    BilateralB {
        name: String,
    },
}

impl Interaction {
    /// `None` for [`InteractionKind::None`].
    pub fn build(reg: &mut Registry, kind: InteractionKind, prefix: &str, c: usize) -> Option<Interaction> {
        let p = |s: &str| format!("{prefix}/{s}");
        let name = prefix.to_string();
        let conv3 = geometry(c, c, 3, 1, 1);
        let conv1 = geometry(c, c, 1, 1, 1);
        let att = geometry(c, 1, 1, 1, 1);
        Some(match kind {
            InteractionKind::None => return None,
            InteractionKind::DirectA => Interaction::DirectA {
                name,
                transform: reg.conv_unit(&p("transform"), conv3, UnitOpts::CBR),
            },
            InteractionKind::DirectB => Interaction::DirectB {
                name,
                transform: reg.conv_unit(&p("transform"), conv3, UnitOpts::CBR),
                fuse: reg.conv_unit(&p("fuse"), geometry(2 * c, c, 1, 1, 1), UnitOpts::CBR),
            },
            InteractionKind::AttentionA => Interaction::AttentionA {
                name,
                transform_high: reg.conv_unit(&p("transform_high"), conv3, UnitOpts::CBR),
                transform_low: reg.conv_unit(&p("transform_low"), conv3, UnitOpts::CBR),
                attention_low: reg.conv_unit(&p("attention_low"), att, UnitOpts::LINEAR),
            },
            InteractionKind::AttentionB => Interaction::AttentionB {
                name,
                transform_high: reg.conv_unit(&p("transform_high"), conv3, UnitOpts::CBR),
                transform_low: reg.conv_unit(&p("transform_low"), conv3, UnitOpts::CBR),
                attention_high: reg.conv_unit(&p("attention_high"), att, UnitOpts::LINEAR),
                attention_low: reg.conv_unit(&p("attention_low"), att, UnitOpts::LINEAR),
            },
            InteractionKind::BilateralA => Interaction::BilateralA {
                name,
                low_to_high: reg.conv_unit(&p("low_to_high"), conv1, UnitOpts::CBR),
                high_to_low: reg.conv_unit(&p("high_to_low"), conv1, UnitOpts::CBR),
            },
            InteractionKind::BilateralB => Interaction::BilateralB { name },
        })
    }

    /// Exchanges features between `high` (larger) and `low` (smaller) maps.
    /// Each output keeps its input's shape.
    pub fn forward<O: Ops>(&self, ops: &mut O, high: &O::Value, low: &O::Value) -> (O::Value, O::Value) {
        let hs = ops.shape_of(high);
        let ls = ops.shape_of(low);
        match self {
            Interaction::DirectA { name, transform } => {
                let fl = ops.conv_unit(transform, low);
                let up = ops.resize(&format!("{name}/up"), &fl, hs.h, hs.w);
                (ops.add(&format!("{name}/add_high"), high, &up), fl)
            }
            Interaction::DirectB { name, transform, fuse } => {
                let fl = ops.conv_unit(transform, low);
                let up = ops.resize(&format!("{name}/up"), &fl, hs.h, hs.w);
                let cat = ops.concat(&format!("{name}/concat"), &[high.clone(), up]);
                (ops.conv_unit(fuse, &cat), fl)
            }
            Interaction::AttentionA {
                name,
                transform_high,
                transform_low,
                attention_low,
            } => {
                let fh = ops.conv_unit(transform_high, high);
                let fl = ops.conv_unit(transform_low, low);
                let logits = ops.conv_unit(attention_low, low);
                let att = ops.sigmoid(&format!("{name}/sigmoid_low"), &logits);
                let low_out = ops.mul(&format!("{name}/gate_low"), &fl, &att);
                let up = ops.resize(&format!("{name}/up"), &low_out, hs.h, hs.w);
                let inv = ops.one_minus(&format!("{name}/complement_low"), &att);
                let inv_up = ops.resize(&format!("{name}/up_gate"), &inv, hs.h, hs.w);
                let gated = ops.mul(&format!("{name}/gate_high"), &fh, &inv_up);
                (ops.add(&format!("{name}/add_high"), &up, &gated), low_out)
            }
            Interaction::AttentionB {
                name,
                transform_high,
                transform_low,
                attention_high,
                attention_low,
            } => {
                let fh = ops.conv_unit(transform_high, high);
                let fl = ops.conv_unit(transform_low, low);
                let att_l = {
                    let z = ops.conv_unit(attention_low, low);
                    ops.sigmoid(&format!("{name}/sigmoid_low"), &z)
                };
                let att_h = {
                    let z = ops.conv_unit(attention_high, high);
                    ops.sigmoid(&format!("{name}/sigmoid_high"), &z)
                };
                // high branch: gated by the low path's attention
                let lg = ops.mul(&format!("{name}/gate_low"), &fl, &att_l);
                let lg_up = ops.resize(&format!("{name}/up"), &lg, hs.h, hs.w);
                let inv_l = ops.one_minus(&format!("{name}/complement_low"), &att_l);
                let inv_l_up = ops.resize(&format!("{name}/up_gate"), &inv_l, hs.h, hs.w);
                let hg = ops.mul(&format!("{name}/gate_high_by_low"), &fh, &inv_l_up);
                let high_out = ops.add(&format!("{name}/add_high"), &lg_up, &hg);
                // low branch: gated by the high path's attention
                let hg2 = ops.mul(&format!("{name}/gate_high"), &fh, &att_h);
                let hg2_down = ops.resize(&format!("{name}/down"), &hg2, ls.h, ls.w);
                let inv_h = ops.one_minus(&format!("{name}/complement_high"), &att_h);
                let inv_h_down = ops.resize(&format!("{name}/down_gate"), &inv_h, ls.h, ls.w);
                let lg2 = ops.mul(&format!("{name}/gate_low_by_high"), &fl, &inv_h_down);
                let low_out = ops.add(&format!("{name}/add_low"), &hg2_down, &lg2);
                (high_out, low_out)
            }
            Interaction::BilateralA {
                name,
                low_to_high,
                high_to_low,
            } => {
                let fl = ops.conv_unit(low_to_high, low);
                let up = ops.resize(&format!("{name}/up"), &fl, hs.h, hs.w);
                let fh = ops.conv_unit(high_to_low, high);
                let down = ops.resize(&format!("{name}/down"), &fh, ls.h, ls.w);
                (
                    ops.add(&format!("{name}/add_high"), high, &up),
                    ops.add(&format!("{name}/add_low"), low, &down),
                )
            }
            Interaction::BilateralB { name } => {
                let up = ops.resize(&format!("{name}/up"), low, hs.h, hs.w);
                let down = ops.resize(&format!("{name}/down"), high, ls.h, ls.w);
                (
                    ops.add(&format!("{name}/add_high"), high, &up),
                    ops.add(&format!("{name}/add_low"), low, &down),
                )
            }
        }
    }
}
