//! Shared feature extractor: a stem plus three residual stages at an
//! effective stride of 8, emitting a two-level pyramid with per-level 1x1
//! channel compression.
//!
//! Spatial contract (the single source of truth for downstream shape math):
//! the stem and the first two stages each apply a 3x3 / stride-2 / pad-0
//! convolution, so one level maps `n -> (n - 3) / 2 + 1`; the third stage
//! keeps size with dilated 3x3 convolutions (pad = dilation). Hence
//! `127 -> 63 -> 31 -> 15` and `255 -> 127 -> 63 -> 31`, and both pyramid
//! levels (stage-2 and stage-3 outputs) share the final extent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Conv, ConvNormRelu, ConvSpec, Ctx, NodeId, Norm, NormalSampler, ParamGroup, ParamStore, Tensor,
};

/// Architecture hyperparameters. `tiny` is the desk-scale preset used by
/// the test suite; `full` mirrors a truncated ResNet-50 structurally.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    /// Channel count of both pyramid levels after 1x1 compression.
    pub compressed_channels: usize,
    /// Convolutions inside each residual unit (1 or 2).
    pub res_convs: usize,
    /// Dilation of the third stage (replaces its downsampling).
    pub dilation: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::tiny()
    }
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        BackboneConfig {
            stem_channels: 8,
            stage_channels: [12, 16, 24],
            compressed_channels: 16,
            res_convs: 1,
            dilation: 2,
        }
    }

    /// Full-scale preset: truncated-ResNet-50-like stages at 256
    /// compressed channels.
    pub fn full() -> Self {
        BackboneConfig {
            stem_channels: 64,
            stage_channels: [256, 512, 1024],
            compressed_channels: 256,
            res_convs: 2,
            dilation: 2,
        }
    }

    /// Small preset for finite-difference suites.
    pub fn gradcheck() -> Self {
        BackboneConfig {
            stem_channels: 3,
            stage_channels: [4, 6, 8],
            compressed_channels: 4,
            res_convs: 1,
            dilation: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0
            || self.stage_channels.iter().any(|&c| c == 0)
            || self.compressed_channels == 0
        {
            return Err(Error::InvalidConfig("backbone channels must be positive".into()));
        }
        if !(1..=2).contains(&self.res_convs) {
            return Err(Error::InvalidConfig("res_convs must be 1 or 2".into()));
        }
        if self.dilation == 0 {
            return Err(Error::InvalidConfig("dilation must be >= 1".into()));
        }
        if self.compressed_channels % 2 != 0 {
            return Err(Error::InvalidConfig(
                "compressed_channels must be even (the fusion bottleneck halves it)".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extent of the pyramid for a square input, if it fits.
    pub fn spatial_out(&self, input: usize) -> Option<usize> {
        let down = ConvSpec { kernel: 3, stride: 2, pad: 0, dilation: 1 };
        let s1 = down.out_extent(input)?;
        let s2 = down.out_extent(s1)?;
        down.out_extent(s2)
    }
}

/// Two same-sized feature maps inside a live graph.
#[derive(Debug, Clone, Copy)]
pub struct Pyramid {
    pub levels: [NodeId; 2],
    pub spatial: usize,
}

/// Graph-side 7x7 template features (both levels).
#[derive(Debug, Clone, Copy)]
pub struct Templates {
    pub levels: [NodeId; 2],
}

impl Templates {
    /// Copy template values out of the graph for storage across frames.
    pub fn detach(&self, ctx: &Ctx, tag: TemplateTag) -> TemplateSet {
        TemplateSet {
            levels: [
                ctx.g.value(self.levels[0]).clone(),
                ctx.g.value(self.levels[1]).clone(),
            ],
            tag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateTag {
    Initial,
    Update,
    Fused,
}

/// Detached per-level 7x7 template features.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub levels: [Tensor; 2],
    pub tag: TemplateTag,
}

impl TemplateSet {
    /// Re-insert stored template values into a graph as constants.
    pub fn insert(&self, ctx: &mut Ctx) -> Templates {
        Templates {
            levels: [
                ctx.constant(self.levels[0].clone()),
                ctx.constant(self.levels[1].clone()),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        self.levels[0].chw().0
    }
}

#[derive(Debug)]
struct ResUnit {
    convs: Vec<(Conv, Norm)>,
}

impl ResUnit {
    fn init(
        ps: &mut ParamStore,
        sampler: &mut NormalSampler,
        name: &str,
        channels: usize,
        n_convs: usize,
        spec: ConvSpec,
        group: ParamGroup,
    ) -> Self {
        let convs = (0..n_convs)
            .map(|i| {
                let cname = format!("{name}.conv{i}");
                (
                    Conv::init(ps, sampler, &cname, channels, channels, spec, false, group),
                    Norm::init(ps, &format!("{name}.norm{i}"), channels, group),
                )
            })
            .collect();
        ResUnit { convs }
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, (conv, norm)) in self.convs.iter().enumerate() {
            let c = conv.forward(ctx, h);
            h = norm.forward(ctx, c);
            if i + 1 < self.convs.len() {
                h = ctx.g.relu(h);
            }
        }
        let sum = ctx.g.add(x, h);
        ctx.g.relu(sum)
    }
}

#[derive(Debug)]
struct Stage {
    down: ConvNormRelu,
    res: ResUnit,
}

/// The feature extractor. Parameter groups: stem + stage 1 are
/// `BackboneEarly` (the freezable early layers); stages 2-3 and the
/// compression convolutions are `BackboneRest`.
#[derive(Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvNormRelu,
    stages: Vec<Stage>,
    compress: [(Conv, Norm); 2],
}

impl Backbone {
    pub fn init(cfg: &BackboneConfig, ps: &mut ParamStore, sampler: &mut NormalSampler) -> Result<Self> {
        cfg.validate()?;
        let down_spec = ConvSpec { kernel: 3, stride: 2, pad: 0, dilation: 1 };
        let keep_spec = ConvSpec { kernel: 3, stride: 1, pad: 1, dilation: 1 };
        let dil_spec = ConvSpec {
            kernel: 3,
            stride: 1,
            pad: cfg.dilation,
            dilation: cfg.dilation,
        };

        let stem = ConvNormRelu::init(
            ps,
            sampler,
            "backbone.stem",
            3,
            cfg.stem_channels,
            down_spec,
            ParamGroup::BackboneEarly,
        );
        let mut stages = Vec::with_capacity(3);
        let mut c_in = cfg.stem_channels;
        for (i, &c_out) in cfg.stage_channels.iter().enumerate() {
            let group = if i == 0 {
                ParamGroup::BackboneEarly
            } else {
                ParamGroup::BackboneRest
            };
            let (stage_spec, unit_spec) = if i == 2 {
                (dil_spec, dil_spec)
            } else {
                (down_spec, keep_spec)
            };
            let name = format!("backbone.stage{}", i + 1);
            stages.push(Stage {
                down: ConvNormRelu::init(
                    ps,
                    sampler,
                    &format!("{name}.down"),
                    c_in,
                    c_out,
                    stage_spec,
                    group,
                ),
                res: ResUnit::init(
                    ps,
                    sampler,
                    &format!("{name}.res"),
                    c_out,
                    cfg.res_convs,
                    unit_spec,
                    group,
                ),
            });
            c_in = c_out;
        }
        let one = ConvSpec::unit(1);
        let compress = [
            (
                Conv::init(
                    ps,
                    sampler,
                    "backbone.compress0.conv",
                    cfg.stage_channels[1],
                    cfg.compressed_channels,
                    one,
                    false,
                    ParamGroup::BackboneRest,
                ),
                Norm::init(ps, "backbone.compress0.norm", cfg.compressed_channels, ParamGroup::BackboneRest),
            ),
            (
                Conv::init(
                    ps,
                    sampler,
                    "backbone.compress1.conv",
                    cfg.stage_channels[2],
                    cfg.compressed_channels,
                    one,
                    false,
                    ParamGroup::BackboneRest,
                ),
                Norm::init(ps, "backbone.compress1.norm", cfg.compressed_channels, ParamGroup::BackboneRest),
            ),
        ];
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stages,
            compress,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Extract the two-level pyramid from a `[3, H, H]` image tensor
    /// (pixel values already scaled to 0..1).
    pub fn forward_pyramid(&self, ctx: &mut Ctx, image: &Tensor) -> Result<Pyramid> {
        let (c, h, w) = image.chw();
        if c != 3 || h != w {
            return Err(Error::ShapeMismatch(format!(
                "backbone expects square [3, H, H] input, got [{c}, {h}, {w}]"
            )));
        }
        let spatial = self.cfg.spatial_out(h).ok_or_else(|| {
            Error::ShapeMismatch(format!("input of side {h} too small for the stride-8 pyramid"))
        })?;
        ctx.backbone_passes += 1;

        let x = ctx.constant(image.clone());
        let mut h = self.stem.forward(ctx, x);
        let mut level0 = None;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.down.forward(ctx, h);
            h = stage.res.forward(ctx, h);
            if i == 1 {
                level0 = Some(h);
            }
        }
        let raw = [level0.expect("three stages"), h];
        let mut levels = [raw[0]; 2];
        for (i, &r) in raw.iter().enumerate() {
            let (conv, norm) = &self.compress[i];
            let c = conv.forward(ctx, r);
            levels[i] = norm.forward(ctx, c);
        }
        Ok(Pyramid { levels, spatial })
    }

    /// Centered 7x7 crop of both pyramid levels (template branches).
    pub fn center_crop7(&self, ctx: &mut Ctx, pyr: &Pyramid) -> Result<Templates> {
        if pyr.spatial < 7 {
            return Err(Error::ShapeMismatch(format!(
                "pyramid spatial size {} < 7, cannot crop template",
                pyr.spatial
            )));
        }
        if (pyr.spatial - 7) % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "pyramid spatial size {} has no centered 7x7 window",
                pyr.spatial
            )));
        }
        Ok(Templates {
            levels: [
                ctx.g.center_crop(pyr.levels[0], 7),
                ctx.g.center_crop(pyr.levels[1], 7),
            ],
        })
    }
}
