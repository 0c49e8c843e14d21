//! Per-level region proposal heads over depth-wise cross correlation, plus
//! learnable softmax-weighted aggregation across the two pyramid levels.
//!
//! Map layouts, shared with the loss and the tracker:
//! - classification `[2A, R, R]`: channels `0..A` hold background logits,
//!   channels `A..2A` foreground logits, anchor-major within each half;
//! - regression `[4A, R, R]`: channels `4a..4a+4` hold (dx, dy, dw, dh)
//!   for anchor `a`.

use crate::backbone::{Pyramid, Templates};
use crate::error::{Error, Result};
use crate::nn::{
    Conv, ConvNormRelu, ConvSpec, Ctx, NodeId, NormalSampler, ParamGroup, ParamId, ParamStore,
};

/// Index helpers for response maps of `A` anchors on an `R x R` grid.
#[derive(Debug, Clone, Copy)]
pub struct MapLayout {
    pub anchors: usize,
    pub response: usize,
}

impl MapLayout {
    #[inline]
    pub fn cls_bg(&self, a: usize, row: usize, col: usize) -> usize {
        (a * self.response + row) * self.response + col
    }

    #[inline]
    pub fn cls_fg(&self, a: usize, row: usize, col: usize) -> usize {
        ((self.anchors + a) * self.response + row) * self.response + col
    }

    #[inline]
    pub fn reg(&self, a: usize, coord: usize, row: usize, col: usize) -> usize {
        ((4 * a + coord) * self.response + row) * self.response + col
    }

    /// Anchor-grid flat index (matches `AnchorSet` ordering).
    #[inline]
    pub fn anchor(&self, a: usize, row: usize, col: usize) -> usize {
        (a * self.response + row) * self.response + col
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors * self.response * self.response
    }
}

#[derive(Debug)]
struct Branch {
    adjust_t: ConvNormRelu,
    adjust_s: ConvNormRelu,
    head_hidden: ConvNormRelu,
    head_out: Conv,
}

impl Branch {
    fn init(
        ps: &mut ParamStore,
        sampler: &mut NormalSampler,
        name: &str,
        channels: usize,
        out_channels: usize,
    ) -> Self {
        let three = ConvSpec { kernel: 3, stride: 1, pad: 1, dilation: 1 };
        let one = ConvSpec::unit(1);
        Branch {
            adjust_t: ConvNormRelu::init(
                ps,
                sampler,
                &format!("{name}.adjust_t"),
                channels,
                channels,
                three,
                ParamGroup::Head,
            ),
            adjust_s: ConvNormRelu::init(
                ps,
                sampler,
                &format!("{name}.adjust_s"),
                channels,
                channels,
                three,
                ParamGroup::Head,
            ),
            head_hidden: ConvNormRelu::init(
                ps,
                sampler,
                &format!("{name}.head_hidden"),
                channels,
                channels,
                one,
                ParamGroup::Head,
            ),
            head_out: {
                let conv = Conv::init(
                    ps,
                    sampler,
                    &format!("{name}.head_out"),
                    channels,
                    out_channels,
                    one,
                    true,
                    ParamGroup::Head,
                );
                // Small-logit start: untrained scores stay near chance and
                // the cross entropy starts near ln 2.
                let w = ps.get_mut(conv.w);
                let scale = 0.01 / (2.0 / channels as f64).sqrt();
                w.scale_in_place(scale);
                conv
            },
        }
    }
}

#[derive(Debug)]
struct Level {
    cls: Branch,
    reg: Branch,
}

/// RPN outputs inside a live graph.
#[derive(Debug, Clone, Copy)]
pub struct RpnOutputs {
    /// Aggregated `[2A, R, R]` classification logits.
    pub cls: NodeId,
    /// Aggregated `[4A, R, R]` regression offsets.
    pub reg: NodeId,
    /// Raw per-level maps, retained for inspection.
    pub per_level_cls: [NodeId; 2],
    pub per_level_reg: [NodeId; 2],
    pub layout: MapLayout,
}

/// Search features after the per-branch adjust convolutions; computed once
/// per search image and reused across the template variants.
#[derive(Debug)]
pub struct AdjustedSearch {
    per_level: [(NodeId, NodeId); 2], // (cls branch, reg branch)
    spatial: usize,
}

/// The two-level RPN with learnable aggregation weights.
#[derive(Debug)]
pub struct Rpn {
    levels: [Level; 2],
    cls_agg: ParamId,
    reg_agg: ParamId,
    channels: usize,
    anchors_per_cell: usize,
}

impl Rpn {
    pub fn init(
        channels: usize,
        anchors_per_cell: usize,
        ps: &mut ParamStore,
        sampler: &mut NormalSampler,
    ) -> Result<Self> {
        if channels == 0 || anchors_per_cell == 0 {
            return Err(Error::InvalidConfig("rpn channels and anchors must be positive".into()));
        }
        let levels = [
            Level {
                cls: Branch::init(ps, sampler, "rpn.level0.cls", channels, 2 * anchors_per_cell),
                reg: Branch::init(ps, sampler, "rpn.level0.reg", channels, 4 * anchors_per_cell),
            },
            Level {
                cls: Branch::init(ps, sampler, "rpn.level1.cls", channels, 2 * anchors_per_cell),
                reg: Branch::init(ps, sampler, "rpn.level1.reg", channels, 4 * anchors_per_cell),
            },
        ];
        use crate::nn::{ParamKind, Tensor};
        let cls_agg = ps.add(
            "rpn.aggregate.cls_logits",
            Tensor::zeros(&[2]),
            ParamKind::Affine,
            ParamGroup::Head,
        );
        let reg_agg = ps.add(
            "rpn.aggregate.reg_logits",
            Tensor::zeros(&[2]),
            ParamKind::Affine,
            ParamGroup::Head,
        );
        Ok(Rpn {
            levels,
            cls_agg,
            reg_agg,
            channels,
            anchors_per_cell,
        })
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors_per_cell
    }

    pub fn aggregation_params(&self) -> (ParamId, ParamId) {
        (self.cls_agg, self.reg_agg)
    }

    /// Run the search-side adjust convolutions once.
    pub fn adjust_search(&self, ctx: &mut Ctx, search: &Pyramid) -> Result<AdjustedSearch> {
        for &level in &search.levels {
            let (c, _, _) = ctx.g.value(level).chw();
            if c != self.channels {
                return Err(Error::ShapeMismatch(format!(
                    "rpn expects {} search channels, got {c}",
                    self.channels
                )));
            }
        }
        let mk = |ctx: &mut Ctx, level: &Level, feat: NodeId| {
            (
                level.cls.adjust_s.forward(ctx, feat),
                level.reg.adjust_s.forward(ctx, feat),
            )
        };
        Ok(AdjustedSearch {
            per_level: [
                mk(ctx, &self.levels[0], search.levels[0]),
                mk(ctx, &self.levels[1], search.levels[1]),
            ],
            spatial: search.spatial,
        })
    }

    /// Full forward from raw search features.
    pub fn forward(&self, ctx: &mut Ctx, template: &Templates, search: &Pyramid) -> Result<RpnOutputs> {
        let adjusted = self.adjust_search(ctx, search)?;
        self.forward_adjusted(ctx, template, &adjusted)
    }

    /// Forward against pre-adjusted search features (shared across the
    /// basic / update / overall template variants).
    pub fn forward_adjusted(
        &self,
        ctx: &mut Ctx,
        template: &Templates,
        search: &AdjustedSearch,
    ) -> Result<RpnOutputs> {
        if search.spatial < 7 {
            return Err(Error::ShapeMismatch("search map smaller than template".into()));
        }
        let response = search.spatial - 7 + 1;
        let mut per_level_cls = [template.levels[0]; 2];
        let mut per_level_reg = [template.levels[0]; 2];
        for li in 0..2 {
            let t = template.levels[li];
            let (tc, th, tw) = ctx.g.value(t).chw();
            if tc != self.channels || th != 7 || tw != 7 {
                return Err(Error::ShapeMismatch(format!(
                    "rpn template level {li} must be [{}, 7, 7], got [{tc}, {th}, {tw}]",
                    self.channels
                )));
            }
            let level = &self.levels[li];
            let (s_cls, s_reg) = search.per_level[li];
            per_level_cls[li] = Self::branch_forward(ctx, &level.cls, t, s_cls);
            per_level_reg[li] = Self::branch_forward(ctx, &level.reg, t, s_reg);
        }
        let cls_logits = ctx.leaf(self.cls_agg);
        let reg_logits = ctx.leaf(self.reg_agg);
        let cls = aggregate_maps(ctx, per_level_cls[0], per_level_cls[1], cls_logits);
        let reg = aggregate_maps(ctx, per_level_reg[0], per_level_reg[1], reg_logits);
        Ok(RpnOutputs {
            cls,
            reg,
            per_level_cls,
            per_level_reg,
            layout: MapLayout {
                anchors: self.anchors_per_cell,
                response,
            },
        })
    }

    fn branch_forward(ctx: &mut Ctx, branch: &Branch, template: NodeId, adjusted_search: NodeId) -> NodeId {
        let t = branch.adjust_t.forward(ctx, template);
        let x = ctx.g.depthwise_xcorr(adjusted_search, t);
        let h = branch.head_hidden.forward(ctx, x);
        branch.head_out.forward(ctx, h)
    }
}

/// Softmax(logits)-weighted sum of two same-shaped maps.
pub fn aggregate_maps(ctx: &mut Ctx, a: NodeId, b: NodeId, logits: NodeId) -> NodeId {
    let w = ctx.g.softmax2(logits);
    ctx.g.lincomb2(a, b, w)
}
