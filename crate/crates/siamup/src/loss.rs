//! The multi-aspect training objective.
//!
//! Each aspect (basic: exemplar template, update: update-sample template,
//! overall: fused template) scores the same search frame against the same
//! anchor labels and pays `cls + lambda * reg`, where cls is mean two-class
//! cross entropy over the sampled anchors and reg is mean smooth-L1 over
//! the positive anchors' offsets. The grand total is the plain sum of the
//! enabled aspect totals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Label, LabelMap};
use crate::nn::{Ctx, NodeId};
use crate::rpn::{MapLayout, RpnOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aspect {
    Basic,
    Update,
    Overall,
}

/// Aspect switches and the cls/reg balance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the regression term inside each aspect.
    pub lambda: f64,
    pub basic_enabled: bool,
    pub update_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.2,
            basic_enabled: true,
            update_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig("loss lambda must be positive".into()));
        }
        Ok(())
    }

    pub fn enabled_aspects(&self) -> Vec<Aspect> {
        let mut v = Vec::new();
        if self.basic_enabled {
            v.push(Aspect::Basic);
        }
        if self.update_enabled {
            v.push(Aspect::Update);
        }
        v.push(Aspect::Overall); // the overall aspect is always on
        v
    }
}

/// One aspect's loss nodes plus degenerate-batch flags.
#[derive(Debug, Clone, Copy)]
pub struct AspectLoss {
    pub cls: NodeId,
    pub reg: NodeId,
    pub total: NodeId,
    /// No sampled anchors at all: cls defined as 0.
    pub zero_sampled: bool,
    /// No positive anchors: reg defined as 0.
    pub zero_positives: bool,
}

/// Mean cross entropy of the sampled (positive + negative) anchors.
/// Returns the scalar node and a flag set when nothing was sampled.
pub fn classification_loss(
    ctx: &mut Ctx,
    cls_map: NodeId,
    layout: MapLayout,
    labels: &LabelMap,
) -> Result<(NodeId, bool)> {
    check_alignment(labels, layout)?;
    let r = layout.response;
    let mut picks = Vec::with_capacity(labels.num_pos + labels.num_neg);
    for a in 0..layout.anchors {
        for row in 0..r {
            for col in 0..r {
                match labels.labels[layout.anchor(a, row, col)] {
                    Label::Positive => {
                        picks.push((layout.cls_bg(a, row, col), layout.cls_fg(a, row, col), true))
                    }
                    Label::Negative => {
                        picks.push((layout.cls_bg(a, row, col), layout.cls_fg(a, row, col), false))
                    }
                    Label::Ignore => {}
                }
            }
        }
    }
    let empty = picks.is_empty();
    Ok((ctx.g.anchor_cross_entropy(cls_map, picks), empty))
}

/// Mean smooth-L1 over the positive anchors, averaged per coordinate.
pub fn regression_loss(
    ctx: &mut Ctx,
    reg_map: NodeId,
    layout: MapLayout,
    labels: &LabelMap,
) -> Result<(NodeId, bool)> {
    check_alignment(labels, layout)?;
    let r = layout.response;
    let mut picks = Vec::with_capacity(4 * labels.num_pos);
    for a in 0..layout.anchors {
        for row in 0..r {
            for col in 0..r {
                let i = layout.anchor(a, row, col);
                if labels.labels[i] != Label::Positive {
                    continue;
                }
                let target = labels.reg_targets[i];
                for (j, &t) in target.iter().enumerate() {
                    debug_assert!(t.is_finite(), "positive anchor with non-finite target");
                    picks.push((layout.reg(a, j, row, col), t));
                }
            }
        }
    }
    let empty = picks.is_empty();
    Ok((ctx.g.smooth_l1(reg_map, picks), empty))
}

/// `cls + lambda * reg` for one aspect.
pub fn aspect_loss(
    ctx: &mut Ctx,
    outputs: &RpnOutputs,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<AspectLoss> {
    cfg.validate()?;
    let (cls, zero_sampled) = classification_loss(ctx, outputs.cls, outputs.layout, labels)?;
    let (reg, zero_positives) = regression_loss(ctx, outputs.reg, outputs.layout, labels)?;
    let total = ctx.g.weighted_sum(vec![(cls, 1.0), (reg, cfg.lambda)]);
    Ok(AspectLoss {
        cls,
        reg,
        total,
        zero_sampled,
        zero_positives,
    })
}

/// Unweighted sum of the enabled aspects' totals.
pub fn total_loss(ctx: &mut Ctx, aspects: &[AspectLoss]) -> NodeId {
    let terms = aspects.iter().map(|a| (a.total, 1.0)).collect();
    ctx.g.weighted_sum(terms)
}

fn check_alignment(labels: &LabelMap, layout: MapLayout) -> Result<()> {
    if labels.labels.len() != layout.anchor_count() {
        return Err(Error::ShapeMismatch(format!(
            "label map holds {} anchors, response layout expects {}",
            labels.labels.len(),
            layout.anchor_count()
        )));
    }
    Ok(())
}

/// Scalar loss components of one aspect, for logs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// All aspect losses of one step, as plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub basic: Option<LossValues>,
    pub update: Option<LossValues>,
    pub overall: LossValues,
    pub grand_total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        let ok = |v: &LossValues| v.cls.is_finite() && v.reg.is_finite() && v.total.is_finite();
        self.basic.as_ref().map_or(true, ok)
            && self.update.as_ref().map_or(true, ok)
            && ok(&self.overall)
            && self.grand_total.is_finite()
    }

    /// Name of the first aspect holding a non-finite component, if any.
    pub fn offending_aspect(&self) -> Option<Aspect> {
        let bad = |v: &LossValues| !(v.cls.is_finite() && v.reg.is_finite() && v.total.is_finite());
        if self.basic.as_ref().is_some_and(bad) {
            return Some(Aspect::Basic);
        }
        if self.update.as_ref().is_some_and(bad) {
            return Some(Aspect::Update);
        }
        if bad(&self.overall) {
            return Some(Aspect::Overall);
        }
        None
    }
}
