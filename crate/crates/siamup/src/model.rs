//! The assembled tracking network: backbone + fusion + RPN over one
//! parameter store, plus the three-template forward used in training.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Pyramid, Templates};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::geometry::{AnchorConfig, CropSizes};
use crate::loss::{aspect_loss, total_loss, AspectLoss, LossBundle, LossConfig, LossValues};
use crate::nn::{Ctx, NormalSampler, ParamStore, Tensor};
use crate::rpn::{AdjustedSearch, Rpn, RpnOutputs};

/// Everything needed to rebuild a network with the same parameter names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub crops: CropSizes,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            backbone: BackboneConfig::tiny(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        if self.crops.exemplar < 15 || self.crops.search <= self.crops.exemplar {
            return Err(Error::InvalidConfig(
                "crop sizes must satisfy 15 <= exemplar < search".into(),
            ));
        }
        if self.anchors.patch_size != self.crops.search {
            return Err(Error::InvalidConfig(
                "anchors.patch_size must equal crops.search".into(),
            ));
        }
        let ex = self.backbone.spatial_out(self.crops.exemplar);
        let sr = self.backbone.spatial_out(self.crops.search);
        match (ex, sr) {
            (Some(e), Some(s)) if e >= 7 && (e - 7) % 2 == 0 && s >= 7 => Ok(()),
            _ => Err(Error::InvalidConfig(
                "crop sizes incompatible with the stride-8 pyramid".into(),
            )),
        }
    }

    /// Response-map side for the configured search crop.
    pub fn response_size(&self) -> usize {
        self.backbone.spatial_out(self.crops.search).expect("validated") - 7 + 1
    }
}

/// Model = parameters + the three module definitions.
#[derive(Debug)]
pub struct Model {
    pub params: ParamStore,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub rpn: Rpn,
    pub cfg: ModelConfig,
}

impl Model {
    /// Deterministically initialize all parameters from a seed. The final
    /// fusion layers start at zero (residual identity).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut sampler = NormalSampler::new(seed);
        let backbone = Backbone::init(&cfg.backbone, &mut params, &mut sampler)?;
        let fusion = Fusion::init(cfg.backbone.compressed_channels, &mut params, &mut sampler)?;
        let rpn = Rpn::init(
            cfg.backbone.compressed_channels,
            cfg.anchors.anchors_per_cell(),
            &mut params,
            &mut sampler,
        )?;
        Ok(Model {
            params,
            backbone,
            fusion,
            rpn,
            cfg: cfg.clone(),
        })
    }

    /// Scale a 0..255 patch to the 0..1 network input range.
    pub fn to_net_input(patch: &Tensor) -> Tensor {
        patch.map(|v| v / 255.0)
    }

    /// Template features of a 0..1 exemplar-sized patch.
    pub fn encode_template(&self, ctx: &mut Ctx, patch01: &Tensor) -> Result<Templates> {
        let pyr = self.backbone.forward_pyramid(ctx, patch01)?;
        self.backbone.center_crop7(ctx, &pyr)
    }

    /// Pyramid features of a 0..1 search-sized patch.
    pub fn encode_search(&self, ctx: &mut Ctx, patch01: &Tensor) -> Result<Pyramid> {
        self.backbone.forward_pyramid(ctx, patch01)
    }
}

/// Per-aspect RPN outputs of one training triplet.
#[derive(Debug)]
pub struct TripletForward {
    pub basic: Option<RpnOutputs>,
    pub update: Option<RpnOutputs>,
    pub overall: RpnOutputs,
}

impl Model {
    /// Encode one triplet (each image through the backbone exactly once,
    /// search adjust convolutions shared) and score every enabled aspect.
    pub fn forward_triplet(
        &self,
        ctx: &mut Ctx,
        exemplar01: &Tensor,
        update01: &Tensor,
        search01: &Tensor,
        loss_cfg: &LossConfig,
    ) -> Result<TripletForward> {
        let zf = self.encode_template(ctx, exemplar01)?;
        let uf = self.encode_template(ctx, update01)?;
        let sp = self.encode_search(ctx, search01)?;
        let adjusted: AdjustedSearch = self.rpn.adjust_search(ctx, &sp)?;

        let basic = if loss_cfg.basic_enabled {
            Some(self.rpn.forward_adjusted(ctx, &zf, &adjusted)?)
        } else {
            None
        };
        let update = if loss_cfg.update_enabled {
            Some(self.rpn.forward_adjusted(ctx, &uf, &adjusted)?)
        } else {
            None
        };
        let fused = self.fusion.fuse(ctx, &zf, &uf)?;
        let overall = self.rpn.forward_adjusted(ctx, &fused, &adjusted)?;
        Ok(TripletForward {
            basic,
            update,
            overall,
        })
    }

    /// Losses for one scored triplet against one label map. Returns the
    /// graph-side aspects plus the grand-total node.
    pub fn triplet_loss(
        &self,
        ctx: &mut Ctx,
        fwd: &TripletForward,
        labels: &crate::geometry::LabelMap,
        loss_cfg: &LossConfig,
    ) -> Result<(Vec<AspectLoss>, crate::nn::NodeId, LossBundle)> {
        let mut aspects = Vec::new();
        let mut basic_vals = None;
        let mut update_vals = None;
        if let Some(out) = &fwd.basic {
            let a = aspect_loss(ctx, out, labels, loss_cfg)?;
            basic_vals = Some(values_of(ctx, &a));
            aspects.push(a);
        }
        if let Some(out) = &fwd.update {
            let a = aspect_loss(ctx, out, labels, loss_cfg)?;
            update_vals = Some(values_of(ctx, &a));
            aspects.push(a);
        }
        let overall = aspect_loss(ctx, &fwd.overall, labels, loss_cfg)?;
        let overall_vals = values_of(ctx, &overall);
        aspects.push(overall);
        let grand = total_loss(ctx, &aspects);
        let bundle = LossBundle {
            basic: basic_vals,
            update: update_vals,
            overall: overall_vals,
            grand_total: ctx.g.value(grand).item(),
        };
        Ok((aspects, grand, bundle))
    }
}

fn values_of(ctx: &Ctx, a: &AspectLoss) -> LossValues {
    LossValues {
        cls: ctx.g.value(a.cls).item(),
        reg: ctx.g.value(a.reg).item(),
        total: ctx.g.value(a.total).item(),
    }
}
