//! Finite-difference verification suites for every differentiable module:
//! the backbone, the fusion network, the RPN (both task branches and the
//! aggregation logits) and the three-aspect loss end to end.
//!
//! Each suite builds a reduced-size network, computes analytic gradients
//! through the tape, and compares every trainable scalar against central
//! differences. The zero-initialized fusion layers are randomized first so
//! gradients actually flow through the whole bottleneck.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, Templates};
use crate::error::Result;
use crate::fusion::{randomize_final_layers, Fusion};
use crate::geometry::{assign_labels, generate_anchors, AnchorConfig, BBox, CropSizes, LabelConfig};
use crate::loss::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::nn::gradcheck::{check, GradCheckReport};
use crate::nn::{Ctx, NormalSampler, ParamId, ParamStore, Tensor};
use crate::rpn::Rpn;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub reports: Vec<GradCheckReport>,
    pub max_rel_err: f64,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed(TOLERANCE))
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Extract analytic gradients for every parameter used by `build`, then
/// finite-difference the same scalar loss.
fn check_module(
    module: &str,
    params: &mut ParamStore,
    build: impl Fn(&ParamStore, &mut Ctx) -> crate::nn::NodeId,
    stride: usize,
) -> GradCheckReport {
    let mut ctx = Ctx::train(params, false, false);
    let root = build(params, &mut ctx);
    let grads = ctx.g.backward(root);
    let mut analytic: HashMap<ParamId, Tensor> = HashMap::new();
    for (pid, node) in ctx.param_leafs() {
        if let Some(g) = grads.get(node) {
            analytic.insert(pid, g.clone());
        }
    }
    drop(ctx);
    let loss = |ps: &ParamStore| -> f64 {
        let mut ctx = Ctx::train(ps, false, false);
        let root = build(ps, &mut ctx);
        ctx.g.value(root).item()
    };
    check(module, params, &analytic, loss, stride)
}

/// Backbone suite: sum-projection of both pyramid levels on a random
/// 31x31 input, every parameter checked.
pub fn backbone_suite() -> Result<GradCheckReport> {
    let cfg = BackboneConfig::gradcheck();
    let mut params = ParamStore::new();
    let mut sampler = NormalSampler::new(101);
    let backbone = Backbone::init(&cfg, &mut params, &mut sampler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let image = rand_tensor(&mut rng, &[3, 31, 31]);
    let s = cfg.spatial_out(31).expect("fits");
    let c = cfg.compressed_channels;
    let coef0 = rand_tensor(&mut rng, &[c, s, s]);
    let coef1 = rand_tensor(&mut rng, &[c, s, s]);

    Ok(check_module(
        "backbone",
        &mut params,
        move |_, ctx| {
            let pyr = backbone.forward_pyramid(ctx, &image).expect("forward");
            let d0 = ctx.g.dot_const(pyr.levels[0], coef0.clone());
            let d1 = ctx.g.dot_const(pyr.levels[1], coef1.clone());
            ctx.g.weighted_sum(vec![(d0, 1.0), (d1, 1.0)])
        },
        1,
    ))
}

/// Fusion suite: random templates, randomized final layers, projection of
/// both fused levels.
pub fn fusion_suite() -> Result<GradCheckReport> {
    let channels = 8;
    let mut params = ParamStore::new();
    let mut sampler = NormalSampler::new(201);
    let fusion = Fusion::init(channels, &mut params, &mut sampler)?;
    randomize_final_layers(&fusion, &mut params, &mut sampler);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let zf0 = rand_tensor(&mut rng, &[channels, 7, 7]);
    let zf1 = rand_tensor(&mut rng, &[channels, 7, 7]);
    let uf0 = rand_tensor(&mut rng, &[channels, 7, 7]);
    let uf1 = rand_tensor(&mut rng, &[channels, 7, 7]);
    let coef0 = rand_tensor(&mut rng, &[channels, 7, 7]);
    let coef1 = rand_tensor(&mut rng, &[channels, 7, 7]);

    Ok(check_module(
        "fusion",
        &mut params,
        move |_, ctx| {
            let zf = Templates {
                levels: [ctx.constant(zf0.clone()), ctx.constant(zf1.clone())],
            };
            let uf = Templates {
                levels: [ctx.constant(uf0.clone()), ctx.constant(uf1.clone())],
            };
            let fused = fusion.fuse(ctx, &zf, &uf).expect("fuse");
            let d0 = ctx.g.dot_const(fused.levels[0], coef0.clone());
            let d1 = ctx.g.dot_const(fused.levels[1], coef1.clone());
            ctx.g.weighted_sum(vec![(d0, 1.0), (d1, 1.0)])
        },
        1,
    ))
}

/// RPN suite: both task branches and the aggregation logits on a reduced
/// search map (response 9x9), every parameter checked.
pub fn rpn_suite() -> Result<GradCheckReport> {
    let channels = 8;
    let anchors = 3;
    let mut params = ParamStore::new();
    let mut sampler = NormalSampler::new(301);
    let rpn = Rpn::init(channels, anchors, &mut params, &mut sampler)?;
    // Leave the aggregation logits asymmetric so their gradients differ.
    {
        let (cls, reg) = rpn.aggregation_params();
        params.get_mut(cls).data_mut().copy_from_slice(&[0.3, -0.2]);
        params.get_mut(reg).data_mut().copy_from_slice(&[-0.1, 0.4]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let t0 = rand_tensor(&mut rng, &[channels, 7, 7]);
    let t1 = rand_tensor(&mut rng, &[channels, 7, 7]);
    let s0 = rand_tensor(&mut rng, &[channels, 15, 15]);
    let s1 = rand_tensor(&mut rng, &[channels, 15, 15]);
    let coef_cls = rand_tensor(&mut rng, &[2 * anchors, 9, 9]);
    let coef_reg = rand_tensor(&mut rng, &[4 * anchors, 9, 9]);

    Ok(check_module(
        "rpn",
        &mut params,
        move |_, ctx| {
            let template = Templates {
                levels: [ctx.constant(t0.clone()), ctx.constant(t1.clone())],
            };
            let search = crate::backbone::Pyramid {
                levels: [ctx.constant(s0.clone()), ctx.constant(s1.clone())],
                spatial: 15,
            };
            let out = rpn.forward(ctx, &template, &search).expect("rpn forward");
            let dc = ctx.g.dot_const(out.cls, coef_cls.clone());
            let dr = ctx.g.dot_const(out.reg, coef_reg.clone());
            ctx.g.weighted_sum(vec![(dc, 1.0), (dr, 1.0)])
        },
        1,
    ))
}

/// Loss suite: the full three-aspect objective through a reduced model
/// (63/127 crops), every trainable parameter checked against the grand
/// total.
pub fn loss_suite() -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        backbone: BackboneConfig::gradcheck(),
        anchors: AnchorConfig {
            patch_size: 127,
            ..Default::default()
        },
        crops: CropSizes {
            exemplar: 63,
            search: 127,
        },
    };
    let mut model = Model::init(&cfg, 401)?;
    let mut sampler = NormalSampler::new(402);
    randomize_final_layers(&model.fusion, &mut model.params, &mut sampler);

    let mut rng = ChaCha8Rng::seed_from_u64(403);
    let exemplar = rand_tensor(&mut rng, &[3, 63, 63]).map(|v| v.abs());
    let update = rand_tensor(&mut rng, &[3, 63, 63]).map(|v| v.abs());
    let search = rand_tensor(&mut rng, &[3, 127, 127]).map(|v| v.abs());
    let response = cfg.response_size();
    let anchors = generate_anchors(&cfg.anchors, response)?;
    let gt = BBox::new(66.0, 61.0, 58.0, 70.0).expect("valid");
    let labels = assign_labels(&anchors, &gt, &LabelConfig::default())?;
    assert!(labels.num_pos > 0, "loss suite needs positive anchors");
    let loss_cfg = LossConfig::default();

    let mut params = std::mem::take(&mut model.params);
    let report = check_module(
        "loss",
        &mut params,
        move |_, ctx| {
            let fwd = model
                .forward_triplet(ctx, &exemplar, &update, &search, &loss_cfg)
                .expect("triplet forward");
            let (_, grand, _) = model
                .triplet_loss(ctx, &fwd, &labels, &loss_cfg)
                .expect("triplet loss");
            grand
        },
        1,
    );
    Ok(report)
}

/// Run every suite.
pub fn run_all() -> Result<SuiteOutcome> {
    let reports = vec![
        fusion_suite()?,
        rpn_suite()?,
        backbone_suite()?,
        loss_suite()?,
    ];
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteOutcome {
        reports,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // The full suites run in the acceptance tests and the gradcheck CLI;
    // here we keep one fast smoke per suite kind.
    #[test]
    fn fusion_gradients_match_finite_differences() {
        let report = fusion_suite().unwrap();
        assert!(
            report.passed(TOLERANCE),
            "{}: max rel err {} at {}",
            report.module,
            report.max_rel_err,
            report.worst_param
        );
        assert!(report.scalars_checked > 300);
    }
}
