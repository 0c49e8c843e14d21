//! Triplet sampling, update-sample augmentation, the learning-rate
//! schedule and the SGD loop over the three-aspect objective.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{
    assign_labels, frame_to_patch, generate_anchors, AnchorSet, BBox, CropSizes, LabelConfig,
};
use crate::img;
use crate::loss::LossBundle;
use crate::model::Model;
use crate::nn::layers::NORM_MOMENTUM;
use crate::nn::{Ctx, ParamId, ParamKind, ParamStore, Tensor};

/// Training hyperparameters. Defaults are the desk-scale (tiny) schedule;
/// `full_scale()` holds the large-corpus values for reference.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub pairs_per_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Warm-up start / peak / final learning rate.
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub warmup_epochs: usize,
    /// First epoch (1-based) in which the backbone trains.
    pub unfreeze_epoch: usize,
    /// Backbone learning rate = head rate / this.
    pub backbone_lr_divisor: f64,
    /// Keep stem + stage 1 frozen for the whole run.
    pub freeze_early: bool,
    /// Largest search-frame distance from the exemplar frame.
    pub max_frame_gap: usize,
    /// Update-sample augmentation probabilities.
    pub aug_rotate_prob: f64,
    pub aug_blur_prob: f64,
    pub aug_occlude_prob: f64,
    /// Target jitter inside the search patch, in patch pixels per axis.
    pub search_shift: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            pairs_per_epoch: 2000,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_start: 0.001,
            lr_peak: 0.005,
            lr_end: 0.0005,
            warmup_epochs: 5,
            unfreeze_epoch: 1,
            backbone_lr_divisor: 16.0,
            freeze_early: false,
            max_frame_gap: 100,
            aug_rotate_prob: 0.3,
            aug_blur_prob: 0.3,
            aug_occlude_prob: 0.3,
            search_shift: 32.0,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule (20 epochs, minibatch 32, 600k pairs,
    /// backbone unfrozen for the last 10 epochs, early layers frozen).
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            pairs_per_epoch: 600_000,
            unfreeze_epoch: 11,
            freeze_early: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::InvalidConfig("epochs, batch and pairs must be positive".into()));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::InvalidConfig(
                "warmup_epochs must satisfy 1 <= warmup < epochs".into(),
            ));
        }
        if self.unfreeze_epoch == 0 || self.unfreeze_epoch > self.epochs + 1 {
            return Err(Error::InvalidConfig("unfreeze_epoch out of range".into()));
        }
        let rates = [self.lr_start, self.lr_peak, self.lr_end];
        if rates.iter().any(|&r| !(r > 0.0)) || self.backbone_lr_divisor <= 0.0 {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        for p in [self.aug_rotate_prob, self.aug_blur_prob, self.aug_occlude_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig("augmentation probabilities must lie in [0,1]".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.pairs_per_epoch / self.batch_size).max(1)
    }
}

/// Head learning rate at a schedule position: linear warm-up from
/// `lr_start` to `lr_peak` across the warm-up epochs, then log-linear decay
/// to `lr_end` at the end of the final epoch.
pub fn lr_at(epoch: usize, step_fraction: f64, cfg: &TrainConfig) -> Result<f64> {
    if epoch < 1 || epoch > cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} outside 1..={}",
            cfg.epochs
        )));
    }
    let pos = (epoch - 1) as f64 + step_fraction.clamp(0.0, 1.0);
    let warm = cfg.warmup_epochs as f64;
    Ok(if pos <= warm {
        cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * pos / warm
    } else {
        let span = cfg.epochs as f64 - warm;
        let q = (pos - warm) / span;
        cfg.lr_peak * (cfg.lr_end / cfg.lr_peak).powf(q)
    })
}

/// Backbone learning rate: head rate divided down, zero while frozen.
pub fn backbone_lr(head_lr: f64, epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.unfreeze_epoch {
        head_lr / cfg.backbone_lr_divisor
    } else {
        0.0
    }
}

/// One training sample: exemplar / update / search patches (0..255 pixel
/// units) plus the target box in search-patch coordinates.
#[derive(Debug, Clone)]
pub struct SampleTriplet {
    pub exemplar: Tensor,
    pub update: Tensor,
    pub search: Tensor,
    pub gt_in_search: BBox,
    pub frames: (usize, usize, usize),
}

/// Draw ordered frame indices t_z <= t_u <= t_x from the annotated frames,
/// with the search frame at most `max_gap` frames past the exemplar.
pub fn sample_indices(
    annotated: &[usize],
    max_gap: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize) {
    let t_z = annotated[rng.gen_range(0..annotated.len())];
    let upper = (t_z + max_gap).min(*annotated.last().expect("non-empty"));
    let xs: Vec<usize> = annotated.iter().copied().filter(|&t| t >= t_z && t <= upper).collect();
    let t_x = xs[rng.gen_range(0..xs.len())];
    let us: Vec<usize> = annotated.iter().copied().filter(|&t| t >= t_z && t <= t_x).collect();
    let t_u = us[rng.gen_range(0..us.len())];
    (t_z, t_u, t_x)
}

/// Sample frame indices t_z <= t_u <= t_x and crop the three patches.
/// The update patch is augmented; the search window center is jittered so
/// the target does not always sit at the patch center.
pub fn build_triplet(
    seq: &Sequence,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    crops: &CropSizes,
) -> Result<SampleTriplet> {
    let annotated: Vec<usize> = (0..seq.len()).filter(|&t| seq.gt[t].is_some()).collect();
    if annotated.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence {} has fewer than 2 annotated frames",
            seq.name
        )));
    }
    let (t_z, t_u, t_x) = sample_indices(&annotated, cfg.max_frame_gap, rng);

    let gt_z = seq.gt[t_z].expect("annotated");
    let gt_u = seq.gt[t_u].expect("annotated");
    let gt_x = seq.gt[t_x].expect("annotated");

    let exemplar = crate::geometry::crop_patch(
        &seq.frame(t_z)?,
        (gt_z.cx, gt_z.cy),
        &gt_z,
        crops.exemplar,
        crops.exemplar,
    );
    let raw_update = crate::geometry::crop_patch(
        &seq.frame(t_u)?,
        (gt_u.cx, gt_u.cy),
        &gt_u,
        crops.exemplar,
        crops.exemplar,
    );
    let update = augment_update(&raw_update, rng, cfg);

    // Jitter the search window center in patch pixels, converted to frame
    // pixels through the crop's resize factor.
    let side = gt_x.context_side() * crops.search as f64 / crops.exemplar as f64;
    let to_frame = side / crops.search as f64;
    let jx = rng.gen_range(-cfg.search_shift..=cfg.search_shift) * to_frame;
    let jy = rng.gen_range(-cfg.search_shift..=cfg.search_shift) * to_frame;
    let center = (gt_x.cx + jx, gt_x.cy + jy);
    let search = crate::geometry::crop_patch(
        &seq.frame(t_x)?,
        center,
        &gt_x,
        crops.search,
        crops.exemplar,
    );
    let gt_in_search = frame_to_patch(&gt_x, center, side, crops.search);
    Ok(SampleTriplet {
        exemplar,
        update,
        search,
        gt_in_search,
        frames: (t_z, t_u, t_x),
    })
}

/// Independently apply rotation (uniform +-15 deg), box blur (kernel 3 or
/// 5) and a mean-colored occlusion rectangle covering 10-30% of the patch,
/// each with its configured probability. Deterministic in the RNG state.
pub fn augment_update(patch: &Tensor, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Tensor {
    let mut out = patch.clone();
    let means = img::patch_means(&out);
    if rng.gen_range(0.0..1.0) < cfg.aug_rotate_prob {
        let angle = rng.gen_range(-1.0..=1.0) * 15.0f64.to_radians();
        out = img::rotate(&out, angle, means);
    }
    if rng.gen_range(0.0..1.0) < cfg.aug_blur_prob {
        let k = if rng.gen_range(0.0..1.0) < 0.5 { 3 } else { 5 };
        out = img::box_blur(&out, k);
    }
    if rng.gen_range(0.0..1.0) < cfg.aug_occlude_prob {
        let (_, h, w) = out.chw();
        let frac = rng.gen_range(0.10..=0.30);
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let area = frac * (h * w) as f64;
        let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
        let rh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
        let x0 = rng.gen_range(0..=(w - rw));
        let y0 = rng.gen_range(0..=(h - rh));
        img::fill_rect(&mut out, x0, y0, rw, rh, means);
    }
    out
}

/// SGD with momentum and decoupled parameter-group learning rates.
/// Weight decay applies to convolution weights only, never to biases or
/// normalization affine parameters.
pub struct Sgd {
    velocity: HashMap<ParamId, Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            velocity: HashMap::new(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Apply one update. Parameters without a gradient are untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &HashMap<ParamId, Tensor>,
        lr_head: f64,
        lr_backbone: f64,
    ) {
        use crate::nn::ParamGroup;
        let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let entry = params.entry(id);
            if entry.kind == ParamKind::Buffer {
                continue;
            }
            let Some(grad) = grads.get(&id) else { continue };
            let lr = match entry.group {
                ParamGroup::Head => lr_head,
                ParamGroup::BackboneEarly | ParamGroup::BackboneRest => lr_backbone,
            };
            let decay = if entry.kind == ParamKind::Weight {
                self.weight_decay
            } else {
                0.0
            };
            let mut g = grad.clone();
            if decay != 0.0 {
                g.axpy(decay, &entry.value);
            }
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            v.scale_in_place(self.momentum);
            v.add_assign(&g);
            params.get_mut(id).axpy(-lr, v);
        }
    }
}

/// Scalars coming out of one optimizer step.
pub struct StepOutcome {
    /// Batch-mean loss components.
    pub losses: LossBundle,
    /// Backbone pyramid evaluations during the step.
    pub backbone_passes: usize,
}

/// Run one SGD step over a batch of triplets. The batch loss is the mean
/// of the per-triplet grand totals; a non-finite loss aborts the step
/// before any parameter is touched and names the offending aspect.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &[SampleTriplet],
    anchors: &AnchorSet,
    label_cfg: &LabelConfig,
    loss_cfg: &crate::loss::LossConfig,
    lr_head: f64,
    lr_backbone: f64,
    frozen_early: bool,
    frozen_rest: bool,
    step_seed: u64,
) -> Result<StepOutcome> {
    assert!(!batch.is_empty());
    let scale = 1.0 / batch.len() as f64;
    let mut grad_acc: HashMap<ParamId, Tensor> = HashMap::new();
    let mut stat_updates: Vec<(ParamId, Tensor)> = Vec::new();
    let mut sum = LossAccumulator::default();
    let mut backbone_passes = 0;

    for (i, triplet) in batch.iter().enumerate() {
        let mut ctx = Ctx::train(&model.params, frozen_early, frozen_rest);
        let ex = Model::to_net_input(&triplet.exemplar);
        let up = Model::to_net_input(&triplet.update);
        let sr = Model::to_net_input(&triplet.search);
        let fwd = model.forward_triplet(&mut ctx, &ex, &up, &sr, loss_cfg)?;
        let sample_labels = assign_labels(
            anchors,
            &triplet.gt_in_search,
            &label_cfg.with_seed(step_seed ^ (i as u64).wrapping_mul(0x9e37_79b9)),
        )?;
        let (_, grand, bundle) = model.triplet_loss(&mut ctx, &fwd, &sample_labels, loss_cfg)?;
        if !bundle.is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "training step, aspect {:?}, triplet {i}",
                    bundle.offending_aspect().expect("non-finite bundle")
                ),
            });
        }
        sum.add(&bundle);

        let grads = ctx.g.backward(grand);
        for (pid, node) in ctx.param_leafs() {
            if let Some(g) = grads.get(node) {
                grad_acc
                    .entry(pid)
                    .and_modify(|acc| acc.axpy(scale, g))
                    .or_insert_with(|| {
                        let mut t = g.clone();
                        t.scale_in_place(scale);
                        t
                    });
            }
        }
        backbone_passes += ctx.backbone_passes;
        stat_updates.append(&mut ctx.buffer_updates);
    }

    opt.step(&mut model.params, &grad_acc, lr_head, lr_backbone);
    // Fold observed normalization statistics into the running buffers, in
    // evaluation order.
    for (pid, observed) in stat_updates {
        let buf = model.params.get_mut(pid);
        buf.scale_in_place(1.0 - NORM_MOMENTUM);
        buf.axpy(NORM_MOMENTUM, &observed);
    }
    Ok(StepOutcome {
        losses: sum.mean(batch.len()),
        backbone_passes,
    })
}

#[derive(Default)]
struct LossAccumulator {
    basic: Option<(f64, f64, f64)>,
    update: Option<(f64, f64, f64)>,
    overall: (f64, f64, f64),
    grand: f64,
}

impl LossAccumulator {
    fn add(&mut self, b: &LossBundle) {
        let acc3 = |slot: &mut Option<(f64, f64, f64)>, v: &crate::loss::LossValues| {
            let s = slot.get_or_insert((0.0, 0.0, 0.0));
            s.0 += v.cls;
            s.1 += v.reg;
            s.2 += v.total;
        };
        if let Some(v) = &b.basic {
            acc3(&mut self.basic, v);
        }
        if let Some(v) = &b.update {
            acc3(&mut self.update, v);
        }
        self.overall.0 += b.overall.cls;
        self.overall.1 += b.overall.reg;
        self.overall.2 += b.overall.total;
        self.grand += b.grand_total;
    }

    fn mean(&self, n: usize) -> LossBundle {
        let k = 1.0 / n as f64;
        let m3 = |s: &Option<(f64, f64, f64)>| {
            s.map(|(c, r, t)| crate::loss::LossValues {
                cls: c * k,
                reg: r * k,
                total: t * k,
            })
        };
        LossBundle {
            basic: m3(&self.basic),
            update: m3(&self.update),
            overall: crate::loss::LossValues {
                cls: self.overall.0 * k,
                reg: self.overall.1 * k,
                total: self.overall.2 * k,
            },
            grand_total: self.grand * k,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,lr,loss_basic_cls,loss_basic_reg,loss_update_cls,loss_update_reg,loss_overall_cls,loss_overall_reg,loss_total";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let pair = |v: &Option<crate::loss::LossValues>| match v {
            Some(v) => format!("{},{}", v.cls, v.reg),
            None => ",".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            pair(&self.losses.basic),
            pair(&self.losses.update),
            self.losses.overall.cls,
            self.losses.overall.reg,
            self.losses.grand_total
        )
    }
}

/// Summary of a full training run.
pub struct TrainReport {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
}

/// Full training loop over a sequence pool. `log` receives the CSV rows;
/// `epoch_hook` runs after every epoch (checkpointing lives there).
pub fn train(
    model: &mut Model,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    label_cfg: &LabelConfig,
    loss_cfg: &crate::loss::LossConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
    mut epoch_hook: impl FnMut(&Model, usize) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let usable: Vec<&Sequence> = sequences
        .iter()
        .filter(|s| s.gt.iter().filter(|g| g.is_some()).count() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidConfig("no trainable sequences (need >= 2 annotated frames)".into()));
    }
    let anchors = generate_anchors(&model.cfg.anchors, model.cfg.response_size())?;
    let crops = model.cfg.crops;
    let mut opt = Sgd::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
    }

    let steps_per_epoch = cfg.steps_per_epoch();
    let mut loss_curve = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        let frozen_rest = epoch < cfg.unfreeze_epoch;
        let frozen_early = cfg.freeze_early || frozen_rest;
        for step in 0..steps_per_epoch {
            let lr_head = lr_at(epoch, step as f64 / steps_per_epoch as f64, cfg)?;
            let lr_bb = backbone_lr(lr_head, epoch, cfg);
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let seq = usable[rng.gen_range(0..usable.len())];
                batch.push(build_triplet(seq, &mut rng, cfg, &crops)?);
            }
            let outcome = train_step(
                model,
                &mut opt,
                &batch,
                &anchors,
                label_cfg,
                loss_cfg,
                lr_head,
                lr_bb,
                frozen_early,
                frozen_rest,
                splitmix_step(seed, global_step),
            )?;
            loss_curve.push(outcome.losses.grand_total);
            if let Some(w) = log.as_deref_mut() {
                let rec = StepRecord {
                    step: global_step,
                    epoch,
                    lr: lr_head,
                    losses: outcome.losses,
                };
                writeln!(w, "{}", rec.csv_row())?;
            }
            global_step += 1;
        }
        epoch_hook(model, epoch)?;
    }
    Ok(TrainReport {
        steps: global_step,
        final_loss: loss_curve.last().copied().unwrap_or(f64::NAN),
        loss_curve,
    })
}

fn splitmix_step(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sequence, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny_seq() -> Sequence {
        let cfg = SynthConfig {
            length: 12,
            occlusions: vec![],
            ..Default::default()
        };
        synth_sequence(&cfg, 21).unwrap()
    }

    #[test]
    fn lr_schedule_hits_the_pinned_values() {
        let cfg = TrainConfig::default(); // 10 epochs, warmup 5
        assert!((lr_at(1, 0.0, &cfg).unwrap() - 0.001).abs() < 1e-12);
        assert!((lr_at(5, 1.0, &cfg).unwrap() - 0.005).abs() < 1e-12);
        assert!((lr_at(10, 1.0, &cfg).unwrap() - 0.0005).abs() < 1e-12);
        // Continuity at the warm-up boundary.
        let before = lr_at(5, 1.0, &cfg).unwrap();
        let after = lr_at(6, 0.0, &cfg).unwrap();
        assert!((before - after).abs() < 1e-12);
        // Backbone group: divided by 16 when unfrozen, zero before.
        let late = TrainConfig { unfreeze_epoch: 6, ..Default::default() };
        assert_eq!(backbone_lr(0.004, 3, &late), 0.0);
        assert!((backbone_lr(0.0005, 10, &late) - 0.0005 / 16.0).abs() < 1e-15);
        assert!(lr_at(0, 0.0, &cfg).is_err());
        assert!(lr_at(11, 0.0, &cfg).is_err());
    }

    #[test]
    fn triplet_ordering_holds_over_many_draws() {
        // Index property sweep (10k draws), plus a handful of full builds.
        let annotated: Vec<usize> = (0..40).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let (z, u, x) = sample_indices(&annotated, 15, &mut rng);
            assert!(z <= u && u <= x);
            assert!(x - z <= 15);
        }
        let seq = tiny_seq();
        let cfg = TrainConfig::default();
        let crops = CropSizes::default();
        for _ in 0..5 {
            let t = build_triplet(&seq, &mut rng, &cfg, &crops).unwrap();
            let (z, u, x) = t.frames;
            assert!(z <= u && u <= x);
        }
    }

    #[test]
    fn triplet_patch_sizes_match_the_crop_config() {
        let seq = tiny_seq();
        let cfg = TrainConfig::default();
        let crops = CropSizes::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = build_triplet(&seq, &mut rng, &cfg, &crops).unwrap();
        assert_eq!(t.exemplar.chw(), (3, 127, 127));
        assert_eq!(t.update.chw(), (3, 127, 127));
        assert_eq!(t.search.chw(), (3, 255, 255));
    }

    #[test]
    fn length_two_sequence_constrains_the_update_frame() {
        let cfg = SynthConfig {
            length: 2,
            occlusions: vec![],
            ..Default::default()
        };
        let seq = synth_sequence(&cfg, 8).unwrap();
        let tcfg = TrainConfig::default();
        let crops = CropSizes::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let t = build_triplet(&seq, &mut rng, &tcfg, &crops).unwrap();
            let (z, u, x) = t.frames;
            assert!(u == z || u == x);
        }
    }

    #[test]
    fn augmentation_with_zero_probabilities_is_identity() {
        let cfg = TrainConfig {
            aug_rotate_prob: 0.0,
            aug_blur_prob: 0.0,
            aug_occlude_prob: 0.0,
            ..Default::default()
        };
        let patch = Tensor::from_vec(&[3, 9, 9], (0..243).map(|v| v as f64).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_update(&patch, &mut rng, &cfg);
        assert_eq!(out, patch);
    }

    #[test]
    fn forced_occlusion_paints_the_configured_area() {
        let cfg = TrainConfig {
            aug_rotate_prob: 0.0,
            aug_blur_prob: 0.0,
            aug_occlude_prob: 1.0,
            ..Default::default()
        };
        let patch = Tensor::full(&[3, 127, 127], 100.0);
        // Make one pixel differ so the mean is not the patch value.
        let mut patch = patch;
        patch.set3(0, 0, 0, 200.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = augment_update(&patch, &mut rng, &cfg);
        let changed = out
            .data()
            .iter()
            .zip(patch.data().iter())
            .filter(|(a, b)| a != b)
            .count()
            / 3;
        let frac = changed as f64 / (127.0 * 127.0);
        assert!((0.08..=0.33).contains(&frac), "occluded fraction {frac}");
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let cfg = TrainConfig::default();
        let patch = Tensor::from_vec(&[3, 31, 31], (0..3 * 961).map(|v| (v % 255) as f64).collect());
        let a = augment_update(&patch, &mut ChaCha8Rng::seed_from_u64(9), &cfg);
        let b = augment_update(&patch, &mut ChaCha8Rng::seed_from_u64(9), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn weight_decay_targets_only_convolution_weights() {
        let model = Model::init(&ModelConfig::tiny(), 1).unwrap();
        for (_, e) in model.params.iter() {
            let is_weight = e.name.ends_with(".weight");
            let is_decayed = e.kind == ParamKind::Weight;
            assert_eq!(
                is_weight, is_decayed,
                "{}: kind {:?} does not match name",
                e.name, e.kind
            );
            if e.name.contains("gamma") || e.name.contains("beta") || e.name.ends_with(".bias") {
                assert_ne!(e.kind, ParamKind::Weight, "{} must not decay", e.name);
            }
        }
    }

    fn tiny_batch(n: usize) -> Vec<SampleTriplet> {
        let seq = tiny_seq();
        let cfg = TrainConfig::default();
        let crops = CropSizes::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|_| build_triplet(&seq, &mut rng, &cfg, &crops).unwrap())
            .collect()
    }

    #[test]
    fn zero_lr_steps_leave_parameters_unchanged() {
        let mut model = Model::init(&ModelConfig::tiny(), 2).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = Sgd::new(&cfg);
        let anchors = generate_anchors(&model.cfg.anchors, 25).unwrap();
        let batch = tiny_batch(2);
        let before: Vec<Tensor> = model
            .params
            .iter()
            .filter(|(_, e)| e.kind != ParamKind::Buffer)
            .map(|(_, e)| e.value.clone())
            .collect();
        for _ in 0..2 {
            train_step(
                &mut model,
                &mut opt,
                &batch,
                &anchors,
                &LabelConfig::default(),
                &crate::loss::LossConfig::default(),
                0.0,
                0.0,
                false,
                false,
                7,
            )
            .unwrap();
        }
        let after: Vec<Tensor> = model
            .params
            .iter()
            .filter(|(_, e)| e.kind != ParamKind::Buffer)
            .map(|(_, e)| e.value.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn frozen_backbone_stays_bit_identical_through_steps() {
        let mut model = Model::init(&ModelConfig::tiny(), 2).unwrap();
        let cfg = TrainConfig::default();
        let mut opt = Sgd::new(&cfg);
        let anchors = generate_anchors(&model.cfg.anchors, 25).unwrap();
        let batch = tiny_batch(2);
        let backbone_before: Vec<(String, Tensor)> = model
            .params
            .iter()
            .filter(|(_, e)| e.name.starts_with("backbone."))
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        let head_before: Vec<Tensor> = model
            .params
            .iter()
            .filter(|(_, e)| e.group == crate::nn::ParamGroup::Head && e.kind != ParamKind::Buffer)
            .map(|(_, e)| e.value.clone())
            .collect();
        let outcome = train_step(
            &mut model,
            &mut opt,
            &batch,
            &anchors,
            &LabelConfig::default(),
            &crate::loss::LossConfig::default(),
            0.01,
            0.0,
            true,
            true,
            7,
        )
        .unwrap();
        assert_eq!(outcome.backbone_passes, 3 * batch.len());
        for (name, t) in &backbone_before {
            let id = model.params.id_by_name(name).unwrap();
            assert_eq!(model.params.get(id), t, "{name} changed while frozen");
        }
        let head_after: Vec<Tensor> = model
            .params
            .iter()
            .filter(|(_, e)| e.group == crate::nn::ParamGroup::Head && e.kind != ParamKind::Buffer)
            .map(|(_, e)| e.value.clone())
            .collect();
        assert_ne!(head_before, head_after, "head parameters must move");
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_curve_exactly() {
        let run = || {
            let mut model = Model::init(&ModelConfig::tiny(), 5).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                warmup_epochs: 1,
                pairs_per_epoch: 4,
                batch_size: 2,
                ..Default::default()
            };
            let seqs = vec![tiny_seq()];
            train(
                &mut model,
                &seqs,
                &cfg,
                &LabelConfig::default(),
                &crate::loss::LossConfig::default(),
                11,
                None,
                |_, _| Ok(()),
            )
            .unwrap()
            .loss_curve
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b, "loss curves must reproduce bit-exactly");
    }
}
