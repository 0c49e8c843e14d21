//! Online tracking: per-frame inference with cosine-window and
//! scale-change penalties, plus the confidence-gated periodic template
//! update.
//!
//! Update policy: every tracked frame may replace the single-slot update
//! buffer (result confidence strictly above the threshold wins, latest
//! entry kept); every N-th frame, if the buffer is non-empty and updating
//! is enabled, the active template is refreshed as fuse(initial, buffered).
//! Fusion always starts from the immutable initial exemplar features, so
//! templates never compound across refreshes.

use serde::{Deserialize, Serialize};

use crate::backbone::{TemplateSet, TemplateTag};
use crate::error::{Error, Result};
use crate::geometry::{
    crop_patch, decode_box, generate_anchors, patch_to_frame, AnchorSet, BBox,
};
use crate::img::Frame;
use crate::model::Model;
use crate::nn::{Ctx, Tensor};

/// Inference-time knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Confidence threshold for buffering an update sample (strictly more).
    pub confidence_threshold: f64,
    /// Refresh the template every this many frames.
    pub refresh_period: usize,
    /// Cosine window mixing weight.
    pub window_influence: f64,
    /// Scale/ratio change penalty strength.
    pub penalty_k: f64,
    /// Box size smoothing rate toward the previous frame.
    pub smoothing: f64,
    pub update_enabled: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            confidence_threshold: 0.9,
            refresh_period: 10,
            window_influence: 0.40,
            penalty_k: 0.05,
            smoothing: 0.30,
            update_enabled: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::InvalidConfig("confidence_threshold must lie in (0,1)".into()));
        }
        if self.refresh_period == 0 {
            return Err(Error::InvalidConfig("refresh_period must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.window_influence) || !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::InvalidConfig("window_influence and smoothing must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// A buffered update sample.
#[derive(Debug, Clone)]
pub struct UpdateCandidate {
    pub patch: Tensor,
    pub confidence: f64,
    pub frame: usize,
}

/// The buffer-and-period policy, separated from the network so scripted
/// confidence sequences can drive it directly.
#[derive(Debug, Clone)]
pub struct UpdateScheduler {
    pub enabled: bool,
    pub confidence_threshold: f64,
    pub period: usize,
    buffer: Option<UpdateCandidate>,
}

impl UpdateScheduler {
    pub fn new(cfg: &TrackerConfig) -> Self {
        UpdateScheduler {
            enabled: cfg.update_enabled,
            confidence_threshold: cfg.confidence_threshold,
            period: cfg.refresh_period,
            buffer: None,
        }
    }

    /// Offer a tracked-frame result. The patch is only materialized when
    /// the confidence qualifies; the latest qualifying entry wins.
    pub fn offer(
        &mut self,
        frame: usize,
        confidence: f64,
        patch: impl FnOnce() -> Result<Tensor>,
    ) -> Result<bool> {
        if confidence > self.confidence_threshold {
            self.buffer = Some(UpdateCandidate {
                patch: patch()?,
                confidence,
                frame,
            });
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Refresh fires iff enabled, the frame counter is a multiple of the
    /// period, and a candidate is buffered.
    pub fn due(&self, frame_counter: usize) -> bool {
        self.enabled && frame_counter % self.period == 0 && self.buffer.is_some()
    }

    pub fn buffered(&self) -> Option<&UpdateCandidate> {
        self.buffer.as_ref()
    }
}

/// Mutable per-sequence tracking state.
pub struct TrackState {
    /// Initial exemplar features; immutable after init.
    zf: TemplateSet,
    active: TemplateSet,
    scheduler: UpdateScheduler,
    pub prev_box: BBox,
    pub frame_counter: usize,
    cfg: TrackerConfig,
    anchors: AnchorSet,
    window: Vec<f64>,
}

impl TrackState {
    pub fn initial_template(&self) -> &TemplateSet {
        &self.zf
    }

    pub fn active_template(&self) -> &TemplateSet {
        &self.active
    }

    pub fn scheduler(&self) -> &UpdateScheduler {
        &self.scheduler
    }
}

/// Outer product of a Hann window over the response grid.
fn cosine_window(r: usize) -> Vec<f64> {
    let hann = |i: usize| {
        if r == 1 {
            1.0
        } else {
            0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (r - 1) as f64).cos()
        }
    };
    let mut w = Vec::with_capacity(r * r);
    for row in 0..r {
        for col in 0..r {
            w.push(hann(row) * hann(col));
        }
    }
    w
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

fn padded_size(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

/// Initialize tracking from the annotated first frame.
pub fn init_track(model: &Model, frame: &Frame, gt: &BBox, cfg: &TrackerConfig) -> Result<TrackState> {
    cfg.validate()?;
    let crops = model.cfg.crops;
    let patch = crop_patch(frame, (gt.cx, gt.cy), gt, crops.exemplar, crops.exemplar);
    let mut ctx = Ctx::eval(&model.params);
    let t = model.encode_template(&mut ctx, &Model::to_net_input(&patch))?;
    let zf = t.detach(&ctx, TemplateTag::Initial);
    let response = model.cfg.response_size();
    Ok(TrackState {
        active: zf.clone(),
        zf,
        scheduler: UpdateScheduler::new(cfg),
        prev_box: *gt,
        frame_counter: 0,
        cfg: cfg.clone(),
        anchors: generate_anchors(&model.cfg.anchors, response)?,
        window: cosine_window(response),
    })
}

/// Scored candidate selection: multiply raw foreground probabilities by the
/// scale/ratio penalty, mix with the cosine window, return the argmax and
/// its penalty. Pure so its invariants are directly testable.
pub fn penalized_argmax(
    probs: &[f64],
    sizes: &[(f64, f64)],
    prev_size_patch: (f64, f64),
    window: &[f64],
    cfg: &TrackerConfig,
) -> (usize, f64) {
    let cells = window.len();
    let prev_sz = padded_size(prev_size_patch.0, prev_size_patch.1);
    let prev_ratio = prev_size_patch.0 / prev_size_patch.1;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_penalty = 1.0;
    for (i, (&p, &(w, h))) in probs.iter().zip(sizes.iter()).enumerate() {
        let s_c = change(padded_size(w, h) / prev_sz);
        let r_c = change(prev_ratio / (w / h));
        let penalty = (cfg.penalty_k * (1.0 - r_c * s_c)).exp();
        let pscore =
            (1.0 - cfg.window_influence) * (p * penalty) + cfg.window_influence * window[i % cells];
        if pscore > best_score {
            best_score = pscore;
            best = i;
            best_penalty = penalty;
        }
    }
    (best, best_penalty)
}

/// Track one frame: crop the search region around the previous box, score
/// all anchors with the active template, and return the predicted box in
/// frame coordinates plus the raw (pre-penalty) confidence.
pub fn track_step(model: &Model, state: &mut TrackState, frame: &Frame) -> Result<(BBox, f64)> {
    let crops = model.cfg.crops;
    let prev = state.prev_box;
    let side = prev.context_side() * crops.search as f64 / crops.exemplar as f64;
    let center = (prev.cx, prev.cy);
    let patch = crop_patch(frame, center, &prev, crops.search, crops.exemplar);

    let mut ctx = Ctx::eval(&model.params);
    let sp = model.encode_search(&mut ctx, &Model::to_net_input(&patch))?;
    let tmpl = state.active.insert(&mut ctx);
    let out = model.rpn.forward(&mut ctx, &tmpl, &sp)?;
    let layout = out.layout;
    let cls = ctx.g.value(out.cls);
    let reg = ctx.g.value(out.reg);

    let r = layout.response;
    let n = layout.anchor_count();
    let mut probs = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let mut sizes = Vec::with_capacity(n);
    for a in 0..layout.anchors {
        for row in 0..r {
            for col in 0..r {
                let lb = cls.data()[layout.cls_bg(a, row, col)];
                let lf = cls.data()[layout.cls_fg(a, row, col)];
                let m = lb.max(lf);
                let p = (lf - m).exp() / ((lb - m).exp() + (lf - m).exp());
                let deltas = [
                    reg.data()[layout.reg(a, 0, row, col)],
                    reg.data()[layout.reg(a, 1, row, col)],
                    reg.data()[layout.reg(a, 2, row, col)],
                    reg.data()[layout.reg(a, 3, row, col)],
                ];
                let anchor = state.anchors.boxes[state.anchors.flat_index(a, row, col)];
                let b = decode_box(&anchor, deltas);
                probs.push(p);
                sizes.push((b.w, b.h));
                boxes.push(b);
            }
        }
    }
    if probs.iter().any(|v| !v.is_finite()) || boxes.iter().any(|b| !(b.w.is_finite() && b.h.is_finite())) {
        return Err(Error::NonFinite {
            context: format!("track_step scores at frame {}", state.frame_counter + 1),
        });
    }

    // Previous size expressed in search-patch pixels.
    let f = crops.search as f64 / side;
    let (best, penalty) = penalized_argmax(
        &probs,
        &sizes,
        (prev.w * f, prev.h * f),
        &state.window,
        &state.cfg,
    );
    let confidence = probs.iter().cloned().fold(0.0f64, f64::max);

    let chosen = patch_to_frame(&boxes[best], center, side, crops.search);
    // Smooth the size toward the previous box; take the position as-is.
    let rate = (state.cfg.smoothing * penalty * probs[best]).clamp(0.0, 1.0);
    let mut w = prev.w * (1.0 - rate) + chosen.w * rate;
    let mut h = prev.h * (1.0 - rate) + chosen.h * rate;
    let max_side = frame.w.max(frame.h) as f64;
    w = w.clamp(4.0, max_side);
    h = h.clamp(4.0, max_side);
    let cx = chosen.cx.clamp(0.0, frame.w as f64);
    let cy = chosen.cy.clamp(0.0, frame.h as f64);
    let new_box = BBox { cx, cy, w, h };

    state.prev_box = new_box;
    state.frame_counter += 1;
    Ok((new_box, confidence))
}

/// Buffer the tracked result as an update candidate when its confidence
/// clears the threshold. Call once per frame, after [`track_step`].
pub fn store_update_candidate(
    model: &Model,
    state: &mut TrackState,
    frame: &Frame,
    predicted: &BBox,
    confidence: f64,
) -> Result<bool> {
    let crops = model.cfg.crops;
    let counter = state.frame_counter;
    state.scheduler.offer(counter, confidence, || {
        Ok(crop_patch(
            frame,
            (predicted.cx, predicted.cy),
            predicted,
            crops.exemplar,
            crops.exemplar,
        ))
    })
}

/// Re-fuse the active template from the initial exemplar and the buffered
/// update sample when the refresh is due. The buffer is retained.
pub fn refresh_template(model: &Model, state: &mut TrackState) -> Result<bool> {
    if !state.scheduler.due(state.frame_counter) {
        return Ok(false);
    }
    let patch = state.scheduler.buffered().expect("due() implies buffered").patch.clone();
    let mut ctx = Ctx::eval(&model.params);
    let t = model.encode_template(&mut ctx, &Model::to_net_input(&patch))?;
    let uf = t.detach(&ctx, TemplateTag::Update);
    let mut fuse_ctx = Ctx::eval(&model.params);
    state.active = model.fusion.fuse_detached(&mut fuse_ctx, &state.zf, &uf)?;
    Ok(true)
}

/// One output row per frame: the box (frame pixels) and the confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedFrame {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Run the full per-frame protocol over a sequence, starting from its
/// first annotated frame. Row 0 echoes the initialization box with
/// confidence 1; refresh frames are returned alongside.
pub fn track_sequence(
    model: &Model,
    seq: &crate::data::Sequence,
    cfg: &TrackerConfig,
) -> Result<(Vec<TrackedFrame>, Vec<usize>)> {
    let start = seq.first_annotated().ok_or_else(|| Error::InvalidConfig(format!(
        "sequence {} has no annotated frame to initialize from",
        seq.name
    )))?;
    let gt0 = seq.gt[start].expect("annotated");
    let mut state = init_track(model, &seq.frame(start)?, &gt0, cfg)?;
    let mut rows = vec![TrackedFrame { bbox: gt0, confidence: 1.0 }];
    let mut refreshes = Vec::new();
    for t in (start + 1)..seq.len() {
        let frame = seq.frame(t)?;
        let (bbox, confidence) = track_step(model, &mut state, &frame)?;
        store_update_candidate(model, &mut state, &frame, &bbox, confidence)?;
        if refresh_template(model, &mut state)? {
            refreshes.push(state.frame_counter);
        }
        rows.push(TrackedFrame { bbox, confidence });
    }
    Ok((rows, refreshes))
}
