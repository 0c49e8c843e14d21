//! Boxes, anchors, labels and context cropping.
//!
//! Everything here is pure arithmetic over the continuous pixel coordinates
//! described in [`crate::img`], and forms the oracle-testable base of the
//! tracker: IoU, the anchor/offset encoding, IoU-threshold label
//! assignment, and the context-aware exemplar/search crops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{crop_resize, Frame};
use crate::nn::Tensor;

/// Axis-aligned box in center-size form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite ({cx},{cy},{w},{h})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("non-positive size {w}x{h}")));
        }
        Ok(BBox { cx, cy, w, h })
    }

    /// From corner form (top-left x, top-left y, width, height).
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// To corner form (top-left x, top-left y, width, height).
    pub fn corner(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let dx = self.cx - other.cx;
        let dy = self.cy - other.cy;
        (dx * dx + dy * dy).sqrt()
    }

    /// Context-augmented square side: sqrt((w + p)(h + p)) with
    /// p = (w + h) / 2.
    pub fn context_side(&self) -> f64 {
        let p = (self.w + self.h) / 2.0;
        ((self.w + p) * (self.h + p)).sqrt()
    }
}

/// Intersection over union, in [0, 1]. Exactly 1 for identical boxes
/// (edge arithmetic on far-from-origin boxes would otherwise round the
/// self-overlap to 1 +- a few ulps).
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (ax, ay, aw, ah) = a.corner();
    let (bx, by, bw, bh) = b.corner();
    let ix = (ax + aw).min(bx + bw) - ax.max(bx);
    let iy = (ay + ah).min(by + bh) - ay.max(by);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Offsets from an anchor to a target box: ((cx-acx)/aw, (cy-acy)/ah,
/// ln(w/aw), ln(h/ah)).
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Exact inverse of [`encode_box`].
pub fn decode_box(anchor: &BBox, deltas: [f64; 4]) -> BBox {
    BBox {
        cx: anchor.cx + deltas[0] * anchor.w,
        cy: anchor.cy + deltas[1] * anchor.h,
        w: anchor.w * deltas[2].exp(),
        h: anchor.h * deltas[3].exp(),
    }
}

/// Anchor grid configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Grid spacing in pixels; equals the backbone's effective stride.
    pub stride: usize,
    pub scales: Vec<f64>,
    /// Height/width ratios; each anchor keeps area (stride*scale)^2.
    pub ratios: Vec<f64>,
    /// Side of the search patch the grid is centered on.
    pub patch_size: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            stride: 8,
            scales: vec![8.0],
            ratios: vec![1.0 / 3.0, 0.5, 1.0, 2.0, 3.0],
            patch_size: 255,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidConfig("anchor stride must be positive".into()));
        }
        if self.ratios.is_empty() || self.scales.is_empty() {
            return Err(Error::InvalidConfig("anchor ratios/scales must be non-empty".into()));
        }
        if self.ratios.iter().chain(&self.scales).any(|v| *v <= 0.0) {
            return Err(Error::InvalidConfig("anchor ratios/scales must be positive".into()));
        }
        Ok(())
    }

    /// Anchors per grid cell.
    pub fn anchors_per_cell(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }
}

/// Anchors tiled over a response grid, laid out `[A, S, S]` flattened as
/// `a * S * S + row * S + col`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub per_cell: usize,
    pub response_size: usize,
    pub stride: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    #[inline]
    pub fn flat_index(&self, a: usize, row: usize, col: usize) -> usize {
        (a * self.response_size + row) * self.response_size + col
    }
}

/// Tile all (ratio, scale) anchor shapes on a `response_size`-sided grid
/// with spacing `stride`, centered on the search-patch center.
pub fn generate_anchors(cfg: &AnchorConfig, response_size: usize) -> Result<AnchorSet> {
    cfg.validate()?;
    if response_size == 0 {
        return Err(Error::InvalidConfig("response size must be >= 1".into()));
    }
    let center = cfg.patch_size as f64 / 2.0;
    let half = (response_size as f64 - 1.0) / 2.0;
    let mut shapes = Vec::with_capacity(cfg.anchors_per_cell());
    for ratio in &cfg.ratios {
        for scale in &cfg.scales {
            let base = cfg.stride as f64 * scale;
            // Area-preserving: w*h = base^2, h/w = ratio.
            shapes.push((base / ratio.sqrt(), base * ratio.sqrt()));
        }
    }
    let mut boxes = Vec::with_capacity(shapes.len() * response_size * response_size);
    for &(w, h) in &shapes {
        for row in 0..response_size {
            let cy = center + (row as f64 - half) * cfg.stride as f64;
            for col in 0..response_size {
                let cx = center + (col as f64 - half) * cfg.stride as f64;
                boxes.push(BBox { cx, cy, w, h });
            }
        }
    }
    Ok(AnchorSet {
        boxes,
        per_cell: shapes.len(),
        response_size,
        stride: cfg.stride,
    })
}

/// Per-anchor classification label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// Label assignment thresholds and sampling caps.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// IoU above which an anchor is positive.
    pub hi_thresh: f64,
    /// IoU below which an anchor is negative.
    pub lo_thresh: f64,
    /// Kept positives per map.
    pub pos_cap: usize,
    /// Kept positives + negatives per map.
    pub total_cap: usize,
    /// Disable to keep every thresholded label (oracle mode).
    pub subsample: bool,
    /// Seed for the subsampling shuffle.
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            hi_thresh: 0.6,
            lo_thresh: 0.3,
            pos_cap: 16,
            total_cap: 64,
            subsample: true,
            seed: 0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hi_thresh) || !(0.0..=1.0).contains(&self.lo_thresh) {
            return Err(Error::InvalidConfig("label thresholds must lie in [0,1]".into()));
        }
        if self.lo_thresh > self.hi_thresh {
            return Err(Error::InvalidConfig("lo_thresh must not exceed hi_thresh".into()));
        }
        if self.pos_cap == 0 || self.total_cap < self.pos_cap {
            return Err(Error::InvalidConfig("label caps must satisfy 0 < pos_cap <= total_cap".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> LabelConfig {
        LabelConfig { seed, ..self.clone() }
    }
}

/// Classification labels and regression targets aligned to an [`AnchorSet`].
/// Regression targets are finite only at positive anchors (NaN elsewhere).
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub labels: Vec<Label>,
    pub reg_targets: Vec<[f64; 4]>,
    pub num_pos: usize,
    pub num_neg: usize,
    /// Set when thresholding produced no positive anchor at all.
    pub no_positives: bool,
}

/// Threshold anchors against the ground-truth box, then (optionally)
/// subsample to the configured caps with a seeded shuffle.
pub fn assign_labels(anchors: &AnchorSet, gt: &BBox, cfg: &LabelConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let n = anchors.len();
    let mut labels = vec![Label::Ignore; n];
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for (i, anchor) in anchors.boxes.iter().enumerate() {
        let v = iou(anchor, gt);
        if v > cfg.hi_thresh {
            labels[i] = Label::Positive;
            pos_idx.push(i);
        } else if v < cfg.lo_thresh {
            labels[i] = Label::Negative;
            neg_idx.push(i);
        }
    }
    let no_positives = pos_idx.is_empty();

    if cfg.subsample {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        if pos_idx.len() > cfg.pos_cap {
            pos_idx.shuffle(&mut rng);
            for &i in &pos_idx[cfg.pos_cap..] {
                labels[i] = Label::Ignore;
            }
            pos_idx.truncate(cfg.pos_cap);
        }
        let neg_budget = cfg.total_cap - pos_idx.len();
        if neg_idx.len() > neg_budget {
            neg_idx.shuffle(&mut rng);
            for &i in &neg_idx[neg_budget..] {
                labels[i] = Label::Ignore;
            }
            neg_idx.truncate(neg_budget);
        }
    }

    let mut reg_targets = vec![[f64::NAN; 4]; n];
    for &i in &pos_idx {
        reg_targets[i] = encode_box(&anchors.boxes[i], gt);
    }
    Ok(LabelMap {
        labels,
        reg_targets,
        num_pos: pos_idx.len(),
        num_neg: neg_idx.len(),
        no_positives,
    })
}

/// Exemplar/search crop sizes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CropSizes {
    pub exemplar: usize,
    pub search: usize,
}

impl Default for CropSizes {
    fn default() -> Self {
        CropSizes { exemplar: 127, search: 255 }
    }
}

/// Context-aware square crop around `center`, resized to `out_size`.
///
/// The window side is the context side of `context_box` scaled by
/// `out_size / exemplar_size`, so the exemplar crop (out = exemplar) uses
/// the context side itself and the search crop shares its resize factor.
/// Out-of-frame area reads the frame's per-channel mean.
pub fn crop_patch(
    frame: &Frame,
    center: (f64, f64),
    context_box: &BBox,
    out_size: usize,
    exemplar_size: usize,
) -> Tensor {
    assert!(out_size >= 1 && exemplar_size >= 1);
    let side = context_box.context_side() * out_size as f64 / exemplar_size as f64;
    crop_resize(frame, center.0, center.1, side, out_size)
}

/// Map a frame-space box into the patch coordinates produced by
/// [`crop_patch`] for the window centered at `center` with side
/// `side` resized to `out`.
pub fn frame_to_patch(b: &BBox, center: (f64, f64), side: f64, out: usize) -> BBox {
    let s = out as f64 / side;
    BBox {
        cx: (b.cx - (center.0 - side / 2.0)) * s,
        cy: (b.cy - (center.1 - side / 2.0)) * s,
        w: b.w * s,
        h: b.h * s,
    }
}

/// Inverse of [`frame_to_patch`].
pub fn patch_to_frame(b: &BBox, center: (f64, f64), side: f64, out: usize) -> BBox {
    let s = side / out as f64;
    BBox {
        cx: b.cx * s + (center.0 - side / 2.0),
        cy: b.cy * s + (center.1 - side / 2.0),
        w: b.w * s,
        h: b.h * s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn iou_identical_is_one() {
        let a = bb(5.0, 5.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::from_corner(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::from_corner(10.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_hand_computed_overlap() {
        // (0..2 x 0..2) vs (1..3 x 0..2): intersection 2, union 6.
        let a = BBox::from_corner(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::from_corner(1.0, 0.0, 2.0, 2.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&b, &a) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_monte_carlo_area_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for case in 0..100 {
            let a = bb(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(0.5..8.0),
                rng.gen_range(0.5..8.0),
            );
            let b = bb(
                a.cx + rng.gen_range(-4.0..4.0),
                a.cy + rng.gen_range(-4.0..4.0),
                rng.gen_range(0.5..8.0),
                rng.gen_range(0.5..8.0),
            );
            // Sample the bounding rectangle of both boxes.
            let (ax, ay, aw, ah) = a.corner();
            let (bx, by, bw, bh) = b.corner();
            let x0 = ax.min(bx);
            let y0 = ay.min(by);
            let x1 = (ax + aw).max(bx + bw);
            let y1 = (ay + ah).max(by + bh);
            let total = 200_000;
            let mut hits_inter = 0u32;
            let mut hits_union = 0u32;
            for _ in 0..total {
                let x = rng.gen_range(x0..x1);
                let y = rng.gen_range(y0..y1);
                let in_a = x > ax && x < ax + aw && y > ay && y < ay + ah;
                let in_b = x > bx && x < bx + bw && y > by && y < by + bh;
                hits_inter += (in_a && in_b) as u32;
                hits_union += (in_a || in_b) as u32;
            }
            let mc = if hits_union == 0 {
                0.0
            } else {
                hits_inter as f64 / hits_union as f64
            };
            let exact = iou(&a, &b);
            assert!(
                (mc - exact).abs() < 0.02,
                "case {case}: mc {mc} vs exact {exact}"
            );
        }
    }

    #[test]
    fn encode_identity_and_analytic_case() {
        let anchor = bb(10.0, 10.0, 4.0, 4.0);
        assert_eq!(encode_box(&anchor, &anchor), [0.0, 0.0, 0.0, 0.0]);
        let gt = bb(12.0, 10.0, 8.0, 4.0);
        let d = encode_box(&anchor, &gt);
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 2.0f64.ln()).abs() < 1e-12);
        assert_eq!(d[3], 0.0);
        let back = decode_box(&anchor, d);
        assert!((back.cx - 12.0).abs() < 1e-12 && (back.w - 8.0).abs() < 1e-12);
    }

    #[test]
    fn decode_zero_deltas_is_anchor() {
        let anchor = bb(3.0, -2.0, 5.0, 7.0);
        let out = decode_box(&anchor, [0.0; 4]);
        assert_eq!(out, anchor);
    }

    #[test]
    fn encode_decode_round_trip_1000_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut max_err = 0.0f64;
        for _ in 0..1000 {
            let anchor = bb(
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(0.1..50.0),
                rng.gen_range(0.1..50.0),
            );
            let gt = bb(
                rng.gen_range(-100.0..100.0),
                rng.gen_range(-100.0..100.0),
                rng.gen_range(0.1..50.0),
                rng.gen_range(0.1..50.0),
            );
            let back = decode_box(&anchor, encode_box(&anchor, &gt));
            max_err = max_err
                .max((back.cx - gt.cx).abs())
                .max((back.cy - gt.cy).abs())
                .max((back.w - gt.w).abs())
                .max((back.h - gt.h).abs());
        }
        assert!(max_err < 1e-9, "max round-trip error {max_err}");
    }

    #[test]
    fn corner_form_round_trips() {
        let b = bb(12.25, -3.5, 7.75, 0.5);
        let (x, y, w, h) = b.corner();
        let back = BBox::from_corner(x, y, w, h).unwrap();
        assert!((back.cx - b.cx).abs() < 1e-9 && (back.cy - b.cy).abs() < 1e-9);
    }

    #[test]
    fn bbox_rejects_degenerate_sizes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -2.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn anchor_count_5_ratios_25_grid() {
        let cfg = AnchorConfig::default();
        let set = generate_anchors(&cfg, 25).unwrap();
        assert_eq!(set.len(), 3125);
        assert_eq!(set.per_cell, 5);
    }

    #[test]
    fn single_anchor_sits_at_patch_center() {
        let cfg = AnchorConfig {
            ratios: vec![1.0],
            scales: vec![8.0],
            ..Default::default()
        };
        let set = generate_anchors(&cfg, 1).unwrap();
        assert_eq!(set.len(), 1);
        let a = set.boxes[0];
        assert_eq!((a.cx, a.cy), (127.5, 127.5));
        // ratio 1, scale 8, stride 8: side = 64.
        assert_eq!((a.w, a.h), (64.0, 64.0));
    }

    #[test]
    fn anchor_grid_spacing_equals_stride() {
        let cfg = AnchorConfig::default();
        let set = generate_anchors(&cfg, 25).unwrap();
        let a = set.boxes[set.flat_index(0, 3, 4)];
        let right = set.boxes[set.flat_index(0, 3, 5)];
        let below = set.boxes[set.flat_index(0, 4, 4)];
        assert_eq!(right.cx - a.cx, 8.0);
        assert_eq!(below.cy - a.cy, 8.0);
    }

    #[test]
    fn empty_ratios_rejected() {
        let cfg = AnchorConfig {
            ratios: vec![],
            ..Default::default()
        };
        assert!(generate_anchors(&cfg, 5).is_err());
    }

    #[test]
    fn anchor_equal_to_gt_is_positive() {
        let cfg = AnchorConfig::default();
        let set = generate_anchors(&cfg, 25).unwrap();
        let gt = set.boxes[set.flat_index(2, 12, 12)];
        let labels = assign_labels(&set, &gt, &LabelConfig::default()).unwrap();
        assert_eq!(labels.labels[set.flat_index(2, 12, 12)], Label::Positive);
        assert!(!labels.no_positives);
    }

    #[test]
    fn far_gt_yields_no_positives_flag() {
        let cfg = AnchorConfig::default();
        let set = generate_anchors(&cfg, 25).unwrap();
        let gt = bb(1000.0, 1000.0, 30.0, 30.0);
        let labels = assign_labels(&set, &gt, &LabelConfig::default()).unwrap();
        assert!(labels.no_positives);
        assert_eq!(labels.num_pos, 0);
        // Regression targets must be NaN everywhere.
        assert!(labels.reg_targets.iter().all(|t| t.iter().all(|v| v.is_nan())));
    }

    #[test]
    fn labels_match_brute_force_oracle_without_subsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = AnchorConfig::default();
        let set = generate_anchors(&cfg, 17).unwrap();
        let lcfg = LabelConfig {
            subsample: false,
            ..Default::default()
        };
        for _ in 0..200 {
            let gt = bb(
                rng.gen_range(40.0..215.0),
                rng.gen_range(40.0..215.0),
                rng.gen_range(10.0..120.0),
                rng.gen_range(10.0..120.0),
            );
            let got = assign_labels(&set, &gt, &lcfg).unwrap();
            for (i, anchor) in set.boxes.iter().enumerate() {
                let v = iou(anchor, &gt);
                let expect = if v > lcfg.hi_thresh {
                    Label::Positive
                } else if v < lcfg.lo_thresh {
                    Label::Negative
                } else {
                    Label::Ignore
                };
                assert_eq!(got.labels[i], expect, "anchor {i}");
                if expect == Label::Positive {
                    let enc = encode_box(anchor, &gt);
                    assert_eq!(got.reg_targets[i], enc);
                } else {
                    assert!(got.reg_targets[i].iter().all(|v| v.is_nan()));
                }
            }
        }
    }

    #[test]
    fn subsampling_respects_caps_and_is_seeded() {
        let cfg = AnchorConfig::default();
        let set = generate_anchors(&cfg, 25).unwrap();
        let gt = bb(127.5, 127.5, 64.0, 64.0);
        let lcfg = LabelConfig::default();
        let a = assign_labels(&set, &gt, &lcfg).unwrap();
        let b = assign_labels(&set, &gt, &lcfg).unwrap();
        assert!(a.num_pos <= lcfg.pos_cap);
        assert!(a.num_pos + a.num_neg <= lcfg.total_cap);
        assert_eq!(a.labels, b.labels);
        let c = assign_labels(&set, &gt, &lcfg.with_seed(1)).unwrap();
        // Different seed, same counts, (almost surely) different picks.
        assert_eq!(a.num_pos, c.num_pos);
        assert_eq!(a.num_neg, c.num_neg);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn context_side_of_square_100_box_is_200() {
        let b = bb(50.0, 50.0, 100.0, 100.0);
        assert!((b.context_side() - 200.0).abs() < 1e-12);
    }

    #[test]
    fn crop_patch_scales_search_window_from_exemplar_side() {
        let mut f = Frame::new(300, 300);
        for (i, v) in f.rgb.iter_mut().enumerate() {
            *v = (i % 256) as u8;
        }
        let b = bb(150.0, 150.0, 100.0, 100.0);
        // Side 200 resized to 127, and 200 * 255/127 resized to 255: the
        // center pixel region must agree between the two (same resize
        // factor, same center).
        let ex = crop_patch(&f, (b.cx, b.cy), &b, 127, 127);
        let sr = crop_patch(&f, (b.cx, b.cy), &b, 255, 127);
        let d = 64; // offset of the exemplar region inside the search patch
        let mut max_diff = 0.0f64;
        for c in 0..3 {
            for y in 0..127 {
                for x in 0..127 {
                    max_diff = max_diff.max((ex.at3(c, y, x) - sr.at3(c, y + d, x + d)).abs());
                }
            }
        }
        assert!(max_diff < 1e-9, "center mismatch {max_diff}");
    }

    #[test]
    fn patch_frame_mapping_round_trips() {
        let b = bb(37.5, 81.25, 14.0, 22.0);
        let center = (40.0, 80.0);
        let p = frame_to_patch(&b, center, 180.0, 255);
        let back = patch_to_frame(&p, center, 180.0, 255);
        assert!((back.cx - b.cx).abs() < 1e-9);
        assert!((back.cy - b.cy).abs() < 1e-9);
        assert!((back.w - b.w).abs() < 1e-9);
        assert!((back.h - b.h).abs() < 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (
                -200.0f64..200.0,
                -200.0f64..200.0,
                0.01f64..150.0,
                0.01f64..150.0,
            )
                .prop_map(|(cx, cy, w, h)| BBox { cx, cy, w, h })
        }

        proptest! {
            #[test]
            fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let ab = iou(&a, &b);
                let ba = iou(&b, &a);
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(ab, ba);
                prop_assert_eq!(iou(&a, &a), 1.0);
            }

            #[test]
            fn encode_decode_invert_each_other(anchor in arb_box(), gt in arb_box()) {
                let back = decode_box(&anchor, encode_box(&anchor, &gt));
                prop_assert!((back.cx - gt.cx).abs() < 1e-9);
                prop_assert!((back.cy - gt.cy).abs() < 1e-9);
                prop_assert!((back.w - gt.w).abs() < 1e-9 * gt.w.max(1.0));
                prop_assert!((back.h - gt.h).abs() < 1e-9 * gt.h.max(1.0));
            }

            #[test]
            fn corner_round_trip_holds(b in arb_box()) {
                let (x, y, w, h) = b.corner();
                let back = BBox::from_corner(x, y, w, h).unwrap();
                prop_assert!((back.cx - b.cx).abs() < 1e-9);
                prop_assert!((back.cy - b.cy).abs() < 1e-9);
            }
        }
    }
}
