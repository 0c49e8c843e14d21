//! Sequence sources: a deterministic synthetic drift-sequence generator and
//! OTB-layout disk ingestion.
//!
//! Synthetic sequences render a textured superellipse over a textured
//! background. The object's texture and color drift from a start palette to
//! an end palette at a configurable per-frame rate, its motion integrates a
//! velocity with reflection at the borders, and scheduled occlusion
//! rectangles (drawn from the background texture, so they act like
//! distractors) and full-frame blur events inject tracking noise. Optional
//! distractor objects move independently and are drawn beneath the target;
//! the first distractor is a "twin" that permanently wears the target's
//! initial appearance, so a tracker holding a stale template has something
//! to be wrong about once the target drifts. Ground truth is the rendered
//! target's exact bounding box; coordinates are quantized to 1/1024 px so
//! the on-disk 1-indexed corner form round-trips bit-exactly.
//!
//! On-disk layout mirrors OTB: `img/0001.png ...` plus
//! `groundtruth_rect.txt` with one comma- or tab-separated `x,y,w,h` line
//! per frame (1-indexed corners), plus `meta.json` for synthetic output.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::img::Frame;
use crate::nn::Tensor;

/// Schedule window in frame indices.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct EventWindow {
    pub start: usize,
    pub len: usize,
}

impl EventWindow {
    fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.start + self.len
    }
}

/// Synthetic sequence generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frame_size: usize,
    pub length: usize,
    /// Base half-extent of the object in pixels.
    pub object_size: f64,
    pub object_seed: u64,
    pub background_seed: u64,
    /// Speed in px/frame; direction is drawn per sequence.
    pub velocity: f64,
    /// Uniform per-frame jitter added to the motion.
    pub motion_noise: f64,
    /// Appearance drift per frame; the object's texture and color reach the
    /// end palette after 1/rate frames. 0 freezes appearance.
    pub drift_rate: f64,
    /// Relative size oscillation amplitude and period.
    pub scale_amp: f64,
    pub scale_period: f64,
    pub occlusions: Vec<EventWindow>,
    pub blurs: Vec<EventWindow>,
    /// Independently moving distractor objects drawn beneath the target.
    /// The first one keeps the target's initial appearance for the whole
    /// sequence.
    pub distractors: usize,
    /// Sequences emitted per `synth` run.
    pub count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_size: 256,
            length: 60,
            object_size: 24.0,
            object_seed: 1,
            background_seed: 2,
            velocity: 1.6,
            motion_noise: 0.4,
            drift_rate: 0.012,
            scale_amp: 0.06,
            scale_period: 40.0,
            occlusions: vec![EventWindow { start: 30, len: 5 }],
            blurs: vec![],
            distractors: 1,
            count: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 32 || self.length == 0 {
            return Err(Error::InvalidConfig("frame_size >= 32 and length >= 1 required".into()));
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate <= 1.0) {
            return Err(Error::InvalidConfig("drift_rate must lie in [0,1]".into()));
        }
        let max_half = self.object_size * (1.0 + self.scale_amp) * 1.5;
        if 2.0 * (max_half + 4.0) >= self.frame_size as f64 {
            return Err(Error::InvalidConfig("object does not fit in the frame".into()));
        }
        for w in self.occlusions.iter().chain(&self.blurs) {
            if w.start + w.len > self.length {
                return Err(Error::InvalidConfig(format!(
                    "schedule window {}+{} exceeds sequence length {}",
                    w.start, w.len, self.length
                )));
            }
        }
        Ok(())
    }
}

/// splitmix64; the lattice hash behind the value noise.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash01(seed: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(
        seed ^ (x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothed lattice value noise in [0, 1].
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let xf = x.floor();
    let yf = y.floor();
    let (ix, iy) = (xf as i64, yf as i64);
    let tx = smoothstep(x - xf);
    let ty = smoothstep(y - yf);
    let v00 = hash01(seed, ix, iy);
    let v10 = hash01(seed, ix + 1, iy);
    let v01 = hash01(seed, ix, iy + 1);
    let v11 = hash01(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * tx;
    let bot = v01 + (v11 - v01) * tx;
    top + (bot - top) * ty
}

/// Two-octave fractal value noise in [0, 1].
fn fbm(seed: u64, x: f64, y: f64) -> f64 {
    (2.0 * value_noise(seed, x, y) + value_noise(seed ^ 0x5bd1, x * 2.3, y * 2.3)) / 3.0
}

/// Quantize to 1/1024 px so the 1-indexed disk form round-trips exactly.
fn q1024(v: f64) -> f64 {
    (v * 1024.0).round() / 1024.0
}

/// Object appearance drawn once per sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectParams {
    /// Superellipse exponent.
    exponent: f64,
    /// Height/width ratio of the object.
    aspect: f64,
    color_start: [f64; 3],
    color_end: [f64; 3],
    tex_seed_start: u64,
    tex_seed_end: u64,
    tex_freq: f64,
}

/// Per-frame object state; box half-extents are pre-quantized.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TrajPoint {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

/// Everything needed to render any frame of a synthetic sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthDerived {
    cfg: SynthConfig,
    seed: u64,
    object: ObjectParams,
    bg_seed: u64,
    trajectory: Vec<TrajPoint>,
    /// Occlusion rectangle offset/size factors, one per scheduled event.
    occluder_shapes: Vec<(f64, f64, f64, f64)>,
    distractors: Vec<DistractorDerived>,
}

/// One distractor: its appearance and full trajectory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistractorDerived {
    object: ObjectParams,
    /// Frozen drift phase: the twin stays at 0 (initial target look).
    alpha: f64,
    trajectory: Vec<TrajPoint>,
}

/// A sequence of frames with per-frame ground truth. Frames are produced on
/// demand: synthetic ones are re-rendered, disk ones re-read.
#[derive(Debug)]
pub struct Sequence {
    pub name: String,
    pub gt: Vec<Option<BBox>>,
    source: FrameSource,
}

#[derive(Debug)]
enum FrameSource {
    Memory(Vec<Frame>),
    Disk(Vec<PathBuf>),
    Synth(Box<SynthDerived>),
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn frame(&self, t: usize) -> Result<Frame> {
        match &self.source {
            FrameSource::Memory(frames) => Ok(frames[t].clone()),
            FrameSource::Disk(paths) => Frame::load(&paths[t]),
            FrameSource::Synth(d) => Ok(render_frame(d, t)),
        }
    }

    pub fn synth_meta(&self) -> Option<(&SynthConfig, u64)> {
        match &self.source {
            FrameSource::Synth(d) => Some((&d.cfg, d.seed)),
            _ => None,
        }
    }

    /// First frame index with a usable ground-truth box.
    pub fn first_annotated(&self) -> Option<usize> {
        self.gt.iter().position(|g| g.is_some())
    }
}

/// Uniform spawn point that keeps a box of the given half-extent inside.
fn spawn_point(cfg: &SynthConfig, max_base_half: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let margin = max_base_half * (1.0 + cfg.scale_amp) + 4.0;
    let hi = cfg.frame_size as f64 - margin;
    (rng.gen_range(margin..hi), rng.gen_range(margin..hi))
}

/// Velocity + jitter integration with reflection at the borders; sizes
/// oscillate with the configured amplitude. Positions quantize to 1/1024.
fn integrate_trajectory(
    cfg: &SynthConfig,
    base_w: f64,
    base_h: f64,
    start: (f64, f64),
    velocity: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<TrajPoint> {
    let max_half = base_w.max(base_h) * (1.0 + cfg.scale_amp) + 2.0;
    let margin = max_half + 2.0;
    let hi = cfg.frame_size as f64 - margin;
    let (mut cx, mut cy) = start;
    cx = cx.clamp(margin, hi);
    cy = cy.clamp(margin, hi);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (velocity * theta.cos(), velocity * theta.sin());
    let mut trajectory = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let scale = 1.0 + cfg.scale_amp * (std::f64::consts::TAU * t as f64 / cfg.scale_period).sin();
        trajectory.push(TrajPoint {
            cx: q1024(cx),
            cy: q1024(cy),
            half_w: q1024(base_w * scale),
            half_h: q1024(base_h * scale),
        });
        cx += vx + rng.gen_range(-cfg.motion_noise..=cfg.motion_noise);
        cy += vy + rng.gen_range(-cfg.motion_noise..=cfg.motion_noise);
        if cx < margin {
            cx = 2.0 * margin - cx;
            vx = -vx;
        }
        if cx > hi {
            cx = 2.0 * hi - cx;
            vx = -vx;
        }
        if cy < margin {
            cy = 2.0 * margin - cy;
            vy = -vy;
        }
        if cy > hi {
            cy = 2.0 * hi - cy;
            vy = -vy;
        }
    }
    trajectory
}

/// Generate a synthetic sequence. Fully deterministic in `(cfg, seed)`.
pub fn synth_sequence(cfg: &SynthConfig, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    let mut obj_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.object_seed ^ splitmix(seed)));
    let object = ObjectParams {
        exponent: obj_rng.gen_range(2.0..3.5),
        aspect: obj_rng.gen_range(0.75..1.35),
        color_start: [
            obj_rng.gen_range(60.0..230.0),
            obj_rng.gen_range(60.0..230.0),
            obj_rng.gen_range(60.0..230.0),
        ],
        color_end: [
            obj_rng.gen_range(20.0..200.0),
            obj_rng.gen_range(20.0..200.0),
            obj_rng.gen_range(20.0..200.0),
        ],
        tex_seed_start: obj_rng.gen(),
        tex_seed_end: obj_rng.gen(),
        tex_freq: obj_rng.gen_range(2.0..4.5),
    };
    let bg_seed = splitmix(cfg.background_seed ^ splitmix(seed ^ 0xbac0_ffee));

    // Integrate the motion once; pixel rendering replays from this.
    let mut motion = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x0d0_cafe));
    let base_w = cfg.object_size;
    let base_h = cfg.object_size * object.aspect;
    let start = spawn_point(cfg, base_w.max(base_h), &mut motion);
    let trajectory = integrate_trajectory(cfg, base_w, base_h, start, cfg.velocity, &mut motion);
    let occluder_shapes = cfg
        .occlusions
        .iter()
        .map(|_| {
            (
                motion.gen_range(-0.5..0.5),
                motion.gen_range(-0.5..0.5),
                motion.gen_range(0.9..1.6),
                motion.gen_range(0.5..0.9),
            )
        })
        .collect();

    // Distractors: independent motion, drawn beneath the target. The first
    // one is a twin frozen at the target's initial appearance.
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for di in 0..cfg.distractors {
        let base = if di == 0 {
            // The twin copies the target wholesale.
            object.clone()
        } else {
            ObjectParams {
                exponent: obj_rng.gen_range(2.0..3.5),
                aspect: obj_rng.gen_range(0.75..1.35),
                color_start: [
                    obj_rng.gen_range(40.0..230.0),
                    obj_rng.gen_range(40.0..230.0),
                    obj_rng.gen_range(40.0..230.0),
                ],
                color_end: [0.0; 3],
                tex_seed_start: obj_rng.gen(),
                tex_seed_end: 0,
                tex_freq: obj_rng.gen_range(2.0..4.5),
            }
        };
        // Distractor appearance never drifts: freeze at the start palette.
        let dobj = ObjectParams {
            color_end: base.color_start,
            tex_seed_end: base.tex_seed_start,
            ..base
        };
        let size = cfg.object_size * motion.gen_range(0.8..1.15);
        let (bw, bh) = (size, size * dobj.aspect);
        // Spawn clear of the target's starting box.
        let sep = 1.3 * (base_w.max(base_h) + bw.max(bh));
        let mut dstart = spawn_point(cfg, bw.max(bh), &mut motion);
        for _ in 0..100 {
            let dx = dstart.0 - start.0;
            let dy = dstart.1 - start.1;
            if (dx * dx + dy * dy).sqrt() >= sep {
                break;
            }
            dstart = spawn_point(cfg, bw.max(bh), &mut motion);
        }
        let dvel = cfg.velocity * motion.gen_range(0.5..1.0);
        let dtraj = integrate_trajectory(cfg, bw, bh, dstart, dvel, &mut motion);
        distractors.push(DistractorDerived {
            object: dobj,
            alpha: 0.0,
            trajectory: dtraj,
        });
    }

    let derived = SynthDerived {
        cfg: cfg.clone(),
        seed,
        object,
        bg_seed,
        trajectory,
        occluder_shapes,
        distractors,
    };
    let gt = derived
        .trajectory
        .iter()
        .map(|p| Some(BBox {
            cx: p.cx,
            cy: p.cy,
            w: 2.0 * p.half_w,
            h: 2.0 * p.half_h,
        }))
        .collect();
    Ok(Sequence {
        name: format!("synth_{seed:04}"),
        gt,
        source: FrameSource::Synth(Box::new(derived)),
    })
}

/// Paint one superellipse at drift phase `alpha` onto the color planes.
fn paint_object(plane: &mut Tensor, n: usize, obj: &ObjectParams, p: &TrajPoint, alpha: f64) {
    let x0 = (p.cx - p.half_w).floor().max(0.0) as usize;
    let x1 = ((p.cx + p.half_w).ceil() as usize).min(n - 1);
    let y0 = (p.cy - p.half_h).floor().max(0.0) as usize;
    let y1 = ((p.cy + p.half_h).ceil() as usize).min(n - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            // Pixel center against the superellipse.
            let u = (x as f64 + 0.5 - p.cx) / p.half_w;
            let v = (y as f64 + 0.5 - p.cy) / p.half_h;
            if u.abs().powf(obj.exponent) + v.abs().powf(obj.exponent) > 1.0 {
                continue;
            }
            let ts = value_noise(obj.tex_seed_start, u * obj.tex_freq, v * obj.tex_freq);
            let te = value_noise(obj.tex_seed_end, u * obj.tex_freq, v * obj.tex_freq);
            let tex = 0.55 + 0.45 * ((1.0 - alpha) * ts + alpha * te);
            for c in 0..3 {
                let col = (1.0 - alpha) * obj.color_start[c] + alpha * obj.color_end[c];
                plane.set3(c, y, x, col * tex);
            }
        }
    }
}

fn render_frame(d: &SynthDerived, t: usize) -> Frame {
    let n = d.cfg.frame_size;
    let p = d.trajectory[t];
    let alpha = (d.cfg.drift_rate * t as f64).min(1.0);

    let mut plane = Tensor::zeros(&[3, n, n]);
    // Background: muted two-octave noise.
    for y in 0..n {
        for x in 0..n {
            let v = fbm(d.bg_seed, x as f64 / 23.0, y as f64 / 23.0);
            let w = fbm(d.bg_seed ^ 0x77, x as f64 / 7.0, y as f64 / 7.0);
            plane.set3(0, y, x, 40.0 + 90.0 * v);
            plane.set3(1, y, x, 40.0 + 90.0 * w);
            plane.set3(2, y, x, 40.0 + 90.0 * (0.5 * v + 0.5 * w));
        }
    }
    // Distractors first, target last: the target is never painted over.
    for dis in &d.distractors {
        paint_object(&mut plane, n, &dis.object, &dis.trajectory[t], dis.alpha);
    }
    paint_object(&mut plane, n, &d.object, &p, alpha);
    // Occluders: background-textured rectangles near the object center.
    for (w, shape) in d.cfg.occlusions.iter().zip(&d.occluder_shapes) {
        if !w.contains(t) {
            continue;
        }
        let (ox, oy, fw, fh) = *shape;
        let rw = (2.0 * p.half_w * fw) as usize;
        let rh = (2.0 * p.half_h * fh) as usize;
        let rx = (p.cx + ox * p.half_w - rw as f64 / 2.0).round().max(0.0) as usize;
        let ry = (p.cy + oy * p.half_h - rh as f64 / 2.0).round().max(0.0) as usize;
        for y in ry..(ry + rh).min(n) {
            for x in rx..(rx + rw).min(n) {
                let v = fbm(d.bg_seed ^ 0x0cc1, x as f64 / 9.0, y as f64 / 9.0);
                for c in 0..3 {
                    plane.set3(c, y, x, 50.0 + 100.0 * v);
                }
            }
        }
    }
    // Scheduled full-frame blur.
    if d.cfg.blurs.iter().any(|w| w.contains(t)) {
        plane = crate::img::box_blur(&plane, 5);
    }

    let mut frame = Frame::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let px = [
                plane.at3(0, y, x).round().clamp(0.0, 255.0) as u8,
                plane.at3(1, y, x).round().clamp(0.0, 255.0) as u8,
                plane.at3(2, y, x).round().clamp(0.0, 255.0) as u8,
            ];
            frame.set(x, y, px);
        }
    }
    frame
}

/// Write a sequence in OTB layout (`img/%04d.png`, `groundtruth_rect.txt`,
/// and `meta.json` for synthetic sequences).
pub fn save_otb(seq: &Sequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir)?;
    let mut gt_file = std::fs::File::create(dir.join("groundtruth_rect.txt"))?;
    for t in 0..seq.len() {
        let frame = seq.frame(t)?;
        frame.save_png(&img_dir.join(format!("{:04}.png", t + 1)))?;
        match &seq.gt[t] {
            Some(b) => {
                let (x, y, w, h) = b.corner();
                // 1-indexed corner on disk.
                writeln!(gt_file, "{},{},{},{}", x + 1.0, y + 1.0, w, h)?;
            }
            None => writeln!(gt_file, "NaN,NaN,NaN,NaN")?,
        }
    }
    if let Some((cfg, seed)) = seq.synth_meta() {
        let meta = serde_json::json!({ "seed": seed, "config": cfg });
        std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    }
    Ok(())
}

/// Load an OTB-layout sequence directory.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join("groundtruth_rect.txt");
    let file = std::fs::File::open(&gt_path).map_err(|e| Error::DataFormat {
        path: gt_path.clone(),
        msg: format!("cannot open ground truth: {e}"),
    })?;
    let mut gt = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        gt.push(parse_gt_line(trimmed).map_err(|msg| Error::DataFormat {
            path: gt_path.clone(),
            msg: format!("line {}: {msg}", lineno + 1),
        })?);
    }

    let img_dir = dir.join("img");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::DataFormat {
            path: img_dir.clone(),
            msg: format!("cannot list frames: {e}"),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                Some(ref ext) if ["png", "jpg", "jpeg", "bmp"].contains(&ext.as_str())
            )
        })
        .collect();
    paths.sort();
    if paths.len() != gt.len() {
        return Err(Error::DataFormat {
            path: dir.to_path_buf(),
            msg: format!(
                "{} frames but {} ground-truth lines",
                paths.len(),
                gt.len()
            ),
        });
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(Sequence {
        name,
        gt,
        source: FrameSource::Disk(paths),
    })
}

/// Parse one `x,y,w,h` line (comma or tab separated, 1-indexed corners).
fn parse_gt_line(line: &str) -> std::result::Result<Option<BBox>, String> {
    let fields: Vec<&str> = line
        .split(|c| c == ',' || c == '\t')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let mut vals = [0.0f64; 4];
    for (i, f) in fields.iter().enumerate() {
        vals[i] = f
            .parse::<f64>()
            .map_err(|_| format!("unparseable number {f:?}"))?;
    }
    if vals.iter().any(|v| v.is_nan()) {
        return Ok(None);
    }
    // Disk corners are 1-indexed.
    BBox::from_corner(vals[0] - 1.0, vals[1] - 1.0, vals[2], vals[3])
        .map(Some)
        .map_err(|e| e.to_string())
}

/// In-memory sequence, for tests.
pub fn memory_sequence(name: &str, frames: Vec<Frame>, gt: Vec<Option<BBox>>) -> Sequence {
    assert_eq!(frames.len(), gt.len());
    Sequence {
        name: name.into(),
        gt,
        source: FrameSource::Memory(frames),
    }
}
