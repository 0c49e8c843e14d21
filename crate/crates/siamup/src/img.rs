//! In-memory frames and the resampling helpers behind patch cropping and
//! update-sample augmentation.
//!
//! Coordinate convention, used everywhere boxes meet pixels: continuous
//! image coordinates where pixel `(ix, iy)` occupies the unit square
//! `[ix, ix+1) x [iy, iy+1)` with its center at `(ix + 0.5, iy + 0.5)`.
//! A `WxH` frame therefore spans `[0, W] x [0, H]` and its center is
//! `(W/2, H/2)`.

use std::path::Path;

use crate::error::Result;
use crate::nn::Tensor;

/// An 8-bit RGB frame, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn new(w: usize, h: usize) -> Self {
        Frame {
            w,
            h,
            rgb: vec![0; w * h * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.rgb[(y * self.w + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&px);
    }

    /// Per-channel mean over the whole frame, in 0..255 units.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        for px in self.rgb.chunks_exact(3) {
            sums[0] += px[0] as f64;
            sums[1] += px[1] as f64;
            sums[2] += px[2] as f64;
        }
        let n = (self.w * self.h) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.rgb.clone())
            .expect("frame buffer size");
        img.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Frame> {
        let img = image::open(path)?.to_rgb8();
        Ok(Frame {
            w: img.width() as usize,
            h: img.height() as usize,
            rgb: img.into_raw(),
        })
    }
}

/// Bilinear tap at sample-space coordinates; out-of-frame taps read `fill`.
#[inline]
fn tap(frame: &Frame, ix: isize, iy: isize, c: usize, fill: f64) -> f64 {
    if ix < 0 || iy < 0 || ix >= frame.w as isize || iy >= frame.h as isize {
        fill
    } else {
        frame.get(ix as usize, iy as usize, c) as f64
    }
}

/// Crop the square window of side `side` centered at `(cx, cy)` and resize
/// it to `out x out` with bilinear sampling. Taps outside the frame read the
/// frame's per-channel mean. Returns `[3, out, out]` in 0..255 units.
pub fn crop_resize(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> Tensor {
    let means = frame.channel_means();
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let scale = side / out as f64;
    let mut t = Tensor::zeros(&[3, out, out]);
    for c in 0..3 {
        let fill = means[c];
        for j in 0..out {
            // Continuous coordinate of the output pixel center, shifted by
            // -0.5 into sample space where integer coordinates sit on
            // source pixel centers.
            let v = y0 + (j as f64 + 0.5) * scale - 0.5;
            let iy = v.floor();
            let fy = v - iy;
            for i in 0..out {
                let u = x0 + (i as f64 + 0.5) * scale - 0.5;
                let ix = u.floor();
                let fx = u - ix;
                let (ix, iy) = (ix as isize, iy as isize);
                let p00 = tap(frame, ix, iy, c, fill);
                let p10 = tap(frame, ix + 1, iy, c, fill);
                let p01 = tap(frame, ix, iy + 1, c, fill);
                let p11 = tap(frame, ix + 1, iy + 1, c, fill);
                let top = p00 + (p10 - p00) * fx;
                let bot = p01 + (p11 - p01) * fx;
                t.set3(c, j, i, top + (bot - top) * fy);
            }
        }
    }
    t
}

/// Per-channel mean of a `[3, H, W]` patch.
pub fn patch_means(t: &Tensor) -> [f64; 3] {
    let (c, h, w) = t.chw();
    assert_eq!(c, 3);
    let n = (h * w) as f64;
    let mut m = [0.0; 3];
    for (ch, slot) in m.iter_mut().enumerate() {
        *slot = t.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n;
    }
    m
}

/// Box blur with a k x k kernel (k odd). Taps falling outside the patch are
/// dropped and the kernel renormalized, so edges stay unbiased.
pub fn box_blur(t: &Tensor, k: usize) -> Tensor {
    assert!(k % 2 == 1, "blur kernel must be odd");
    let (c, h, w) = t.chw();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += t.at3(ch, yy as usize, xx as usize);
                        cnt += 1.0;
                    }
                }
                out.set3(ch, y as usize, x as usize, acc / cnt);
            }
        }
    }
    out
}

/// Rotate a square patch around its center by `angle` radians, bilinear,
/// with out-of-patch samples reading `fill`.
pub fn rotate(t: &Tensor, angle: f64, fill: [f64; 3]) -> Tensor {
    let (c, h, w) = t.chw();
    assert_eq!(c, 3);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (s, co) = angle.sin_cos();
    let mut out = Tensor::zeros(&[3, h, w]);
    for j in 0..h {
        for i in 0..w {
            // Inverse-rotate the output pixel center into source space.
            let dy = (j as f64 + 0.5) - cy;
            let dx = (i as f64 + 0.5) - cx;
            let sx = co * dx + s * dy + cx - 0.5;
            let sy = -s * dx + co * dy + cy - 0.5;
            let ix = sx.floor();
            let iy = sy.floor();
            let (fx, fy) = (sx - ix, sy - iy);
            let (ix, iy) = (ix as isize, iy as isize);
            for ch in 0..3 {
                let at = |xx: isize, yy: isize| -> f64 {
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        fill[ch]
                    } else {
                        t.at3(ch, yy as usize, xx as usize)
                    }
                };
                let top = at(ix, iy) + (at(ix + 1, iy) - at(ix, iy)) * fx;
                let bot = at(ix, iy + 1) + (at(ix + 1, iy + 1) - at(ix, iy + 1)) * fx;
                out.set3(ch, j, i, top + (bot - top) * fy);
            }
        }
    }
    out
}

/// Paint an axis-aligned rectangle (pixel index bounds, inclusive start,
/// exclusive end, clamped) with a constant color.
pub fn fill_rect(t: &mut Tensor, x0: usize, y0: usize, rw: usize, rh: usize, color: [f64; 3]) {
    let (c, h, w) = t.chw();
    assert_eq!(c, 3);
    for ch in 0..3 {
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                t.set3(ch, y, x, color[ch]);
            }
        }
    }
}
