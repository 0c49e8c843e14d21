//! Minimal PNG line charts for the success/precision curves: axes, grid,
//! polylines and a built-in 3x5 digit font for tick labels. No text
//! shaping, no external font files.

use std::path::Path;

use crate::error::Result;
use crate::img::Frame;

const W: usize = 640;
const H: usize = 480;
const MARGIN_L: usize = 56;
const MARGIN_R: usize = 16;
const MARGIN_T: usize = 24;
const MARGIN_B: usize = 40;

const BG: [u8; 3] = [255, 255, 255];
const GRID: [u8; 3] = [225, 225, 225];
const AXIS: [u8; 3] = [40, 40, 40];
pub const SERIES_COLORS: [[u8; 3]; 4] = [
    [214, 69, 65],   // red
    [31, 119, 180],  // blue
    [44, 160, 44],   // green
    [148, 103, 189], // purple
];

/// 3x5 bitmaps for '0'-'9' and '.', row-major, one bit per cell.
const DIGITS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111], // 0
    [0b010, 0b110, 0b010, 0b010, 0b111], // 1
    [0b111, 0b001, 0b111, 0b100, 0b111], // 2
    [0b111, 0b001, 0b111, 0b001, 0b111], // 3
    [0b101, 0b101, 0b111, 0b001, 0b001], // 4
    [0b111, 0b100, 0b111, 0b001, 0b111], // 5
    [0b111, 0b100, 0b111, 0b101, 0b111], // 6
    [0b111, 0b001, 0b010, 0b010, 0b010], // 7
    [0b111, 0b101, 0b111, 0b101, 0b111], // 8
    [0b111, 0b101, 0b111, 0b001, 0b111], // 9
    [0b000, 0b000, 0b000, 0b000, 0b010], // .
];

fn put(frame: &mut Frame, x: isize, y: isize, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < frame.w && (y as usize) < frame.h {
        frame.set(x as usize, y as usize, color);
    }
}

fn draw_glyph(frame: &mut Frame, ch: char, x: usize, y: usize, scale: usize, color: [u8; 3]) {
    let idx = match ch {
        '0'..='9' => ch as usize - '0' as usize,
        '.' => 10,
        _ => return,
    };
    for (row, bits) in DIGITS[idx].iter().enumerate() {
        for col in 0..3 {
            if bits & (0b100 >> col) != 0 {
                for dy in 0..scale {
                    for dx in 0..scale {
                        put(
                            frame,
                            (x + col * scale + dx) as isize,
                            (y + row * scale + dy) as isize,
                            color,
                        );
                    }
                }
            }
        }
    }
}

fn draw_label(frame: &mut Frame, text: &str, x: usize, y: usize, color: [u8; 3]) {
    let scale = 2;
    let mut cx = x;
    for ch in text.chars() {
        draw_glyph(frame, ch, cx, y, scale, color);
        cx += 4 * scale;
    }
}

fn draw_line(frame: &mut Frame, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(
            frame,
            (x0 + (x1 - x0) * t).round() as isize,
            (y0 + (y1 - y0) * t).round() as isize,
            color,
        );
    }
}

/// One curve: y values over [x_min, x_max], all y expected in [0, 1].
pub struct Series<'a> {
    pub ys: &'a [f64],
    pub color: [u8; 3],
}

/// Render curves with a 0..1 y-axis to a PNG.
pub fn render_curves(path: &Path, series: &[Series], x_min: f64, x_max: f64) -> Result<()> {
    let mut frame = Frame::new(W, H);
    for y in 0..H {
        for x in 0..W {
            frame.set(x, y, BG);
        }
    }
    let plot_w = (W - MARGIN_L - MARGIN_R) as f64;
    let plot_h = (H - MARGIN_T - MARGIN_B) as f64;
    let px = |fx: f64| MARGIN_L as f64 + (fx - x_min) / (x_max - x_min) * plot_w;
    let py = |fy: f64| MARGIN_T as f64 + (1.0 - fy) * plot_h;

    // Grid and tick labels at 0.0, 0.2, ... 1.0 on both axes.
    for i in 0..=5 {
        let fy = i as f64 / 5.0;
        draw_line(&mut frame, px(x_min), py(fy), px(x_max), py(fy), GRID);
        draw_label(
            &mut frame,
            &format!("{:.1}", fy),
            MARGIN_L - 30,
            py(fy) as usize - 5,
            AXIS,
        );
        let fx = x_min + (x_max - x_min) * fy;
        draw_line(&mut frame, px(fx), py(0.0), px(fx), py(1.0), GRID);
        let label = if x_max > 2.0 {
            format!("{}", fx.round() as i64)
        } else {
            format!("{:.1}", fx)
        };
        draw_label(&mut frame, &label, px(fx) as usize - 8, H - MARGIN_B + 8, AXIS);
    }
    // Axes.
    draw_line(&mut frame, px(x_min), py(0.0), px(x_max), py(0.0), AXIS);
    draw_line(&mut frame, px(x_min), py(0.0), px(x_min), py(1.0), AXIS);

    for s in series {
        if s.ys.len() < 2 {
            continue;
        }
        let n = s.ys.len();
        for i in 0..n - 1 {
            let fx0 = x_min + (x_max - x_min) * i as f64 / (n - 1) as f64;
            let fx1 = x_min + (x_max - x_min) * (i + 1) as f64 / (n - 1) as f64;
            let (y0, y1) = (s.ys[i].clamp(0.0, 1.0), s.ys[i + 1].clamp(0.0, 1.0));
            // Thicken by drawing three offset strokes.
            for off in -1..=1 {
                draw_line(
                    &mut frame,
                    px(fx0),
                    py(y0) + off as f64,
                    px(fx1),
                    py(y1) + off as f64,
                    s.color,
                );
            }
        }
    }
    frame.save_png(path)
}

/// Write curve samples as CSV: `x,value` per row.
pub fn write_curve_csv(path: &Path, header: &str, xs: &[f64], ys: &[f64]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for (x, y) in xs.iter().zip(ys.iter()) {
        writeln!(f, "{x},{y}")?;
    }
    Ok(())
}
