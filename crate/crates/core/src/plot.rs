//! Minimal RGB raster images for report figures, written as PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::VideoClip;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const BLUE: Rgb = [40, 90, 200];
pub const GRAY: Rgb = [200, 200, 200];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: fill.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.set(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    /// Nearest-neighbour upscaling by an integer factor.
    pub fn upscale(&self, f: usize) -> Image {
        let mut out = Image::new(self.width * f, self.height * f, BLACK);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / f, y / f));
            }
        }
        out
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, c);
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Frame `t` of a clip with values in `[-1, 1]`.
pub fn clip_frame(clip: &VideoClip, t: usize) -> Image {
    let mut img = Image::new(clip.width, clip.height, BLACK);
    let f = clip.frame(t);
    for y in 0..clip.height {
        for x in 0..clip.width {
            let i = (y * clip.width + x) * 3;
            img.set(x, y, [0, 1, 2].map(|c| to_u8((f[i + c] + 1.0) / 2.0)));
        }
    }
    img
}

/// One row per clip, one column per frame, with a 2-pixel gutter.
pub fn clip_grid(clips: &[&VideoClip]) -> Image {
    let Some(first) = clips.first() else {
        return Image::new(1, 1, WHITE);
    };
    let (h, w) = (first.height, first.width);
    let cols = clips.iter().map(|c| c.frames).max().unwrap_or(1);
    let mut img = Image::new(cols * (w + 2), clips.len() * (h + 2), WHITE);
    for (r, clip) in clips.iter().enumerate() {
        for t in 0..clip.frames {
            img.blit(&clip_frame(clip, t), t * (w + 2), r * (h + 2));
        }
    }
    img
}

/// `(frames, h, w, 3)` values in `[0, 1]` laid out left to right.
pub fn rgb_frames(rgb: &[f32], frames: usize, h: usize, w: usize, scale: usize) -> Image {
    let mut img = Image::new(frames * (w * scale + 2), h * scale, WHITE);
    for t in 0..frames {
        let mut tile = Image::new(w, h, BLACK);
        for y in 0..h {
            for x in 0..w {
                let i = ((t * h + y) * w + x) * 3;
                tile.set(x, y, [to_u8(rgb[i]), to_u8(rgb[i + 1]), to_u8(rgb[i + 2])]);
            }
        }
        img.blit(&tile.upscale(scale), t * (w * scale + 2), 0);
    }
    img
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Colour-wheel rendering of one `(h, w, 2)` flow field: hue is direction,
/// saturation is magnitude relative to `max_mag`.
pub fn flow_image(flow: &[f32], h: usize, w: usize, max_mag: f32) -> Image {
    let mut img = Image::new(w, h, WHITE);
    let m = max_mag.max(1e-6) as f64;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 2;
            let (dx, dy) = (flow[i] as f64, flow[i + 1] as f64);
            let mag = (dx * dx + dy * dy).sqrt();
            let hue = (dy.atan2(dx) / std::f64::consts::TAU).rem_euclid(1.0);
            img.set(x, y, hsv(hue, (mag / m).min(1.0), 1.0));
        }
    }
    img
}

const PLOT_W: usize = 320;
const PLOT_H: usize = 200;
const MARGIN: usize = 20;

fn frame_axes(img: &mut Image) {
    let (x0, y0) = (MARGIN as i64, (PLOT_H - MARGIN) as i64);
    img.line((x0, y0), ((PLOT_W - MARGIN) as i64, y0), BLACK);
    img.line((x0, y0), (x0, MARGIN as i64), BLACK);
}

/// Polyline of `ys` against equally spaced x positions, y from 0 to max.
pub fn line_plot(ys: &[f64]) -> Image {
    let mut img = Image::new(PLOT_W, PLOT_H, WHITE);
    frame_axes(&mut img);
    if ys.is_empty() {
        return img;
    }
    let top = ys.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let span_x = (PLOT_W - 2 * MARGIN) as f64;
    let span_y = (PLOT_H - 2 * MARGIN) as f64;
    let pt = |i: usize, v: f64| -> (i64, i64) {
        let fx = if ys.len() > 1 { i as f64 / (ys.len() - 1) as f64 } else { 0.5 };
        (
            (MARGIN as f64 + fx * span_x).round() as i64,
            ((PLOT_H - MARGIN) as f64 - (v / top) * span_y).round() as i64,
        )
    };
    for i in 1..ys.len() {
        img.line(pt(i - 1, ys[i - 1]), pt(i, ys[i]), BLUE);
    }
    for (i, &v) in ys.iter().enumerate() {
        let (x, y) = pt(i, v);
        for d in -2..=2 {
            img.set((x + d).max(0) as usize, y.max(0) as usize, BLACK);
            img.set(x.max(0) as usize, (y + d).max(0) as usize, BLACK);
        }
    }
    img
}

/// Bar chart of histogram counts.
pub fn bar_plot(counts: &[usize]) -> Image {
    let mut img = Image::new(PLOT_W, PLOT_H, WHITE);
    frame_axes(&mut img);
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let n = counts.len().max(1);
    let bw = (PLOT_W - 2 * MARGIN) / n;
    for (i, &c) in counts.iter().enumerate() {
        let bh = ((c as f64 / top) * (PLOT_H - 2 * MARGIN) as f64).round() as usize;
        for x in MARGIN + i * bw + 1..MARGIN + (i + 1) * bw {
            for y in PLOT_H - MARGIN - bh..PLOT_H - MARGIN {
                img.set(x, y, BLUE);
            }
        }
    }
    img
}
