//! Track overlays on frames, written as PNG: predictions red, ground truth
//! green.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{quantize, Image};
use crate::pipeline::Track;

pub const PRED_COLOR: [u8; 3] = [255, 0, 0];
pub const GT_COLOR: [u8; 3] = [0, 255, 0];

/// 8-bit RGB raster, row-major interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn from_image(img: &Image) -> Self {
        let n = img.width * img.height;
        let mut data = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                let ch = if img.channels == 3 { c } else { 0 };
                data.push(quantize(img.data[ch * n + i]));
            }
        }
        Self { width: img.width, height: img.height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn put(&mut self, x: f32, y: f32, color: [u8; 3]) {
        let (x, y) = (x.round(), y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f32 || y >= self.height as f32 {
            return;
        }
        let i = 3 * (y as usize * self.width + x as usize);
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Draws the segments joining consecutive points.
    pub fn polyline(&mut self, points: &[[f32; 2]], color: [u8; 3]) {
        if let [p] = points {
            self.put(p[0], p[1], color);
        }
        for w in points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let n = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
            for k in 0..=n {
                let s = k as f32 / n as f32;
                self.put(a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), color);
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        w.write_image_data(&self.data).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(())
    }
}

fn history(track: &Track, t_us: u64) -> Vec<[f32; 2]> {
    track.samples.iter().take_while(|s| s.0 <= t_us).map(|&(_, x, y)| [x, y]).collect()
}

/// The frame with every track drawn up to `t_us`; ground truth first so
/// predictions stay visible where they coincide.
pub fn overlay(frame: &Image, t_us: u64, pred: &[Track], gt: &[Track]) -> Rgb {
    let mut out = Rgb::from_image(frame);
    for t in gt {
        out.polyline(&history(t, t_us), GT_COLOR);
    }
    for t in pred {
        out.polyline(&history(t, t_us), PRED_COLOR);
    }
    out
}
