//! Planar float images and binary PGM/PPM files.

use std::fs;
use std::path::Path;

use fetap_tensor::Tensor;

use crate::error::{Error, Result};

/// Channel-major image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || height == 0 || width == 0 {
            return Err(Error::Config(format!("image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone()).expect("validated extents")
    }

    /// Luminance, for converting color frames where one channel is expected.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n).map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i]).collect();
        Image { channels: 1, height: self.height, width: self.width, data }
    }

    /// Writes P5 (gray) or P6 (color) with 8-bit samples.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut buf = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let n = self.height * self.width;
        for i in 0..n {
            for c in 0..self.channels {
                buf.push(quantize(self.data[c * n + i]));
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_pnm(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut pos = 0;
        let mut header = Vec::new();
        while header.len() < 4 {
            let tok = next_token(&buf, &mut pos).ok_or_else(|| Error::format(path, "truncated PNM header"))?;
            header.push(tok);
        }
        let channels = match header[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::format(path, format!("unsupported PNM magic {other}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field `{s}`")));
        let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(path, format!("maxval {maxval} unsupported")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        let raster = buf.get(pos..pos + n * channels).ok_or_else(|| Error::format(path, "truncated raster"))?;
        let mut data = vec![0.0; n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = raster[i * channels + c] as f32 / maxval as f32;
            }
        }
        Self::new(channels, height, width, data)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn next_token(buf: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&buf[start..*pos]).into_owned())
}
