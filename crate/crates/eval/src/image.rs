//! RGB images as planar `f32` in `[0, 1]`, with binary PPM (P6) I/O.

use std::io::Write;
use std::path::Path;

use kfg_tensor::Tensor;

use crate::error::{EvalError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        for (c, v) in rgb.iter().enumerate() {
            img.plane_mut(c).fill(*v);
        }
        img
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Sub-image `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, x, y, self.get(c, x0 + x, y0 + y));
                }
            }
        }
        out
    }

    /// Bilinear resample to `w x h`, sampling at pixel centers.
    pub fn resize(&self, w: usize, h: usize) -> Image {
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        let mut out = Image::new(w, h);
        let sx = self.width as f32 / w as f32;
        let sy = self.height as f32 / h as f32;
        let clampi = |v: f32, hi: usize| (v.max(0.0) as usize).min(hi - 1);
        for y in 0..h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let (y0, y1) = (clampi(fy.floor(), self.height), clampi(fy.floor() + 1.0, self.height));
            let ty = fy - fy.floor();
            for x in 0..w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                let (x0, x1) = (clampi(fx.floor(), self.width), clampi(fx.floor() + 1.0, self.width));
                let tx = fx - fx.floor();
                for c in 0..3 {
                    let top = self.get(c, x0, y0) * (1.0 - tx) + self.get(c, x1, y0) * tx;
                    let bot = self.get(c, x0, y1) * (1.0 - tx) + self.get(c, x1, y1) * tx;
                    out.set(c, x, y, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.get(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
        let bad = |msg: &str| EvalError::Image {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        // Header: magic, width, height, maxval separated by whitespace, with
        // `#` comments allowed.
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        if body.len() < 3 * w * h {
            return Err(bad("truncated pixel data"));
        }
        let mut img = Image::new(w, h);
        for (i, px) in body[..3 * w * h].chunks_exact(3).enumerate() {
            let (x, y) = (i % w, i / w);
            for (c, &v) in px.iter().enumerate() {
                img.set(c, x, y, f32::from(v) / 255.0);
            }
        }
        Ok(img)
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        Image::from_ppm(&std::fs::read(path)?, path)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm())?;
        Ok(())
    }

    /// Round-trip through 8-bit quantization, so an in-memory image equals
    /// what reading it back from disk produces.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        }
    }
}

/// Stack same-sized images into an `[N, 3, H, W]` batch.
pub fn to_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let (w, h) = images.first().map_or((0, 0), |i| (i.width, i.height));
    if images.iter().any(|i| (i.width, i.height) != (w, h)) {
        return Err(EvalError::Dataset("images in a batch must share one size".into()));
    }
    let data: Vec<f32> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Ok(Tensor::new([images.len(), 3, h, w], data)?)
}
