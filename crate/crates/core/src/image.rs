//! RGB float images with unit-interval intensities.

use std::path::Path;

use crate::error::{NeoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, fill: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let c = f(x, y);
                data.extend(c.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    /// Row-major interleaved RGB; every value must lie in [0, 1].
    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(NeoError::InvalidArgument(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(NeoError::InvalidArgument(format!("intensity {v} outside [0, 1]")));
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for k in 0..3 {
            self.data[i + k] = c[k].clamp(0.0, 1.0);
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImageBuffer> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(NeoError::InvalidArgument(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
        })
    }

    /// Central `width`×`height` crop; the margins must be even.
    pub fn center_crop(&self, width: usize, height: usize) -> Result<ImageBuffer> {
        if width > self.width
            || height > self.height
            || (self.width - width) % 2 != 0
            || (self.height - height) % 2 != 0
        {
            return Err(NeoError::InvalidArgument(format!(
                "no centered {width}x{height} crop in {}x{}",
                self.width, self.height
            )));
        }
        self.crop((self.width - width) / 2, (self.height - height) / 2, width, height)
    }

    /// Overwrite the region starting at (x0, y0) with `src`.
    pub fn paste(&mut self, src: &ImageBuffer, x0: usize, y0: usize) -> Result<()> {
        if x0 + src.width > self.width || y0 + src.height > self.height {
            return Err(NeoError::InvalidArgument(format!(
                "paste {}x{}+{x0}+{y0} outside {}x{}",
                src.width, src.height, self.width, self.height
            )));
        }
        for y in 0..src.height {
            let dst = ((y + y0) * self.width + x0) * 3;
            let s = y * src.width * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
        Ok(())
    }

    pub fn paste_center(&mut self, src: &ImageBuffer) -> Result<()> {
        if src.width > self.width || src.height > self.height {
            return Err(NeoError::InvalidArgument("center image larger than canvas".into()));
        }
        self.paste(src, (self.width - src.width) / 2, (self.height - src.height) / 2)
    }

    /// Round every value to the nearest 8-bit level.
    pub fn quantized(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(NeoError::InvalidArgument("rgb8 buffer size mismatch".into()));
        }
        Ok(ImageBuffer {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| NeoError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| NeoError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        ImageBuffer::from_rgb8(w as usize, h as usize, rgb.as_raw())
    }

    /// Rec. 601 luma per pixel.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
            .collect()
    }

    /// Bilinear resampling with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ImageBuffer {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                for k in 0..3 {
                    let top = a[k] as f64 * (1.0 - wx) + b[k] as f64 * wx;
                    let bot = c[k] as f64 * (1.0 - wx) + d[k] as f64 * wx;
                    out.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0) as f32);
                }
            }
        }
        ImageBuffer {
            width,
            height,
            data: out,
        }
    }

    /// Area-averaging downsample: each output cell averages the pixels whose centers fall
    /// inside it.
    pub fn downsample_area(&self, width: usize, height: usize) -> ImageBuffer {
        let mut acc = vec![[0.0f64; 4]; width * height];
        for y in 0..self.height {
            let ty = ((y as f64 + 0.5) * height as f64 / self.height as f64) as usize;
            for x in 0..self.width {
                let tx = ((x as f64 + 0.5) * width as f64 / self.width as f64) as usize;
                let c = self.get(x, y);
                let a = &mut acc[ty.min(height - 1) * width + tx.min(width - 1)];
                a[0] += c[0] as f64;
                a[1] += c[1] as f64;
                a[2] += c[2] as f64;
                a[3] += 1.0;
            }
        }
        let data = acc
            .iter()
            .flat_map(|a| {
                let n = a[3].max(1.0);
                [(a[0] / n) as f32, (a[1] / n) as f32, (a[2] / n) as f32]
            })
            .collect();
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    /// k×k box filter with clamped borders.
    pub fn box_blur(&self, k: usize) -> ImageBuffer {
        let r = (k / 2) as isize;
        ImageBuffer::from_fn(self.width, self.height, |x, y| {
            let mut s = [0.0f64; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let xx = (x as isize + dx).clamp(0, self.width as isize - 1) as usize;
                    let yy = (y as isize + dy).clamp(0, self.height as isize - 1) as usize;
                    let c = self.get(xx, yy);
                    for i in 0..3 {
                        s[i] += c[i] as f64;
                    }
                }
            }
            let n = (k * k) as f64;
            [(s[0] / n) as f32, (s[1] / n) as f32, (s[2] / n) as f32]
        })
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let mut s = [0.0f64; 3];
        for c in self.data.chunks_exact(3) {
            for k in 0..3 {
                s[k] += c[k] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [(s[0] / n) as f32, (s[1] / n) as f32, (s[2] / n) as f32]
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
