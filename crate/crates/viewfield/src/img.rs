//! RGB and depth image buffers with PNG I/O.
//!
//! Color images are 8-bit RGB on disk; depth maps are 16-bit grayscale in
//! millimeters (0 = invalid). Depth values are Euclidean ray distances
//! from the camera center, in meters.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples in [0,1].
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Image {
        Image {
            width,
            height,
            data: vec![0.0; (width * height * 3) as usize],
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) * 3) as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.get(x, y);
                buf.put_pixel(
                    x,
                    y,
                    image::Rgb([
                        (p[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (p[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (p[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]),
                );
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let buf = image::open(path)?.into_rgb8();
        let (width, height) = (buf.width(), buf.height());
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let p = buf.get_pixel(x, y);
                img.set(
                    x,
                    y,
                    [
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    ],
                );
            }
        }
        Ok(img)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    /// Meters; meaningful only where `valid`.
    pub data: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32) -> DepthMap {
        DepthMap {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
            valid: vec![false; (width * height) as usize],
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn set(&mut self, x: u32, y: u32, depth: f64) {
        let i = self.idx(x, y);
        self.data[i] = depth;
        self.valid[i] = true;
    }

    /// Multiply all valid depths by `s` (scene rescaling).
    pub fn scale(&mut self, s: f64) {
        for d in self.data.iter_mut() {
            *d *= s;
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let i = self.idx(x, y);
                let mm = if self.valid[i] {
                    ((self.data[i] * 1000.0).round() as i64).clamp(1, 65535) as u16
                } else {
                    0
                };
                buf.put_pixel(x, y, image::Luma([mm]));
            }
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<DepthMap> {
        let dynimg = image::open(path)?;
        let buf = match dynimg {
            image::DynamicImage::ImageLuma16(b) => b,
            other => other.into_luma16(),
        };
        let (width, height) = (buf.width(), buf.height());
        let mut d = DepthMap::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let mm = buf.get_pixel(x, y)[0];
                if mm > 0 {
                    d.set(x, y, mm as f64 / 1000.0);
                }
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ImageStats {
    pub mean: f64,
    pub std: f64,
}

pub fn image_stats(img: &Image) -> ImageStats {
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ImageStats { mean, std: var.sqrt() }
}

pub fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_png_round_trip_is_lossless_at_8bit() {
        let mut img = Image::new(8, 6);
        for y in 0..6 {
            for x in 0..8 {
                img.set(x, y, [x as f64 / 255.0 * 30.0, y as f64 / 255.0 * 40.0, 0.5]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn depth_png_round_trip_mm_quantized() {
        let mut d = DepthMap::new(4, 4);
        d.set(1, 2, 1.2345);
        d.set(3, 3, 6.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("depth.png");
        d.save_png(&p).unwrap();
        let back = DepthMap::load_png(&p).unwrap();
        assert!(back.valid[back.idx(1, 2)]);
        assert!((back.data[back.idx(1, 2)] - 1.2345).abs() <= 5e-4 + 1e-12);
        assert!(!back.valid[back.idx(0, 0)]);
    }
}
