//! Float image buffers and PNG round-trips.
//!
//! Values live in `[0,1]`, layout `[channel][row][col]`. Grayscale images
//! have one channel, RGB three. PNG writes are atomic (temp file + rename).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Image {
        Image { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Image> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "image data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[c * self.height * self.width + y * self.width + x] = v;
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Replicate a grayscale image to three channels; RGB passes through.
    pub fn to_rgb3(&self) -> Image {
        match self.channels {
            3 => self.clone(),
            1 => {
                let mut data = Vec::with_capacity(3 * self.height * self.width);
                for _ in 0..3 {
                    data.extend_from_slice(&self.data);
                }
                Image { channels: 3, height: self.height, width: self.width, data }
            }
            c => panic!("unsupported channel count {c}"),
        }
    }

    /// Channel mean, collapsing to grayscale.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let hw = self.height * self.width;
        let mut data = vec![0.0f32; hw];
        for c in 0..self.channels {
            for i in 0..hw {
                data[i] += self.data[c * hw + i];
            }
        }
        let inv = 1.0 / self.channels as f32;
        for v in &mut data {
            *v *= inv;
        }
        Image { channels: 1, height: self.height, width: self.width, data }
    }

    /// Plain `[c,h,w]` tensor in `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
            .expect("consistent image buffer")
    }

    /// Three-channel `[-1,1]` tensor, the generative model's working range.
    pub fn to_model_tensor(&self) -> Tensor {
        let rgb = self.to_rgb3();
        let data: Vec<f32> = rgb.data.iter().map(|v| v * 2.0 - 1.0).collect();
        Tensor::from_vec(&[3, self.height, self.width], data).expect("consistent image buffer")
    }

    /// Back from model range, clamped into `[0,1]`.
    pub fn from_model_tensor(t: &Tensor) -> Result<Image> {
        let (c, h, w) = match t.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dimension(format!("expected 3-D image tensor, got {s:?}"))),
        };
        let data: Vec<f32> = t.data().iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        Image::from_data(c, h, w, data)
    }

    /// Separable Gaussian blur, sigma = 1, 5-tap kernel.
    pub fn blur_sigma1(&self) -> Image {
        let k = [0.054_488, 0.244_201, 0.402_622, 0.244_201, 0.054_488];
        let mut tmp = self.clone();
        let mut out = self.clone();
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let xx = (x as isize + i as isize - 2).clamp(0, w - 1) as usize;
                        acc += kv * self.get(c, y, xx);
                    }
                    tmp.set(c, y, x, acc);
                }
            }
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let yy = (y as isize + i as isize - 2).clamp(0, h - 1) as usize;
                        acc += kv * tmp.get(c, yy, x);
                    }
                    out.set(c, y, x, acc);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("png.tmp");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        img.put_pixel(x as u32, y as u32, image::Luma([q(self.get(0, y, x))]));
                    }
                }
                img.save_with_format(&tmp, image::ImageFormat::Png)?;
            }
            3 => {
                let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        let px = image::Rgb([
                            q(self.get(0, y, x)),
                            q(self.get(1, y, x)),
                            q(self.get(2, y, x)),
                        ]);
                        img.put_pixel(x as u32, y as u32, px);
                    }
                }
                img.save_with_format(&tmp, image::ImageFormat::Png)?;
            }
            c => return Err(Error::Contract(format!("cannot save {c}-channel image as PNG"))),
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let dynimg = image::open(path)?;
        match dynimg {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data: Vec<f32> = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
                Image::from_data(1, h, w, data)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut img = Image::new(3, h, w);
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        img.set(c, y as usize, x as usize, p.0[c] as f32 / 255.0);
                    }
                }
                Ok(img)
            }
        }
    }
}
