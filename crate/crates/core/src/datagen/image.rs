use image::RgbImage;

use crate::error::{Error, Result};

/// Row-major `H×W×3` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        FloatImage {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Format("image has a zero dimension".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Format(format!(
                "expected {} values for a {height}x{width}x3 image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(FloatImage {
            height,
            width,
            data,
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        FloatImage {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("consistent buffer")
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }
}
