//! Light training augmentations: resize, flips, rotation and
//! brightness/saturation jitter.
//!
//! Geometry is applied as one inverse mapping from output pixels to source
//! coordinates followed by a single bilinear sample, so resize, flips and
//! rotation cost one resampling pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::FloatImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub resize_hw: (usize, usize),
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rotate: f64,
    pub p_color: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum relative brightness change.
    pub brightness: f64,
    /// Maximum relative saturation change.
    pub saturation: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            resize_hw: (224, 224),
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rotate: 0.5,
            p_color: 0.5,
            rotation_deg: 15.0,
            brightness: 0.2,
            saturation: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Resize only.
    pub fn disabled(resize_hw: (usize, usize)) -> Self {
        AugmentationConfig {
            resize_hw,
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rotate: 0.0,
            p_color: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_rotate", self.p_rotate),
            ("p_color", self.p_color),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(what, format!("probability {p} not in [0, 1]")));
            }
        }
        if self.resize_hw.0 == 0 || self.resize_hw.1 == 0 {
            return Err(Error::validation("resize_hw", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.saturation) {
            return Err(Error::validation(
                "brightness/saturation",
                "perturbation range must be in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Independent random stream for one `(epoch, sample)` draw.
    pub fn rng_for(&self, epoch: usize, sample: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 32) | sample as u64);
        rng
    }
}

/// Deterministic bilinear resize.
pub fn resize(img: &FloatImage, hw: (usize, usize)) -> FloatImage {
    resample(img, hw, false, false, 0.0)
}

/// Applies the configured augmentations. The output always has shape
/// `resize_hw × 3`; with all probabilities at zero this is [`resize`].
pub fn augment_frame(
    img: &FloatImage,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<FloatImage> {
    config.validate()?;
    if img.height == 0 || img.width == 0 || img.data.len() != img.height * img.width * 3 {
        return Err(Error::Format("input is not an HxWx3 image".into()));
    }
    // Draw every decision up front so the stream layout is fixed.
    let hflip = rng.gen_bool(config.p_hflip);
    let vflip = rng.gen_bool(config.p_vflip);
    let rotate = rng.gen_bool(config.p_rotate);
    let angle = rng.gen_range(-1.0..=1.0) * config.rotation_deg;
    let color = rng.gen_bool(config.p_color);
    let bright = 1.0 + rng.gen_range(-1.0..=1.0) * config.brightness;
    let sat = 1.0 + rng.gen_range(-1.0..=1.0) * config.saturation;

    let angle = if rotate { angle.to_radians() } else { 0.0 };
    let mut out = resample(img, config.resize_hw, hflip, vflip, angle);
    if color {
        let (b, s) = (bright as f32, sat as f32);
        for px in out.data.chunks_exact_mut(3) {
            let r = px[0] * b;
            let g = px[1] * b;
            let bl = px[2] * b;
            let gray = 0.299 * r + 0.587 * g + 0.114 * bl;
            px[0] = (gray + s * (r - gray)).clamp(0.0, 1.0);
            px[1] = (gray + s * (g - gray)).clamp(0.0, 1.0);
            px[2] = (gray + s * (bl - gray)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn resample(img: &FloatImage, (oh, ow): (usize, usize), hflip: bool, vflip: bool, angle: f64) -> FloatImage {
    let (ih, iw) = (img.height, img.width);
    let mut out = FloatImage::zeros(oh, ow);
    let sy = ih as f32 / oh as f32;
    let sx = iw as f32 / ow as f32;
    let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
    let cy = (ih as f32 - 1.0) * 0.5;
    let cx = (iw as f32 - 1.0) * 0.5;
    let rotated = angle != 0.0;

    for oy in 0..oh {
        let ty = if vflip { oh - 1 - oy } else { oy };
        for ox in 0..ow {
            let tx = if hflip { ow - 1 - ox } else { ox };
            let mut y = (ty as f32 + 0.5) * sy - 0.5;
            let mut x = (tx as f32 + 0.5) * sx - 0.5;
            if rotated {
                let (dy, dx) = (y - cy, x - cx);
                y = cy + cos * dy - sin * dx;
                x = cx + sin * dy + cos * dx;
            }
            if y < -0.5 || x < -0.5 || y > ih as f32 - 0.5 || x > iw as f32 - 0.5 {
                continue;
            }
            let y = y.clamp(0.0, (ih - 1) as f32);
            let x = x.clamp(0.0, (iw - 1) as f32);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(ih - 1), (x0 + 1).min(iw - 1));
            let (fy, fx) = (y - y0 as f32, x - x0 as f32);
            for c in 0..3 {
                let top = img.at(y0, x0, c) * (1.0 - fx) + img.at(y0, x1, c) * fx;
                let bot = img.at(y1, x0, c) * (1.0 - fx) + img.at(y1, x1, c) * fx;
                out.set(oy, ox, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> FloatImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FloatImage::from_raw(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_probabilities_resize_only() {
        let img = random_image(16, 16, 1);
        let cfg = AugmentationConfig::disabled((224, 224));
        let out = augment_frame(&img, &cfg, &mut cfg.rng_for(0, 0)).unwrap();
        assert_eq!(out, resize(&img, (224, 224)));
        assert_eq!((out.height, out.width), (224, 224));
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = random_image(224, 224, 2);
        assert_eq!(resize(&img, (224, 224)), img);
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = random_image(224, 224, 3);
        let cfg = AugmentationConfig {
            p_hflip: 1.0,
            ..AugmentationConfig::disabled((224, 224))
        };
        let once = augment_frame(&img, &cfg, &mut cfg.rng_for(0, 0)).unwrap();
        assert_ne!(once, img);
        let twice = augment_frame(&once, &cfg, &mut cfg.rng_for(0, 1)).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let img = random_image(16, 16, 4);
        let cfg = AugmentationConfig {
            p_hflip: 1.0,
            p_rotate: 1.0,
            p_color: 1.0,
            seed: 77,
            ..AugmentationConfig::default()
        };
        let a = augment_frame(&img, &cfg, &mut cfg.rng_for(3, 9)).unwrap();
        let b = augment_frame(&img, &cfg, &mut cfg.rng_for(3, 9)).unwrap();
        let c = augment_frame(&img, &cfg, &mut cfg.rng_for(3, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_inputs() {
        let bad = FloatImage {
            height: 2,
            width: 2,
            data: vec![0.0; 5],
        };
        let cfg = AugmentationConfig::default();
        assert!(matches!(
            augment_frame(&bad, &cfg, &mut cfg.rng_for(0, 0)),
            Err(Error::Format(_))
        ));
        let cfg = AugmentationConfig {
            p_vflip: 1.2,
            ..AugmentationConfig::default()
        };
        let img = random_image(4, 4, 0);
        assert!(augment_frame(&img, &cfg, &mut cfg.rng_for(0, 0)).is_err());
    }
}
