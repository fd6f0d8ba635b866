//! Traditional data augmentation: Gaussian noise, Gaussian blur and JPEG.
//!
//! Variances are on the 0–255 pixel scale for noise and in squared pixels
//! for the blur kernel; images themselves stay in `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blur::{blur_apply, BlurSpec, Image, SigmaMap};
use crate::error::{Error, Result};
use crate::jpeg::jpeg_compress;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Noise,
    Blur,
    Jpeg,
    /// Noise, then blur, then JPEG, each with its own settings.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of adding noise to an image.
    pub noise_p: f64,
    pub noise_mean: f64,
    pub noise_var: [f64; 2],
    pub blur_k: usize,
    pub blur_var: [f64; 2],
    pub jpeg_quality: [u8; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_p: 0.5,
            noise_mean: 0.0,
            noise_var: [0.0, 30.0],
            blur_k: 9,
            blur_var: [0.0, 30.0],
            jpeg_quality: [60, 100],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !(0.0..=1.0).contains(&self.noise_p)
            || !range_ok(self.noise_var)
            || !range_ok(self.blur_var)
            || self.jpeg_quality[0] < 1
            || self.jpeg_quality[0] > self.jpeg_quality[1]
            || self.jpeg_quality[1] > 100
        {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        BlurSpec::with_k(self.blur_k).map(|_| ())
    }
}

fn uniform<R: Rng + ?Sized>(r: [f64; 2], rng: &mut R) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Adds `N(mean, var)` noise (0–255 scale) with probability `p`.
pub fn add_noise<R: Rng + ?Sized>(image: &Image, p: f64, mean: f64, var: f64, rng: &mut R) -> Result<Image> {
    let mut out = image.clone();
    if !rng.random_bool(p) {
        return Ok(out);
    }
    let normal = Normal::new(mean / 255.0, var.sqrt() / 255.0).map_err(|e| Error::Domain(e.to_string()))?;
    for v in out.data_mut() {
        *v += normal.sample(rng);
    }
    out.clamp01();
    Ok(out)
}

/// Uniform Gaussian blur with kernel variance `var` in squared pixels.
/// A zero variance leaves the image unchanged.
pub fn gaussian_blur(image: &Image, k: usize, var: f64) -> Result<Image> {
    let sigma = var.sqrt();
    if sigma < 1e-3 {
        return Ok(image.clone());
    }
    let map = SigmaMap::constant(image.height(), image.width(), sigma)?;
    blur_apply(image, &map, &BlurSpec::with_k(k)?)
}

/// One random draw of the requested augmentation.
pub fn augment_traditional<R: Rng + ?Sized>(image: &Image, kind: AugmentKind, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    cfg.validate()?;
    let noise = |img: &Image, rng: &mut R| {
        let var = uniform(cfg.noise_var, rng);
        add_noise(img, cfg.noise_p, cfg.noise_mean, var, rng)
    };
    let blur = |img: &Image, rng: &mut R| gaussian_blur(img, cfg.blur_k, uniform(cfg.blur_var, rng));
    let jpeg = |img: &Image, rng: &mut R| {
        let q = rng.random_range(cfg.jpeg_quality[0]..=cfg.jpeg_quality[1]);
        jpeg_compress(img, q)
    };
    match kind {
        AugmentKind::Noise => noise(image, rng),
        AugmentKind::Blur => blur(image, rng),
        AugmentKind::Jpeg => jpeg(image, rng),
        AugmentKind::Combined => {
            let a = noise(image, rng)?;
            let b = blur(&a, rng)?;
            jpeg(&b, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(16, 16, 3, |_, _, _| rng.random_range(0.2..0.8))
    }

    #[test]
    fn zero_noise_variance_leaves_image_unchanged() {
        let x = img(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            assert_eq!(add_noise(&x, 1.0, 0.0, 0.0, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn noise_probability_zero_never_fires() {
        let x = img(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(add_noise(&x, 0.0, 0.0, 30.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn noise_fires_about_half_the_time() {
        let x = img(5);
        let cfg = AugmentConfig {
            noise_var: [20.0, 20.0],
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let changed = (0..400)
            .filter(|_| augment_traditional(&x, AugmentKind::Noise, &cfg, &mut rng).unwrap() != x)
            .count();
        assert!((160..=240).contains(&changed), "{changed}");
    }

    #[test]
    fn noise_has_the_requested_spread() {
        let x = Image::filled(64, 64, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = add_noise(&x, 1.0, 0.0, 25.0, &mut rng).unwrap();
        let var = out.data().iter().map(|v| ((v - 0.5) * 255.0).powi(2)).sum::<f64>() / out.data().len() as f64;
        assert!((var - 25.0).abs() < 2.0, "{var}");
    }

    #[test]
    fn defaults_follow_the_tuned_settings() {
        let c = AugmentConfig::default();
        assert_eq!((c.noise_p, c.noise_mean, c.noise_var), (0.5, 0.0, [0.0, 30.0]));
        assert_eq!((c.blur_k, c.blur_var), (9, [0.0, 30.0]));
        assert_eq!(c.jpeg_quality, [60, 100]);
    }

    #[test]
    fn zero_blur_variance_is_identity() {
        let x = img(8);
        assert_eq!(gaussian_blur(&x, 9, 0.0).unwrap(), x);
    }

    #[test]
    fn every_kind_keeps_shape_and_range() {
        let x = img(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for kind in [AugmentKind::Noise, AugmentKind::Blur, AugmentKind::Jpeg, AugmentKind::Combined] {
            let out = augment_traditional(&x, kind, &AugmentConfig::default(), &mut rng).unwrap();
            assert_eq!((out.height(), out.width(), out.channels()), (16, 16, 3));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let x = img(11);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_traditional(&x, AugmentKind::Combined, &AugmentConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(run(12), run(12));
    }
}
