//! Numerical self-checks of the blur operator and its gradients, run by the
//! `grad-check` and `reproduce` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blur::{
    blur_apply, blur_apply_reference, blur_batch, blur_batch_backward, blur_gradient_check_with, BlurSpec, Boundary,
    GradCheckOptions, Image, ImageLoss, MeanLoss, Parameterization, SigmaMap, SumOfSquaresLoss,
};
use crate::detector::{Classifier, Detector, DetectorArch};
use crate::error::Result;
use crate::tensor::Tensor;

pub const ORACLE_TOL: f64 = 1e-9;
pub const FIXED_POINT_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-4;
pub const BLUR_GRAD_TOL: f64 = 1e-4;
pub const DETECTOR_GRAD_TOL: f64 = 1e-3;

/// Worst observed error of one check next to its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl Measurement {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

/// `Σ wᵢ·xᵢ + ½ Σ xᵢ²` with random weights: a loss whose gradient differs
/// at every pixel.
#[derive(Debug, Clone)]
pub struct RandomQuadraticLoss {
    pub weights: Vec<f64>,
}

impl ImageLoss for RandomQuadraticLoss {
    fn value(&self, image: &Image) -> f64 {
        image.data().iter().zip(&self.weights).map(|(x, w)| w * x + 0.5 * x * x).sum()
    }

    fn gradient(&self, image: &Image) -> Image {
        let data = image.data().iter().zip(&self.weights).map(|(x, w)| w + x).collect();
        Image::new(image.height(), image.width(), image.channels(), data).expect("same shape")
    }
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.random())
}

fn random_sigma(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> SigmaMap {
    SigmaMap::new(h, w, (0..h * w).map(|_| rng.random_range(lo..hi)).collect()).expect("positive sigmas")
}

const BOUNDARIES: [Boundary; 3] = [Boundary::Reflect, Boundary::Replicate, Boundary::Zero];

/// Vectorized blur against the per-pixel reference on `cases` random inputs
/// with sizes up to 16×16 and k ∈ {1, 3, 5, 9}.
pub fn oracle_agreement(seed: u64, cases: usize) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let k = [1, 3, 5, 9][case % 4];
        let spec = BlurSpec::new(k, BOUNDARIES[case % 3], case % 5 != 4)?;
        let h = rng.random_range(k.max(2)..=16);
        let w = rng.random_range(k.max(2)..=16);
        let c = if case % 2 == 0 { 3 } else { 1 };
        let img = random_image(&mut rng, h, w, c);
        let sigma = random_sigma(&mut rng, h, w, 0.05, 6.0);
        let fast = blur_apply(&img, &sigma, &spec)?;
        worst = worst.max(fast.max_abs_diff(&blur_apply_reference(&img, &sigma, &spec)?));
    }
    Ok(Measurement {
        name: "vectorized blur vs per-pixel reference".into(),
        cases,
        worst,
        tolerance: ORACLE_TOL,
    })
}

/// A constant image is left unchanged by any normalized blur.
pub fn constant_fixed_point(seed: u64, cases: usize) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let k = [3, 5, 9][case % 3];
        let spec = BlurSpec::new(k, [Boundary::Reflect, Boundary::Replicate][case % 2], true)?;
        let n = rng.random_range(k..=16);
        let value = rng.random::<f64>();
        let img = Image::filled(n, n, 3, value);
        let out = blur_apply(&img, &random_sigma(&mut rng, n, n, 0.05, 20.0), &spec)?;
        worst = worst.max(out.max_abs_diff(&img));
    }
    Ok(Measurement {
        name: "constant image is a fixed point".into(),
        cases,
        worst,
        tolerance: FIXED_POINT_TOL,
    })
}

/// σ = 1e-3 leaves any image unchanged under a normalized kernel.
pub fn tiny_sigma_identity(seed: u64, cases: usize) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let k = [3, 5, 9][case % 3];
        let spec = BlurSpec::new(k, BOUNDARIES[case % 3], true)?;
        let n = rng.random_range(k..=16);
        let img = random_image(&mut rng, n, n, 3);
        let out = blur_apply(&img, &SigmaMap::constant(n, n, 1e-3)?, &spec)?;
        worst = worst.max(out.max_abs_diff(&img));
    }
    Ok(Measurement {
        name: "sigma = 1e-3 is the identity".into(),
        cases,
        worst,
        tolerance: IDENTITY_TOL,
    })
}

/// Analytic ∂L/∂σ or ∂L/∂ρ against central differences on random
/// (image, σ map, loss) cases.
pub fn blur_gradient_agreement(seed: u64, cases: usize, parameterization: Parameterization) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let k = [3, 5, 9][case % 3];
        let spec = BlurSpec::new(k, BOUNDARIES[case % 3], case % 4 != 3)?;
        let (h, w) = (rng.random_range(k..=12), rng.random_range(k..=12));
        let c = if case % 2 == 0 { 3 } else { 1 };
        let img = random_image(&mut rng, h, w, c);
        let sigma = random_sigma(&mut rng, h, w, 0.4, 3.0);
        let quadratic = RandomQuadraticLoss {
            weights: (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let loss: &dyn ImageLoss = match case % 3 {
            0 => &MeanLoss,
            1 => &SumOfSquaresLoss,
            _ => &quadratic,
        };
        let opts = GradCheckOptions {
            parameterization,
            step: 1e-3,
            max_entries: 64,
        };
        worst = worst.max(blur_gradient_check_with(&img, &sigma, &spec, loss, opts)?);
    }
    let which = match parameterization {
        Parameterization::Sigma => "sigma",
        Parameterization::Rho => "rho",
    };
    Ok(Measurement {
        name: format!("dL/d{which} vs central differences"),
        cases,
        worst,
        tolerance: BLUR_GRAD_TOL,
    })
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// Gradient of the detector loss through the blur, `L(D(blur(x, ρ)))`,
/// with respect to ρ, the input pixels and the detector parameters.
/// Magnitudes below 1e-6 are compared absolutely.
pub fn detector_path_agreement(seed: u64) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = DetectorArch {
        widths: vec![4, 6],
        strides: vec![1, 2],
        ..DetectorArch::default()
    };
    let det = Detector::new("check", &arch, &mut rng)?;
    let (n, h, w) = (2, 10, 10);
    let spec = BlurSpec::with_k(5)?;
    let x = Tensor::from_vec([n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random()).collect())?;
    let rho = Tensor::from_vec([n, 1, h, w], (0..n * h * w).map(|_| rng.random_range(0.4..2.5)).collect())?;
    let labels = [0u8, 1];

    let sum_loss = |x: &Tensor, rho: &Tensor| -> Result<f64> {
        Ok(det.losses(&blur_batch(x, rho, &spec)?, &labels)?.iter().sum())
    };
    let xb = blur_batch(&x, &rho, &spec)?;
    let (_, gxb) = det.loss_and_input_grad(&xb, &labels)?;
    let (gx, grho) = blur_batch_backward(&x, &rho, &spec, &gxb)?;

    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let step = 1e-6;
    for idx in (0..rho.data().len()).step_by(7) {
        let (mut plus, mut minus) = (rho.clone(), rho.clone());
        plus.data_mut()[idx] += step;
        minus.data_mut()[idx] -= step;
        let fd = (sum_loss(&x, &plus)? - sum_loss(&x, &minus)?) / (2.0 * step);
        worst = worst.max(rel_err(grho.data()[idx], fd));
        cases += 1;
    }
    for idx in (0..x.data().len()).step_by(53) {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[idx] += step;
        minus.data_mut()[idx] -= step;
        let fd = (sum_loss(&plus, &rho)? - sum_loss(&minus, &rho)?) / (2.0 * step);
        worst = worst.max(rel_err(gx.data()[idx], fd));
        cases += 1;
    }
    let (_, pgrads) = det.loss_and_param_grad(&xb, &labels)?;
    for (pi, g) in pgrads.iter().enumerate() {
        for j in (0..g.len()).step_by(g.len().div_ceil(6).max(1)) {
            let (mut plus, mut minus) = (det.clone(), det.clone());
            plus.params_mut()[pi].value[j] += step;
            minus.params_mut()[pi].value[j] -= step;
            let fd = (plus.loss(&xb, &labels)? - minus.loss(&xb, &labels)?) / (2.0 * step);
            worst = worst.max(rel_err(g[j], fd));
            cases += 1;
        }
    }
    Ok(Measurement {
        name: "detector path (rho, pixels, parameters) vs central differences".into(),
        cases,
        worst,
        tolerance: DETECTOR_GRAD_TOL,
    })
}

/// Operator checks: reference agreement on 50 cases, fixed point, identity.
pub fn blur_operator_checks(seed: u64) -> Result<Vec<Measurement>> {
    Ok(vec![
        oracle_agreement(seed, 50)?,
        constant_fixed_point(seed.wrapping_add(1), 20)?,
        tiny_sigma_identity(seed.wrapping_add(2), 20)?,
    ])
}

/// Gradient checks: σ and ρ on 20 cases each, then the detector path.
pub fn gradient_checks(seed: u64) -> Result<Vec<Measurement>> {
    Ok(vec![
        blur_gradient_agreement(seed, 20, Parameterization::Sigma)?,
        blur_gradient_agreement(seed.wrapping_add(1), 20, Parameterization::Rho)?,
        detector_path_agreement(seed.wrapping_add(2))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_checks_pass() {
        for m in blur_operator_checks(11).unwrap() {
            assert!(m.passed(), "{m:?}");
        }
    }

    #[test]
    fn gradient_checks_pass() {
        for m in gradient_checks(12).unwrap() {
            assert!(m.passed(), "{m:?}");
        }
    }

    #[test]
    fn quadratic_loss_gradient_matches_difference() {
        let img = Image::from_fn(2, 2, 1, |i, j, _| (i + 2 * j) as f64 * 0.1);
        let loss = RandomQuadraticLoss {
            weights: vec![0.5, -0.25, 1.0, 0.0],
        };
        let g = loss.gradient(&img);
        let mut plus = img.clone();
        plus.data_mut()[2] += 1e-6;
        let fd = (loss.value(&plus) - loss.value(&img)) / 1e-6;
        assert!((fd - g.data()[2]).abs() < 1e-5);
    }

    #[test]
    fn non_finite_error_fails() {
        let m = Measurement {
            name: "x".into(),
            cases: 1,
            worst: f64::NAN,
            tolerance: 1.0,
        };
        assert!(!m.passed());
    }
}
