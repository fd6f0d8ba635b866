//! Lossy JPEG-style compression simulated in-process.
//!
//! Each channel is level-shifted, split into 8×8 blocks (edges replicated),
//! transformed with an orthonormal DCT-II, quantized with the standard
//! luminance table scaled by quality, inverse-transformed and rounded back
//! to 8-bit levels. No entropy coding takes place since only the loss matters.

use std::sync::OnceLock;

use crate::blur::Image;
use crate::error::{Error, Result};

/// Baseline luminance quantization table, row-major.
const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table (IJG convention), entries in `[1, 255]`.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Validation(format!("JPEG quality must be in 1..=100, got {quality}")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (dst, &base) in t.iter_mut().zip(&LUMA) {
        *dst = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

/// `basis[u * 8 + x] = c(u) · cos((2x + 1)uπ / 16)`, orthonormal.
fn dct_basis() -> &'static [f64; 64] {
    static BASIS: OnceLock<[f64; 64]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [0.0; 64];
        for u in 0..8 {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for x in 0..8 {
                b[u * 8 + x] = c * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

fn dct2(block: &[f64; 64], inverse: bool) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    let mut out = [0.0; 64];
    // rows
    for r in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += if inverse { b[x * 8 + u] } else { b[u * 8 + x] } * block[r * 8 + x];
            }
            tmp[r * 8 + u] = acc;
        }
    }
    // columns
    for c in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += if inverse { b[x * 8 + u] } else { b[u * 8 + x] } * tmp[x * 8 + c];
            }
            out[u * 8 + c] = acc;
        }
    }
    out
}

/// Compresses one `h×w` plane of values in `[0, 1]`.
pub fn jpeg_plane(plane: &[f64], h: usize, w: usize, table: &[f64; 64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for bi in (0..h).step_by(8) {
        for bj in (0..w).step_by(8) {
            let mut block = [0.0; 64];
            for r in 0..8 {
                for c in 0..8 {
                    let (i, j) = ((bi + r).min(h - 1), (bj + c).min(w - 1));
                    block[r * 8 + c] = (plane[i * w + j] * 255.0).round().clamp(0.0, 255.0) - 128.0;
                }
            }
            let mut coef = dct2(&block, false);
            for (v, q) in coef.iter_mut().zip(table) {
                *v = (*v / q).round() * q;
            }
            let rec = dct2(&coef, true);
            for r in 0..8 {
                for c in 0..8 {
                    let (i, j) = (bi + r, bj + c);
                    if i < h && j < w {
                        out[i * w + j] = (rec[r * 8 + c] + 128.0).round().clamp(0.0, 255.0) / 255.0;
                    }
                }
            }
        }
    }
    out
}

/// Applies the simulated codec to every channel with the same table.
pub fn jpeg_compress(image: &Image, quality: u8) -> Result<Image> {
    let table = quant_table(quality)?;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut data = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        data.extend(jpeg_plane(image.plane(ch), h, w, &table));
    }
    Image::new(h, w, c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quality_scaling_follows_ijg() {
        assert_eq!(quant_table(50).unwrap()[0], 16.0);
        // q = 100: scale 0, every entry clamps to 1
        assert!(quant_table(100).unwrap().iter().all(|&v| v == 1.0));
        // q = 10: scale 500, 16·5 = 80; 99·5 = 495 clamps to 255
        let t = quant_table(10).unwrap();
        assert_eq!(t[0], 80.0);
        assert_eq!(t[63], 255.0);
        // q = 75: scale 50, (16·50 + 50)/100 = 8
        assert_eq!(quant_table(75).unwrap()[0], 8.0);
        assert!(quant_table(0).is_err() && quant_table(101).is_err());
    }

    #[test]
    fn dct_round_trip_is_exact_up_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = [0.0; 64];
        for v in &mut block {
            *v = rng.random_range(-128.0..128.0);
        }
        let back = dct2(&dct2(&block, false), true);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn dc_coefficient_is_scaled_mean() {
        let block = [10.0; 64];
        let coef = dct2(&block, false);
        assert!((coef[0] - 80.0).abs() < 1e-9);
        assert!(coef[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn top_quality_only_quantizes_to_8_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::from_fn(16, 12, 3, |_, _, _| rng.random());
        let out = jpeg_compress(&img, 100).unwrap();
        assert!(out.max_abs_diff(&img) < 2.0 / 255.0);
    }

    #[test]
    fn lower_quality_loses_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_fn(16, 16, 1, |_, _, _| rng.random());
        let err = |q| {
            let out = jpeg_compress(&img, q).unwrap();
            out.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        assert!(err(90) < err(50) && err(50) < err(10));
    }

    #[test]
    fn odd_sizes_are_handled() {
        let img = Image::filled(9, 11, 1, 0.4);
        let out = jpeg_compress(&img, 60).unwrap();
        assert_eq!((out.height(), out.width()), (9, 11));
        assert!(out.max_abs_diff(&img) < 1.0 / 255.0);
    }
}
