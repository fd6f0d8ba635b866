//! Flow-field warping with bilinear resampling.
//!
//! Output pixel `(i, j)` samples the input at `(i + du[i,j], j + dv[i,j])`.
//! Sample coordinates are clamped to the image, which replicates border
//! pixels. At integer displacements the result is an exact pixel copy.

use crate::error::{Error, Result};

/// Per-pixel displacement in pixels: `du` along rows, `dv` along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    h: usize,
    w: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            du: vec![0.0; h * w],
            dv: vec![0.0; h * w],
        }
    }

    pub fn new(h: usize, w: usize, du: Vec<f64>, dv: Vec<f64>) -> Result<Self> {
        if du.len() != h * w || dv.len() != h * w {
            return Err(Error::Shape(format!("flow {h}x{w} got {} / {} values", du.len(), dv.len())));
        }
        if du.iter().chain(&dv).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite flow entry".into()));
        }
        Ok(FlowField { h, w, du, dv })
    }

    pub fn uniform(h: usize, w: usize, du: f64, dv: f64) -> Self {
        FlowField {
            h,
            w,
            du: vec![du; h * w],
            dv: vec![dv; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Largest per-pixel Euclidean displacement.
    pub fn max_norm(&self) -> f64 {
        self.du
            .iter()
            .zip(&self.dv)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    /// Rescales every displacement longer than `limit` onto the circle of radius `limit`.
    pub fn clip_norm(&mut self, limit: f64) {
        for (a, b) in self.du.iter_mut().zip(self.dv.iter_mut()) {
            let n = a.hypot(*b);
            if n > limit {
                if limit <= 0.0 {
                    *a = 0.0;
                    *b = 0.0;
                } else {
                    let s = limit / n;
                    *a *= s;
                    *b *= s;
                }
            }
        }
    }

    /// Smooth total variation over right and down neighbours:
    /// `Σ sqrt(Δu² + Δv² + η)`.
    pub fn smoothness(&self, eta: f64) -> f64 {
        let mut total = 0.0;
        self.for_each_pair(|p, q| {
            let a = self.du[p] - self.du[q];
            let b = self.dv[p] - self.dv[q];
            total += (a * a + b * b + eta).sqrt();
        });
        total
    }

    /// Gradient of [`FlowField::smoothness`] as `(∂/∂du, ∂/∂dv)`.
    pub fn smoothness_grad(&self, eta: f64) -> (Vec<f64>, Vec<f64>) {
        let mut gu = vec![0.0; self.h * self.w];
        let mut gv = vec![0.0; self.h * self.w];
        self.for_each_pair(|p, q| {
            let a = self.du[p] - self.du[q];
            let b = self.dv[p] - self.dv[q];
            let n = (a * a + b * b + eta).sqrt();
            gu[p] += a / n;
            gu[q] -= a / n;
            gv[p] += b / n;
            gv[q] -= b / n;
        });
        (gu, gv)
    }

    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        for i in 0..self.h {
            for j in 0..self.w {
                let p = i * self.w + j;
                if j + 1 < self.w {
                    f(p, p + 1);
                }
                if i + 1 < self.h {
                    f(p, p + self.w);
                }
            }
        }
    }
}

/// Corner indices and weights of one bilinear sample, plus whether each
/// coordinate was clamped (which zeroes its derivative).
struct Tap {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    a: f64,
    b: f64,
    y_free: bool,
    x_free: bool,
}

fn tap(y: f64, x: f64, h: usize, w: usize) -> Tap {
    let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
    let y_free = y > 0.0 && y < ymax;
    let x_free = x > 0.0 && x < xmax;
    let yc = y.clamp(0.0, ymax);
    let xc = x.clamp(0.0, xmax);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    Tap {
        y0,
        y1: (y0 + 1).min(h - 1),
        x0,
        x1: (x0 + 1).min(w - 1),
        a: yc - y0 as f64,
        b: xc - x0 as f64,
        y_free,
        x_free,
    }
}

/// Warps `c` planes of `h×w` by `flow`.
pub fn warp_planes(x: &[f64], c: usize, flow: &FlowField) -> Vec<f64> {
    let (h, w) = (flow.h, flow.w);
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let t = tap(i as f64 + flow.du[p], j as f64 + flow.dv[p], h, w);
            for ch in 0..c {
                let s = &x[ch * hw..(ch + 1) * hw];
                out[ch * hw + p] = (1.0 - t.a) * ((1.0 - t.b) * s[t.y0 * w + t.x0] + t.b * s[t.y0 * w + t.x1])
                    + t.a * ((1.0 - t.b) * s[t.y1 * w + t.x0] + t.b * s[t.y1 * w + t.x1]);
            }
        }
    }
    out
}

/// Gradient of a loss with respect to `du` and `dv`, given its gradient `g`
/// with respect to the warped planes.
pub fn warp_flow_grad(x: &[f64], c: usize, flow: &FlowField, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (flow.h, flow.w);
    let hw = h * w;
    let mut gu = vec![0.0; hw];
    let mut gv = vec![0.0; hw];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let t = tap(i as f64 + flow.du[p], j as f64 + flow.dv[p], h, w);
            for ch in 0..c {
                let s = &x[ch * hw..(ch + 1) * hw];
                let (v00, v01) = (s[t.y0 * w + t.x0], s[t.y0 * w + t.x1]);
                let (v10, v11) = (s[t.y1 * w + t.x0], s[t.y1 * w + t.x1]);
                let go = g[ch * hw + p];
                if t.y_free {
                    gu[p] += go * ((1.0 - t.b) * (v10 - v00) + t.b * (v11 - v01));
                }
                if t.x_free {
                    gv[p] += go * ((1.0 - t.a) * (v01 - v00) + t.a * (v11 - v10));
                }
            }
        }
    }
    (gu, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..2 * 30).map(|_| rng.random()).collect();
        assert_eq!(warp_planes(&x, 2, &FlowField::zeros(5, 6)), x);
    }

    #[test]
    fn unit_row_flow_shifts_a_ramp_by_one_pixel() {
        let (h, w) = (5, 4);
        let x: Vec<f64> = (0..h * w).map(|p| (p / w) as f64 * 0.1 + (p % w) as f64 * 0.01).collect();
        let out = warp_planes(&x, 1, &FlowField::uniform(h, w, 1.0, 0.0));
        for i in 0..h {
            for j in 0..w {
                // last row replicates the border row
                let src = (i + 1).min(h - 1);
                assert_eq!(out[i * w + j], x[src * w + j]);
            }
        }
    }

    #[test]
    fn flow_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, c) = (6, 7, 2);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.random()).collect();
        let g: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let flow = FlowField::new(
            h,
            w,
            (0..h * w).map(|_| rng.random_range(-0.7..0.7)).collect(),
            (0..h * w).map(|_| rng.random_range(-0.7..0.7)).collect(),
        )
        .unwrap();
        let (gu, gv) = warp_flow_grad(&x, c, &flow, &g);
        let obj = |f: &FlowField| warp_planes(&x, c, f).iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let step = 1e-6;
        for p in [8usize, 15, 20, 33] {
            let mut plus = flow.clone();
            plus.du[p] += step;
            let mut minus = flow.clone();
            minus.du[p] -= step;
            let fd = (obj(&plus) - obj(&minus)) / (2.0 * step);
            assert!((fd - gu[p]).abs() < 1e-6, "du {p}: {fd} vs {}", gu[p]);
            let mut plus = flow.clone();
            plus.dv[p] += step;
            let mut minus = flow.clone();
            minus.dv[p] -= step;
            let fd = (obj(&plus) - obj(&minus)) / (2.0 * step);
            assert!((fd - gv[p]).abs() < 1e-6, "dv {p}: {fd} vs {}", gv[p]);
        }
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = FlowField::new(
            4,
            5,
            (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (gu, gv) = flow.smoothness_grad(1e-8);
        let step = 1e-6;
        for p in 0..20 {
            let mut plus = flow.clone();
            plus.du[p] += step;
            let mut minus = flow.clone();
            minus.du[p] -= step;
            let fd = (plus.smoothness(1e-8) - minus.smoothness(1e-8)) / (2.0 * step);
            assert!((fd - gu[p]).abs() < 1e-5);
            let mut plus = flow.clone();
            plus.dv[p] += step;
            let mut minus = flow.clone();
            minus.dv[p] -= step;
            let fd = (plus.smoothness(1e-8) - minus.smoothness(1e-8)) / (2.0 * step);
            assert!((fd - gv[p]).abs() < 1e-5);
        }
    }

    #[test]
    fn clipping_bounds_every_displacement() {
        let mut flow = FlowField::new(1, 3, vec![3.0, 0.5, -4.0], vec![4.0, 0.5, 0.0]).unwrap();
        flow.clip_norm(2.0);
        assert!(flow.max_norm() <= 2.0 + 1e-12);
        assert_eq!((flow.du[1], flow.dv[1]), (0.5, 0.5));
        flow.clip_norm(0.0);
        assert_eq!(flow.max_norm(), 0.0);
    }
}
