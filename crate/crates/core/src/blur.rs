//! Differentiable pixel-wise Gaussian blurring.
//!
//! Every output pixel `(i, j)` is the inner product of its own `k×k` Gaussian
//! kernel, with standard deviation `σ[i, j]`, and the `k×k` neighbourhood
//! centred on `(i, j)`. Optimization and generators work on the reciprocal
//! `ρ = 1/σ`, which is bounded to keep kernels well conditioned.
//!
//! Kernel weights are evaluated for all pixels at once, one offset at a time,
//! as `exp(-u²ρ²/2)·exp(-v²ρ²/2)`. The backward pass returns gradients with
//! respect to both the image and the ρ map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A channel-planar image with values nominally in `[0, 1]`.
///
/// Conceptually `h × w × c`; stored as `c` consecutive `h × w` planes so a
/// sample converts to and from an NCHW [`Tensor`] without reshuffling.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("empty image {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "image {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value {bad}")));
        }
        Ok(Image { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(i, j, ch));
                }
            }
        }
        Image { h, w, c, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.data[(ch * self.h + i) * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize, ch: usize, v: f64) {
        self.data[(ch * self.h + i) * self.w + j] = v;
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    /// Channel-planar pixel buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extracts sample `i` of a batch.
    pub fn from_tensor(t: &Tensor, i: usize) -> Image {
        Image {
            h: t.h(),
            w: t.w(),
            c: t.c(),
            data: t.sample(i).to_vec(),
        }
    }

    /// Stacks images of identical shape into an NCHW batch.
    pub fn batch(images: &[Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
        let chw = [first.c, first.h, first.w];
        let views: Vec<&[f64]> = images.iter().map(|im| im.data.as_slice()).collect();
        for im in images {
            if [im.c, im.h, im.w] != chw {
                return Err(Error::Shape(format!(
                    "batch mixes {}x{}x{} with {}x{}x{}",
                    first.h, first.w, first.c, im.h, im.w, im.c
                )));
            }
        }
        Tensor::stack(&views, chw)
    }
}

/// Per-pixel Gaussian standard deviations; every entry is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SigmaMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "sigma map {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Domain(format!("sigma must be positive and finite, got {bad}")));
        }
        Ok(SigmaMap { h, w, data })
    }

    pub fn constant(h: usize, w: usize, sigma: f64) -> Result<Self> {
        SigmaMap::new(h, w, vec![sigma; h * w])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Admissible range of ρ = 1/σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for RhoBounds {
    /// σ ∈ [0.001, 10].
    fn default() -> Self {
        RhoBounds { min: 0.1, max: 1000.0 }
    }
}

impl RhoBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "rho bounds need 0 < min < max < inf, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, rho: f64) -> f64 {
        rho.clamp(self.min, self.max)
    }

    pub fn sigma_min(&self) -> f64 {
        1.0 / self.max
    }

    pub fn sigma_max(&self) -> f64 {
        1.0 / self.min
    }
}

/// Reciprocal parameterization of a [`SigmaMap`], kept inside [`RhoBounds`].
#[derive(Debug, Clone, PartialEq)]
pub struct RhoMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
    bounds: RhoBounds,
}

impl RhoMap {
    /// Builds a ρ map, rejecting entries outside `bounds`.
    pub fn new(h: usize, w: usize, data: Vec<f64>, bounds: RhoBounds) -> Result<Self> {
        bounds.validate()?;
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "rho map {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|r| !(**r >= bounds.min && **r <= bounds.max)) {
            return Err(Error::Domain(format!(
                "rho {bad} outside [{}, {}]",
                bounds.min, bounds.max
            )));
        }
        Ok(RhoMap { h, w, data, bounds })
    }

    /// Maps σ to ρ = 1/σ, clamping into `bounds`.
    pub fn from_sigma(sigma: &SigmaMap, bounds: RhoBounds) -> Result<Self> {
        bounds.validate()?;
        let data = sigma.data.iter().map(|s| bounds.clamp(1.0 / s)).collect();
        Ok(RhoMap {
            h: sigma.h,
            w: sigma.w,
            data,
            bounds,
        })
    }

    /// Clamps arbitrary values into `bounds`.
    pub fn clamped(h: usize, w: usize, mut data: Vec<f64>, bounds: RhoBounds) -> Result<Self> {
        bounds.validate()?;
        if data.len() != h * w {
            return Err(Error::Shape(format!("rho map {h}x{w} got {} values", data.len())));
        }
        if let Some(bad) = data.iter().find(|r| r.is_nan()) {
            return Err(Error::Numeric(format!("rho value {bad}")));
        }
        for r in &mut data {
            *r = bounds.clamp(*r);
        }
        Ok(RhoMap { h, w, data, bounds })
    }

    pub fn to_sigma(&self) -> SigmaMap {
        SigmaMap {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|r| 1.0 / r).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn bounds(&self) -> RhoBounds {
        self.bounds
    }
}

/// How neighbourhoods are completed beyond the image border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Mirror without repeating the edge pixel (`x[-1] = x[1]`).
    #[default]
    Reflect,
    /// Repeat the edge pixel.
    Replicate,
    /// Treat outside pixels as zero.
    Zero,
}

impl Boundary {
    /// Maps a possibly out-of-range coordinate to a source index.
    /// Reflection assumes the overshoot is smaller than `n`.
    pub fn resolve(self, idx: isize, n: usize) -> Option<usize> {
        let last = n as isize - 1;
        match self {
            Boundary::Zero => (0..n as isize).contains(&idx).then_some(idx as usize),
            Boundary::Replicate => Some(idx.clamp(0, last) as usize),
            Boundary::Reflect => {
                if n == 1 {
                    return Some(0);
                }
                let r = if idx < 0 {
                    -idx
                } else if idx > last {
                    2 * last - idx
                } else {
                    idx
                };
                Some(r.clamp(0, last) as usize)
            }
        }
    }
}

/// Kernel size, border handling and normalization of the blur operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurSpec {
    pub k: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BlurSpec {
    fn default() -> Self {
        BlurSpec {
            k: 9,
            boundary: Boundary::Reflect,
            normalize: true,
        }
    }
}

impl BlurSpec {
    pub fn new(k: usize, boundary: Boundary, normalize: bool) -> Result<Self> {
        let spec = BlurSpec { k, boundary, normalize };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_k(k: usize) -> Result<Self> {
        BlurSpec::new(k, Boundary::Reflect, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::Spec(format!("kernel size must be odd and positive, got {}", self.k)));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.k / 2
    }
}

/// A `k×k` kernel, row-major, indexed by offsets in `[-(k-1)/2, (k-1)/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub k: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn at(&self, u: isize, v: isize) -> f64 {
        let r = (self.k / 2) as isize;
        self.weights[((u + r) * self.k as isize + (v + r)) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Evaluates `G(u, v) = exp(-(u² + v²) / (2σ²)) / (2πσ²)` on the integer grid,
/// optionally renormalized to sum to one.
pub fn gaussian_kernel(sigma: f64, spec: &BlurSpec) -> Result<Kernel> {
    spec.validate()?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let r = spec.radius() as isize;
    let var = sigma * sigma;
    let mut weights = Vec::with_capacity(spec.k * spec.k);
    for u in -r..=r {
        for v in -r..=r {
            let d2 = (u * u + v * v) as f64;
            weights.push((-d2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var));
        }
    }
    if spec.normalize {
        let total: f64 = weights.iter().sum();
        for wt in &mut weights {
            *wt /= total;
        }
    }
    Ok(Kernel { k: spec.k, weights })
}

fn check_size(h: usize, w: usize, spec: &BlurSpec) -> Result<()> {
    spec.validate()?;
    if h < spec.k || w < spec.k {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than kernel size {}",
            spec.k
        )));
    }
    Ok(())
}

/// Per-pixel 1-D Gaussian factors `exp(-d²ρ²/2)` for d = 0..=r, plus the
/// per-pixel scale that turns their outer product into the kernel.
struct KernelFactors {
    r: usize,
    /// `e[d * hw + p]`
    e: Vec<f64>,
    scale: Vec<f64>,
}

impl KernelFactors {
    fn new(rho: &[f64], spec: &BlurSpec) -> Self {
        let r = spec.radius();
        let hw = rho.len();
        let mut e = vec![0.0; (r + 1) * hw];
        for d in 0..=r {
            let d2 = (d * d) as f64;
            for (p, &rv) in rho.iter().enumerate() {
                e[d * hw + p] = (-0.5 * d2 * rv * rv).exp();
            }
        }
        let scale = if spec.normalize {
            (0..hw)
                .map(|p| {
                    let line: f64 = e[p] + 2.0 * (1..=r).map(|d| e[d * hw + p]).sum::<f64>();
                    1.0 / (line * line)
                })
                .collect()
        } else {
            rho.iter()
                .map(|rv| rv * rv / (2.0 * std::f64::consts::PI))
                .collect()
        };
        KernelFactors { r, e, scale }
    }

    #[inline]
    fn factor(&self, d: isize, p: usize, hw: usize) -> f64 {
        self.e[d.unsigned_abs() * hw + p]
    }
}

/// Pads one plane by `r` on every side according to `boundary`.
fn pad_plane(plane: &[f64], h: usize, w: usize, r: usize, boundary: Boundary) -> Vec<f64> {
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut out = vec![0.0; ph * pw];
    for pi in 0..ph {
        let Some(si) = boundary.resolve(pi as isize - r as isize, h) else {
            continue;
        };
        for pj in 0..pw {
            if let Some(sj) = boundary.resolve(pj as isize - r as isize, w) {
                out[pi * pw + pj] = plane[si * w + sj];
            }
        }
    }
    out
}

/// Adds a padded-plane gradient back onto the source pixels it was read from.
fn unpad_plane_grad(padded: &[f64], h: usize, w: usize, r: usize, boundary: Boundary, out: &mut [f64]) {
    let pw = w + 2 * r;
    for pi in 0..h + 2 * r {
        let Some(si) = boundary.resolve(pi as isize - r as isize, h) else {
            continue;
        };
        for pj in 0..pw {
            if let Some(sj) = boundary.resolve(pj as isize - r as isize, w) {
                out[si * w + sj] += padded[pi * pw + pj];
            }
        }
    }
}

/// Blurs one channel-planar sample (`c` planes of `h×w`) with a per-pixel ρ map.
pub(crate) fn blur_planes(x: &[f64], rho: &[f64], h: usize, w: usize, c: usize, spec: &BlurSpec) -> Vec<f64> {
    let hw = h * w;
    let f = KernelFactors::new(rho, spec);
    let r = f.r as isize;
    let pw = w + 2 * f.r;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let padded = pad_plane(&x[ch * hw..(ch + 1) * hw], h, w, f.r, spec.boundary);
        let dst = &mut out[ch * hw..(ch + 1) * hw];
        for u in -r..=r {
            for v in -r..=r {
                for i in 0..h {
                    let row = &padded[((i as isize + r + u) as usize) * pw + (r + v) as usize..][..w];
                    for j in 0..w {
                        let p = i * w + j;
                        dst[p] += f.factor(u, p, hw) * f.factor(v, p, hw) * row[j];
                    }
                }
            }
        }
        for (o, s) in dst.iter_mut().zip(&f.scale) {
            *o *= s;
        }
    }
    out
}

/// Gradients of a loss with respect to the input planes and the ρ map, given
/// the gradient `g` with respect to the blurred output.
pub(crate) fn blur_planes_backward(
    x: &[f64],
    rho: &[f64],
    g: &[f64],
    h: usize,
    w: usize,
    c: usize,
    spec: &BlurSpec,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let f = KernelFactors::new(rho, spec);
    let r = f.r as isize;
    let pw = w + 2 * f.r;
    let ph = h + 2 * f.r;

    // m[p] = Σ_d d² K_d, needed by the normalized derivative
    let mut m = vec![0.0; hw];
    if spec.normalize {
        for u in -r..=r {
            for v in -r..=r {
                let d2 = (u * u + v * v) as f64;
                for p in 0..hw {
                    m[p] += d2 * f.factor(u, p, hw) * f.factor(v, p, hw);
                }
            }
        }
        for (mv, s) in m.iter_mut().zip(&f.scale) {
            *mv *= s;
        }
    }

    let mut gx = vec![0.0; c * hw];
    let mut grho = vec![0.0; hw];
    for ch in 0..c {
        let padded = pad_plane(&x[ch * hw..(ch + 1) * hw], h, w, f.r, spec.boundary);
        let gc = &g[ch * hw..(ch + 1) * hw];
        let mut gpad = vec![0.0; ph * pw];
        // y = Σ K x  and  a = Σ d² K x
        let mut y = vec![0.0; hw];
        let mut a = vec![0.0; hw];
        for u in -r..=r {
            for v in -r..=r {
                let d2 = (u * u + v * v) as f64;
                for i in 0..h {
                    let base = ((i as isize + r + u) as usize) * pw + (r + v) as usize;
                    for j in 0..w {
                        let p = i * w + j;
                        let kw = f.factor(u, p, hw) * f.factor(v, p, hw) * f.scale[p];
                        let xv = padded[base + j];
                        y[p] += kw * xv;
                        a[p] += d2 * kw * xv;
                        gpad[base + j] += gc[p] * kw;
                    }
                }
            }
        }
        unpad_plane_grad(&gpad, h, w, f.r, spec.boundary, &mut gx[ch * hw..(ch + 1) * hw]);
        for p in 0..hw {
            let rv = rho[p];
            let alpha = if spec.normalize { rv * m[p] } else { 2.0 / rv };
            grho[p] += gc[p] * (alpha * y[p] - rv * a[p]);
        }
    }
    (gx, grho)
}

/// Blurs `image` with the per-pixel standard deviations in `sigma`.
/// Every channel uses the same per-pixel kernel.
pub fn blur_apply(image: &Image, sigma: &SigmaMap, spec: &BlurSpec) -> Result<Image> {
    if (sigma.h, sigma.w) != (image.h, image.w) {
        return Err(Error::Shape(format!(
            "sigma map {}x{} does not match image {}x{}",
            sigma.h, sigma.w, image.h, image.w
        )));
    }
    check_size(image.h, image.w, spec)?;
    let rho: Vec<f64> = sigma.data.iter().map(|s| 1.0 / s).collect();
    let data = blur_planes(&image.data, &rho, image.h, image.w, image.c, spec);
    Ok(Image {
        h: image.h,
        w: image.w,
        c: image.c,
        data,
    })
}

/// Direct per-pixel evaluation of the blur, one kernel and one window at a
/// time. Slow; used as an oracle for [`blur_apply`].
pub fn blur_apply_reference(image: &Image, sigma: &SigmaMap, spec: &BlurSpec) -> Result<Image> {
    spec.validate()?;
    if sigma.height() != image.height() || sigma.width() != image.width() {
        return Err(Error::Shape(format!(
            "sigma map {}x{} for image {}x{}",
            sigma.height(),
            sigma.width(),
            image.height(),
            image.width()
        )));
    }
    let r = spec.radius() as isize;
    let (h, w) = (image.height(), image.width());
    let mut out = Image::filled(h, w, image.channels(), 0.0);
    for i in 0..h {
        for j in 0..w {
            let kernel = gaussian_kernel(sigma.get(i, j), spec)?;
            for ch in 0..image.channels() {
                let mut acc = 0.0;
                for u in -r..=r {
                    for v in -r..=r {
                        let si = spec.boundary.resolve(i as isize + u, h);
                        let sj = spec.boundary.resolve(j as isize + v, w);
                        if let (Some(si), Some(sj)) = (si, sj) {
                            acc += kernel.at(u, v) * image.get(si, sj, ch);
                        }
                    }
                }
                out.set(i, j, ch, acc);
            }
        }
    }
    Ok(out)
}


/// [`blur_apply`] taking the ρ parameterization.
pub fn blur_apply_rho(image: &Image, rho: &RhoMap, spec: &BlurSpec) -> Result<Image> {
    if (rho.h, rho.w) != (image.h, image.w) {
        return Err(Error::Shape(format!(
            "rho map {}x{} does not match image {}x{}",
            rho.h, rho.w, image.h, image.w
        )));
    }
    check_size(image.h, image.w, spec)?;
    let data = blur_planes(&image.data, &rho.data, image.h, image.w, image.c, spec);
    Ok(Image {
        h: image.h,
        w: image.w,
        c: image.c,
        data,
    })
}

/// Gradient of a loss through [`blur_apply_rho`]: returns `(∂L/∂x, ∂L/∂ρ)`
/// given `∂L/∂(blurred image)`.
pub fn blur_backward_rho(image: &Image, rho: &RhoMap, spec: &BlurSpec, grad_out: &Image) -> Result<(Image, Vec<f64>)> {
    if grad_out.data.len() != image.data.len() || (rho.h, rho.w) != (image.h, image.w) {
        return Err(Error::Shape("gradient, image and rho map shapes disagree".into()));
    }
    check_size(image.h, image.w, spec)?;
    let (gx, grho) = blur_planes_backward(&image.data, &rho.data, &grad_out.data, image.h, image.w, image.c, spec);
    Ok((
        Image {
            h: image.h,
            w: image.w,
            c: image.c,
            data: gx,
        },
        grho,
    ))
}

/// Blurs every sample of an NCHW batch with its own ρ plane (`rho` is `[n, 1, h, w]`).
pub fn blur_batch(x: &Tensor, rho: &Tensor, spec: &BlurSpec) -> Result<Tensor> {
    check_batch(x, rho, spec)?;
    let [n, c, h, w] = x.shape();
    let mut out = Vec::with_capacity(x.data().len());
    for s in 0..n {
        out.extend(blur_planes(x.sample(s), rho.sample(s), h, w, c, spec));
    }
    Tensor::from_vec(x.shape(), out)
}

/// Backward pass of [`blur_batch`]: `(∂L/∂x, ∂L/∂ρ)`.
pub fn blur_batch_backward(x: &Tensor, rho: &Tensor, spec: &BlurSpec, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    check_batch(x, rho, spec)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::Shape("blur gradient shape differs from input".into()));
    }
    let [n, c, h, w] = x.shape();
    let mut gx = Vec::with_capacity(x.data().len());
    let mut gr = Vec::with_capacity(rho.data().len());
    for s in 0..n {
        let (a, b) = blur_planes_backward(x.sample(s), rho.sample(s), grad_out.sample(s), h, w, c, spec);
        gx.extend(a);
        gr.extend(b);
    }
    Ok((Tensor::from_vec(x.shape(), gx)?, Tensor::from_vec(rho.shape(), gr)?))
}

fn check_batch(x: &Tensor, rho: &Tensor, spec: &BlurSpec) -> Result<()> {
    let [n, _, h, w] = x.shape();
    if rho.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "rho batch {:?} does not match images {:?}",
            rho.shape(),
            x.shape()
        )));
    }
    check_size(h, w, spec)
}

/// A scalar loss on a blurred image together with its gradient.
pub trait ImageLoss {
    fn value(&self, image: &Image) -> f64;
    fn gradient(&self, image: &Image) -> Image;
}

/// Mean over all pixels and channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanLoss;

impl ImageLoss for MeanLoss {
    fn value(&self, image: &Image) -> f64 {
        image.data.iter().sum::<f64>() / image.data.len() as f64
    }

    fn gradient(&self, image: &Image) -> Image {
        let n = image.data.len() as f64;
        Image::filled(image.h, image.w, image.c, 1.0 / n)
    }
}

/// Sum of squared pixel values.
#[derive(Debug, Clone, Copy, Default)]
pub struct SumOfSquaresLoss;

impl ImageLoss for SumOfSquaresLoss {
    fn value(&self, image: &Image) -> f64 {
        image.data.iter().map(|v| v * v).sum()
    }

    fn gradient(&self, image: &Image) -> Image {
        Image {
            h: image.h,
            w: image.w,
            c: image.c,
            data: image.data.iter().map(|v| 2.0 * v).collect(),
        }
    }
}

/// Which map the finite differences perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parameterization {
    #[default]
    Sigma,
    Rho,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub parameterization: Parameterization,
    /// Central-difference step in the perturbed parameter.
    pub step: f64,
    /// Upper bound on the number of checked entries (evenly strided).
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            parameterization: Parameterization::Sigma,
            step: 1e-3,
            max_entries: 64,
        }
    }
}

/// Largest relative error `|analytic − fd| / (|fd| + 1e-8)` between the
/// analytic σ-gradient of `loss(blur(image, σ))` and central differences.
pub fn blur_gradient_check(image: &Image, sigma: &SigmaMap, spec: &BlurSpec, loss: &dyn ImageLoss) -> Result<f64> {
    blur_gradient_check_with(image, sigma, spec, loss, GradCheckOptions::default())
}

pub fn blur_gradient_check_with(
    image: &Image,
    sigma: &SigmaMap,
    spec: &BlurSpec,
    loss: &dyn ImageLoss,
    opts: GradCheckOptions,
) -> Result<f64> {
    if (sigma.h, sigma.w) != (image.h, image.w) {
        return Err(Error::Shape("sigma map does not match image".into()));
    }
    check_size(image.h, image.w, spec)?;
    let (h, w, c) = (image.h, image.w, image.c);
    let rho: Vec<f64> = sigma.data.iter().map(|s| 1.0 / s).collect();
    let blurred = blur_planes(&image.data, &rho, h, w, c, spec);
    let g = loss.gradient(&Image {
        h,
        w,
        c,
        data: blurred,
    });
    let (_, grad_rho) = blur_planes_backward(&image.data, &rho, &g.data, h, w, c, spec);

    let eval = |rho_vals: &[f64]| {
        loss.value(&Image {
            h,
            w,
            c,
            data: blur_planes(&image.data, rho_vals, h, w, c, spec),
        })
    };

    let hw = h * w;
    let stride = hw.div_ceil(opts.max_entries.max(1)).max(1);
    let mut worst: f64 = 0.0;
    for p in (0..hw).step_by(stride) {
        // fourth-order central stencil: the O(h²) error of the two-point
        // form is already above tolerance for σ ≈ 0.4 with unnormalized kernels
        let at = |offset: f64| {
            let mut r = rho.clone();
            r[p] = match opts.parameterization {
                Parameterization::Rho => rho[p] + offset,
                Parameterization::Sigma => 1.0 / (sigma.data[p] + offset),
            };
            eval(&r)
        };
        let hs = opts.step;
        let fd = (8.0 * (at(hs) - at(-hs)) - (at(2.0 * hs) - at(-2.0 * hs))) / (12.0 * hs);
        let analytic = match opts.parameterization {
            Parameterization::Rho => grad_rho[p],
            // dρ/dσ = -1/σ² = -ρ²
            Parameterization::Sigma => -rho[p] * rho[p] * grad_rho[p],
        };
        if !analytic.is_finite() || !fd.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at pixel {p}")));
        }
        worst = worst.max((analytic - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}
