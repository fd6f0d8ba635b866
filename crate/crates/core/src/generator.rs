//! Learned ρ-map generators and the two-player game against the detector.
//!
//! A generator is a small encoder-decoder CNN whose single-channel output is
//! squashed into `[ρ_min, ρ_max]` by a scaled sigmoid. Its blurred output
//! `blur(x, G(x))` is what the detector is trained on in the generator
//! regimes. Generators ascend the detector loss; the detector descends the
//! sum of its clean and generated-example losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::RhoSource;
use crate::blur::{blur_batch, blur_batch_backward, BlurSpec, Image, RhoBounds, SigmaMap};
use crate::detector::{check_labels, Classifier, Detector, FAKE, REAL};
use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerSpec, Network, Param, Trace};
use crate::optim::RAdam;
use crate::tensor::Tensor;

/// Encoder-decoder shape: stem, `downsamples` stride-2 convolutions,
/// `res_blocks` residual blocks, matching upsampling stages and a
/// one-channel head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorArch {
    pub in_channels: usize,
    pub stem: usize,
    pub width: usize,
    pub downsamples: usize,
    pub res_blocks: usize,
    pub slope: f64,
    /// σ produced everywhere by a freshly built generator before the head
    /// weights act.
    pub sigma_init: f64,
    /// Multiplier on the initial head weights.
    pub head_scale: f64,
    pub bounds: RhoBounds,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch {
            in_channels: 3,
            stem: 8,
            width: 16,
            downsamples: 2,
            res_blocks: 3,
            slope: 0.2,
            sigma_init: 1.0,
            head_scale: 0.05,
            bounds: RhoBounds::default(),
        }
    }
}

impl GeneratorArch {
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.stem == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        let conv = |i, o, stride| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
        };
        let act = LayerSpec::LeakyRelu { slope: self.slope };
        let mut layers = vec![conv(self.in_channels, self.stem, 1), act.clone()];
        let mut c = self.stem;
        for _ in 0..self.downsamples {
            layers.push(conv(c, self.width, 2));
            layers.push(act.clone());
            c = self.width;
        }
        for _ in 0..self.res_blocks {
            layers.push(LayerSpec::Residual {
                body: vec![conv(c, c, 1), act.clone(), conv(c, c, 1)],
            });
        }
        for s in 0..self.downsamples {
            let out = if s + 1 == self.downsamples { self.stem } else { self.width };
            layers.push(LayerSpec::Upsample2);
            layers.push(conv(c, out, 1));
            layers.push(act.clone());
            c = out;
        }
        layers.push(conv(c, 1, 1));
        Ok(layers)
    }

    /// Head bias giving `ρ = 1/sigma_init` when the head input is zero.
    fn head_bias(&self) -> Result<f64> {
        self.bounds.validate()?;
        let rho = 1.0 / self.sigma_init;
        if !(rho > self.bounds.min && rho < self.bounds.max) {
            return Err(Error::Config(format!(
                "sigma_init {} is outside the open ρ range ({}, {})",
                self.sigma_init, self.bounds.min, self.bounds.max
            )));
        }
        let p = (rho - self.bounds.min) / (self.bounds.max - self.bounds.min);
        Ok((p / (1.0 - p)).ln())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A ρ-map generator.
#[derive(Debug, Clone)]
pub struct Generator {
    arch: GeneratorArch,
    net: Network,
}

/// Saved forward pass of a generator.
pub struct GenTrace {
    trace: Trace,
    /// sigmoid(z), per output pixel.
    s: Tensor,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(arch: &GeneratorArch, rng: &mut R) -> Result<Self> {
        let mut net = Network::build(&arch.layers()?, rng)?;
        let bias = arch.head_bias()?;
        let n = net.params().len();
        let params = net.params_mut();
        for v in &mut params[n - 2].value {
            *v *= arch.head_scale;
        }
        params[n - 1].value[0] = bias;
        Ok(Generator {
            arch: arch.clone(),
            net,
        })
    }

    pub fn from_parts(arch: &GeneratorArch, params: Vec<Param>) -> Result<Self> {
        arch.bounds.validate()?;
        Ok(Generator {
            arch: arch.clone(),
            net: Network::from_parts(&arch.layers()?, params)?,
        })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        self.net.params_mut()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.net.zero_grads()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let factor = 1usize << self.arch.downsamples;
        if x.c() != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} channels, got {}",
                self.arch.in_channels,
                x.c()
            )));
        }
        if x.h() % factor != 0 || x.w() % factor != 0 || x.h() == 0 || x.w() == 0 {
            return Err(Error::Shape(format!(
                "generator input {}x{} is not divisible by {factor}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    fn squash(&self, z: &Tensor) -> (Tensor, Tensor) {
        let b = self.arch.bounds;
        let s = Tensor::from_vec(z.shape(), z.data().iter().map(|&v| sigmoid(v)).collect()).expect("same shape");
        let rho = Tensor::from_vec(
            z.shape(),
            s.data()
                .iter()
                .map(|&sv| (b.min + (b.max - b.min) * sv).clamp(b.min, b.max))
                .collect(),
        )
        .expect("same shape");
        (rho, s)
    }

    /// ρ batch `[n, 1, h, w]`; deterministic for fixed parameters.
    pub fn rho(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.squash(&self.net.forward(x)).0)
    }

    pub fn rho_trace(&self, x: &Tensor) -> Result<(Tensor, GenTrace)> {
        self.check_input(x)?;
        let (z, trace) = self.net.forward_trace(x);
        let (rho, s) = self.squash(&z);
        Ok((rho, GenTrace { trace, s }))
    }

    /// Accumulates parameter gradients given `∂L/∂ρ`.
    pub fn backward(&self, trace: &GenTrace, grad_rho: &Tensor, grads: &mut Gradients) {
        let span = self.arch.bounds.max - self.arch.bounds.min;
        let gz = Tensor::from_vec(
            grad_rho.shape(),
            grad_rho
                .data()
                .iter()
                .zip(trace.s.data())
                .map(|(g, s)| g * span * s * (1.0 - s))
                .collect(),
        )
        .expect("same shape");
        self.net.backward(&trace.trace, &gz, Some(grads));
    }

    /// σ map for a single image.
    pub fn generate_sigma(&self, image: &Image) -> Result<SigmaMap> {
        let x = Image::batch(std::slice::from_ref(image))?;
        let rho = self.rho(&x)?;
        SigmaMap::new(rho.h(), rho.w(), rho.data().iter().map(|r| 1.0 / r).collect())
    }
}

/// `g_real` only ever sees real samples, `g_fake` only fake ones.
#[derive(Debug, Clone)]
pub struct GeneratorPair {
    pub g_real: Generator,
    pub g_fake: Generator,
}

/// One shared generator or a class-routed pair.
#[derive(Debug, Clone)]
pub enum Generators {
    Single(Generator),
    Pair(GeneratorPair),
}

impl Generators {
    pub fn single<R: Rng + ?Sized>(arch: &GeneratorArch, rng: &mut R) -> Result<Self> {
        Ok(Generators::Single(Generator::new(arch, rng)?))
    }

    pub fn pair<R: Rng + ?Sized>(arch: &GeneratorArch, rng: &mut R) -> Result<Self> {
        let g_real = Generator::new(arch, rng)?;
        let g_fake = Generator::new(arch, rng)?;
        Ok(Generators::Pair(GeneratorPair { g_real, g_fake }))
    }

    pub fn members(&self) -> Vec<&Generator> {
        match self {
            Generators::Single(g) => vec![g],
            Generators::Pair(p) => vec![&p.g_real, &p.g_fake],
        }
    }

    pub fn members_mut(&mut self) -> Vec<&mut Generator> {
        match self {
            Generators::Single(g) => vec![g],
            Generators::Pair(p) => vec![&mut p.g_real, &mut p.g_fake],
        }
    }

    /// Sample indices handled by each member.
    fn routes(&self, labels: &[u8]) -> Vec<Vec<usize>> {
        match self {
            Generators::Single(_) => vec![(0..labels.len()).collect()],
            Generators::Pair(_) => [REAL, FAKE]
                .iter()
                .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
                .collect(),
        }
    }

    /// Blurred batch `blur(x, G(x))` and the ρ maps used, in input order.
    pub fn generate(&self, x: &Tensor, labels: &[u8], spec: &BlurSpec) -> Result<(Tensor, Tensor)> {
        let rho = self.rho_for(x, labels)?;
        Ok((blur_batch(x, &rho, spec)?, rho))
    }

    /// Mean detector loss on generated examples and the gradient of that
    /// loss with respect to each member's parameters. Members only receive
    /// gradient from the samples routed to them.
    pub fn loss_and_grads(&self, detector: &Detector, x: &Tensor, labels: &[u8], spec: &BlurSpec) -> Result<(f64, Vec<Gradients>)> {
        check_labels(labels, x.n())?;
        let n = x.n() as f64;
        let mut total = 0.0;
        let mut all = Vec::new();
        for (g, idx) in self.members().into_iter().zip(self.routes(labels)) {
            let mut grads = g.zero_grads();
            if !idx.is_empty() {
                let xs = x.select(&idx);
                let ys: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                let (rho, trace) = g.rho_trace(&xs)?;
                let xb = blur_batch(&xs, &rho, spec)?;
                let (losses, gxb) = detector.loss_and_input_grad(&xb, &ys)?;
                total += losses.iter().sum::<f64>();
                let (_, mut grho) = blur_batch_backward(&xs, &rho, spec, &gxb)?;
                for v in grho.data_mut() {
                    *v /= n;
                }
                g.backward(&trace, &grho, &mut grads);
            }
            all.push(grads);
        }
        let loss = total / n;
        if !loss.is_finite() || all.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite generator loss {loss} on a batch of {} (labels {:?})",
                x.n(),
                labels
            )));
        }
        Ok((loss, all))
    }
}

impl RhoSource for Generators {
    fn rho_for(&self, x: &Tensor, labels: &[u8]) -> Result<Tensor> {
        check_labels(labels, x.n())?;
        let mut rho = Tensor::zeros([x.n(), 1, x.h(), x.w()]);
        for (g, idx) in self.members().into_iter().zip(self.routes(labels)) {
            if idx.is_empty() {
                continue;
            }
            let part = g.rho(&x.select(&idx))?;
            for (k, &i) in idx.iter().enumerate() {
                rho.sample_mut(i).copy_from_slice(part.sample(k));
            }
        }
        Ok(rho)
    }
}

impl RhoSource for Generator {
    fn rho_for(&self, x: &Tensor, _labels: &[u8]) -> Result<Tensor> {
        self.rho(x)
    }
}

/// One ascent step of every generator on the detector loss of its generated
/// examples; the detector is not modified. Returns the loss before the step.
pub fn gen_adv_step(
    detector: &Detector,
    gens: &mut Generators,
    optims: &mut [RAdam],
    x: &Tensor,
    labels: &[u8],
    spec: &BlurSpec,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = gens.loss_and_grads(detector, x, labels, spec)?;
    if optims.len() != grads.len() {
        return Err(Error::Config(format!("{} optimizers for {} generators", optims.len(), grads.len())));
    }
    for ((g, opt), mut grad) in gens.members_mut().into_iter().zip(optims.iter_mut()).zip(grads) {
        // ascent: the optimizer descends, so flip the gradient
        for v in grad.iter_mut().flatten() {
            *v = -*v;
        }
        opt.step(g.params_mut(), &grad, lr);
    }
    Ok(loss)
}

/// Losses reported by a detector step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameLosses {
    pub clean: f64,
    pub generated: f64,
}

/// One descent step of the detector on `L(x) + L(blur(x, G(x)))` with the
/// generators frozen.
pub fn detector_step_on_game(
    detector: &mut Detector,
    optim: &mut RAdam,
    gens: &Generators,
    x: &Tensor,
    labels: &[u8],
    spec: &BlurSpec,
    lr: f64,
) -> Result<GameLosses> {
    let (generated, _) = gens.generate(x, labels, spec)?;
    let mut grads = detector.network().zero_grads();
    let clean = detector.accumulate_param_grad(x, labels, 1.0, &mut grads)?;
    let gen_loss = detector.accumulate_param_grad(&generated, labels, 1.0, &mut grads)?;
    optim.step(detector.params_mut(), &grads, lr);
    Ok(GameLosses {
        clean,
        generated: gen_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorArch;
    use crate::optim::OptimConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    fn tiny_detector(seed: u64) -> Detector {
        let arch = DetectorArch {
            widths: vec![4, 8],
            strides: vec![1, 2],
            ..DetectorArch::default()
        };
        Detector::new("d", &arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn head_bias_targets_initial_sigma() {
        // ρ = 0.1 + 999.9·sigmoid(b) = 1  ⇒  b = ln(0.9 / 999.0)
        let b = GeneratorArch::default().head_bias().unwrap();
        assert!((b - (0.9f64 / 999.0).ln()).abs() < 1e-12);
        assert!((0.1 + 999.9 * sigmoid(b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fresh_generator_stays_near_unit_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Generator::new(&GeneratorArch::default(), &mut rng).unwrap();
        for _ in 0..4 {
            let img = Image::from_fn(16, 16, 3, |_, _, _| rng.random());
            let s = g.generate_sigma(&img).unwrap();
            assert!(s.min() >= 0.5 && s.max() <= 2.0, "[{}, {}]", s.min(), s.max());
        }
    }

    #[test]
    fn output_respects_rho_bounds_under_extreme_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Generator::new(&GeneratorArch::default(), &mut rng).unwrap();
        for p in g.params_mut() {
            for v in &mut p.value {
                *v *= 500.0;
            }
        }
        let x = random([2, 3, 8, 8], &mut rng);
        let rho = g.rho(&x).unwrap();
        assert!(rho.data().iter().all(|r| (0.1..=1000.0).contains(r)));
    }

    #[test]
    fn different_images_get_different_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Generator::new(&GeneratorArch::default(), &mut rng).unwrap();
        let a = g.generate_sigma(&Image::from_fn(8, 8, 3, |_, _, _| rng.random())).unwrap();
        let b = g.generate_sigma(&Image::from_fn(8, 8, 3, |_, _, _| rng.random())).unwrap();
        let dist: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let g = Generator::new(&GeneratorArch::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(matches!(g.rho(&Tensor::zeros([1, 3, 10, 10])), Err(Error::Shape(_))));
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let det = tiny_detector(6);
        let arch = GeneratorArch {
            head_scale: 1.0,
            ..GeneratorArch::default()
        };
        let gens = Generators::single(&arch, &mut rng).unwrap();
        let x = random([2, 3, 8, 8], &mut rng);
        let labels = [0u8, 1];
        let spec = BlurSpec::with_k(3).unwrap();
        let (_, grads) = gens.loss_and_grads(&det, &x, &labels, &spec).unwrap();
        let h = 1e-6;
        let n = gens.members()[0].params().len();
        for (pi, j) in [(0usize, 3usize), (2, 40), (n - 2, 5), (n - 1, 0)] {
            let eval = |delta: f64| {
                let mut g2 = gens.clone();
                g2.members_mut()[0].params_mut()[pi].value[j] += delta;
                let (xb, _) = g2.generate(&x, &labels, &spec).unwrap();
                det.loss(&xb, &labels).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[0][pi][j];
            assert!((fd - an).abs() <= 1e-4 * fd.abs() + 1e-9, "param {pi}[{j}]: fd {fd} vs {an}");
        }
    }

    #[test]
    fn pair_routes_gradients_by_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let det = tiny_detector(8);
        let gens = Generators::pair(&GeneratorArch::default(), &mut rng).unwrap();
        let x = random([4, 3, 8, 8], &mut rng);
        let spec = BlurSpec::with_k(3).unwrap();
        // fake-only batch: g_real gets nothing
        let (_, g) = gens.loss_and_grads(&det, &x, &[1, 1, 1, 1], &spec).unwrap();
        assert!(g[0].iter().flatten().all(|v| *v == 0.0));
        assert!(g[1].iter().flatten().any(|v| *v != 0.0));
        let (_, g) = gens.loss_and_grads(&det, &x, &[0, 0, 0, 0], &spec).unwrap();
        assert!(g[1].iter().flatten().all(|v| *v == 0.0));
        assert!(g[0].iter().flatten().any(|v| *v != 0.0));
        // mixed batch: the ρ of each sample comes from its own class's generator
        let labels = [0u8, 1, 0, 1];
        let rho = gens.rho_for(&x, &labels).unwrap();
        if let Generators::Pair(p) = &gens {
            assert_eq!(rho.sample(0), p.g_real.rho(&x.select(&[0])).unwrap().sample(0));
            assert_eq!(rho.sample(1), p.g_fake.rho(&x.select(&[1])).unwrap().sample(0));
        }
    }

    #[test]
    fn zero_learning_rates_leave_everything_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut det = tiny_detector(10);
        let mut gens = Generators::pair(&GeneratorArch::default(), &mut rng).unwrap();
        let x = random([4, 3, 8, 8], &mut rng);
        let labels = [0u8, 1, 1, 0];
        let spec = BlurSpec::with_k(3).unwrap();
        let before_g: Vec<Vec<Param>> = gens.members().iter().map(|g| g.params().to_vec()).collect();
        let before_d = det.params().to_vec();
        let mut gopts: Vec<RAdam> = gens
            .members()
            .iter()
            .map(|g| RAdam::new(OptimConfig::generator(), g.params()))
            .collect();
        let mut dopt = RAdam::new(OptimConfig::default(), det.params());
        gen_adv_step(&det, &mut gens, &mut gopts, &x, &labels, &spec, 0.0).unwrap();
        detector_step_on_game(&mut det, &mut dopt, &gens, &x, &labels, &spec, 0.0).unwrap();
        let after_g: Vec<Vec<Param>> = gens.members().iter().map(|g| g.params().to_vec()).collect();
        assert_eq!(before_g, after_g);
        assert_eq!(before_d, det.params());
    }

    #[test]
    fn small_generator_step_does_not_lower_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let det = tiny_detector(12);
        let arch = GeneratorArch {
            head_scale: 1.0,
            ..GeneratorArch::default()
        };
        let mut gens = Generators::pair(&arch, &mut rng).unwrap();
        let x = random([8, 3, 8, 8], &mut rng);
        let labels = [0u8, 1, 0, 1, 1, 0, 1, 0];
        let spec = BlurSpec::with_k(3).unwrap();
        let mut gopts: Vec<RAdam> = gens
            .members()
            .iter()
            .map(|g| RAdam::new(OptimConfig::generator(), g.params()))
            .collect();
        let before = gen_adv_step(&det, &mut gens, &mut gopts, &x, &labels, &spec, 1e-4).unwrap();
        let (xb, _) = gens.generate(&x, &labels, &spec).unwrap();
        let after = det.loss(&xb, &labels).unwrap();
        assert!(after >= before - 1e-6, "{after} < {before}");
    }

    #[test]
    fn near_identity_generator_reduces_the_game_to_clean_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut det = tiny_detector(14);
        let arch = GeneratorArch {
            sigma_init: 1.0 / 999.0,
            head_scale: 0.0,
            ..GeneratorArch::default()
        };
        let gens = Generators::pair(&arch, &mut rng).unwrap();
        let x = random([6, 3, 12, 12], &mut rng);
        let labels = [0u8, 1, 0, 1, 0, 1];
        let mut opt = RAdam::new(OptimConfig::default(), det.params());
        let losses = detector_step_on_game(&mut det, &mut opt, &gens, &x, &labels, &BlurSpec::default(), 1e-3).unwrap();
        assert!((losses.clean - losses.generated).abs() < 1e-3);
    }
}
