//! Training regimes for the detector.
//!
//! Adversarial regimes craft their examples against the current detector
//! snapshot and minimise `L(x) + λ·L(x_adv)`. Generator regimes alternate
//! generator ascent steps with detector steps on `L(x) + L(G(x))`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{blur_attack_images, defaults, fgsm_images, pgd_images, spatial_attack_images, AttackFamily, BlurSettings, PerturbationBudget};
use crate::augment::{augment_traditional, AugmentConfig, AugmentKind};
use crate::blur::{blur_batch, Image};
use crate::detector::{Detector, DetectorArch};
use crate::error::{Error, Result};
use crate::eval::{evaluate, CellMetrics};
use crate::generator::{gen_adv_step, GeneratorArch, Generators};
use crate::nn::Gradients;
use crate::optim::{OptimConfig, RAdam};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Normal,
    Aat,
    Sat,
    BatGrad,
    BatGen,
    BatTwogen,
    Combined,
    AugNoise,
    AugBlur,
    AugJpeg,
    AugCombined,
}

impl Regime {
    pub const ALL: [Regime; 11] = [
        Regime::Normal,
        Regime::Aat,
        Regime::Sat,
        Regime::BatGrad,
        Regime::BatGen,
        Regime::BatTwogen,
        Regime::Combined,
        Regime::AugNoise,
        Regime::AugBlur,
        Regime::AugJpeg,
        Regime::AugCombined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Normal => "normal",
            Regime::Aat => "aat",
            Regime::Sat => "sat",
            Regime::BatGrad => "bat_grad",
            Regime::BatGen => "bat_gen",
            Regime::BatTwogen => "bat_twogen",
            Regime::Combined => "combined",
            Regime::AugNoise => "aug_noise",
            Regime::AugBlur => "aug_blur",
            Regime::AugJpeg => "aug_jpeg",
            Regime::AugCombined => "aug_combined",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime {s:?}")))
    }

    /// Generators needed by the regime: none, a single one, or a pair.
    pub fn generator_count(self) -> usize {
        match self {
            Regime::BatGen => 1,
            Regime::BatTwogen | Regime::Combined => 2,
            _ => 0,
        }
    }

    pub fn augmentation(self) -> Option<AugmentKind> {
        match self {
            Regime::AugNoise => Some(AugmentKind::Noise),
            Regime::AugBlur => Some(AugmentKind::Blur),
            Regime::AugJpeg => Some(AugmentKind::Jpeg),
            Regime::AugCombined => Some(AugmentKind::Combined),
            _ => None,
        }
    }

    /// Whether `λ` enters the objective.
    pub fn mixes(self) -> bool {
        matches!(self, Regime::Aat | Regime::Sat | Regime::BatGrad | Regime::Combined)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Attack budgets used while crafting training examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBudgets {
    pub additive: PerturbationBudget,
    pub spatial: PerturbationBudget,
    pub blur: PerturbationBudget,
}

impl Default for TrainBudgets {
    fn default() -> Self {
        TrainBudgets {
            additive: defaults::fgsm(),
            spatial: defaults::spatial(),
            blur: defaults::blur(),
        }
    }
}

impl TrainBudgets {
    pub fn validate(&self) -> Result<()> {
        for (b, family) in [
            (&self.additive, AttackFamily::Additive),
            (&self.spatial, AttackFamily::Spatial),
            (&self.blur, AttackFamily::Blur),
        ] {
            b.validate()?;
            if b.family != family {
                return Err(Error::Config(format!("budget for {family:?} declares family {:?}", b.family)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub generator_optim: OptimConfig,
    pub detector: DetectorArch,
    pub generator: GeneratorArch,
    pub blur: BlurSettings,
    pub budgets: TrainBudgets,
    /// Generator steps per detector step in the generator regimes.
    pub gen_steps: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Normal,
            lambda: 1.0,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            optim: OptimConfig::default(),
            generator_optim: OptimConfig::generator(),
            detector: DetectorArch::default(),
            generator: GeneratorArch::default(),
            blur: BlurSettings::default(),
            budgets: TrainBudgets::default(),
            gen_steps: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a nonnegative number, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.regime.generator_count() > 0 && self.gen_steps == 0 {
            return Err(Error::Config("gen_steps must be positive for generator regimes".into()));
        }
        self.detector.layers()?;
        self.generator.layers()?;
        self.blur.validate()?;
        self.budgets.validate()?;
        self.augment.validate()
    }
}

/// A labelled image batch held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<u8>) -> Result<Self> {
        crate::detector::check_labels(&labels, x.n())?;
        Ok(Dataset { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<u8>) {
        (self.x.select(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub regime: Regime,
    pub seed: u64,
    pub lr: f64,
    pub clean_loss: f64,
    /// Mean loss on adversarial, augmented or generated examples.
    pub adv_loss: Option<f64>,
    /// Mean generator objective before each generator step.
    pub gen_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
    pub wall_secs: f64,
}

/// Everything needed to continue training on the same trajectory.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub detector: Detector,
    pub optim: RAdam,
    pub generators: Option<Generators>,
    pub gen_optims: Vec<RAdam>,
    /// Completed epochs.
    pub epoch: usize,
}

/// Stream-separated generator for (seed, purpose, index).
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.wrapping_mul(1 << 32).wrapping_add(index));
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;

impl TrainState {
    /// Fresh detector (and generators if the regime needs them) from the seed.
    pub fn init(config: &TrainConfig, id: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, STREAM_INIT, 0);
        let detector = Detector::new(id, &config.detector, &mut rng)?;
        let generators = match config.regime.generator_count() {
            0 => None,
            1 => Some(Generators::single(&config.generator, &mut rng)?),
            _ => Some(Generators::pair(&config.generator, &mut rng)?),
        };
        TrainState::from_parts(config, detector, generators)
    }

    /// Wraps externally supplied models; generators must match the regime.
    pub fn from_parts(config: &TrainConfig, detector: Detector, generators: Option<Generators>) -> Result<Self> {
        let supplied = generators.as_ref().map_or(0, |g| g.members().len());
        if supplied != config.regime.generator_count() {
            return Err(Error::Config(format!(
                "regime {} needs {} generator(s), {} supplied",
                config.regime,
                config.regime.generator_count(),
                supplied
            )));
        }
        let optim = RAdam::new(config.optim.clone(), detector.params());
        let gen_optims = generators
            .as_ref()
            .map(|g| {
                g.members()
                    .iter()
                    .map(|m| RAdam::new(config.generator_optim.clone(), m.params()))
                    .collect()
            })
            .unwrap_or_default();
        Ok(TrainState {
            detector,
            optim,
            generators,
            gen_optims,
            epoch: 0,
        })
    }
}

/// Losses of one detector step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub clean: f64,
    pub adv: Option<f64>,
}

/// Gradient of the detector objective on one batch for every regime without
/// generators. `rng` drives augmentation only.
pub fn regime_gradient(
    detector: &Detector,
    config: &TrainConfig,
    x: &Tensor,
    labels: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<(Gradients, StepLosses)> {
    let mut grads = detector.network().zero_grads();
    if let Some(kind) = config.regime.augmentation() {
        let mut images = Vec::with_capacity(x.n());
        for i in 0..x.n() {
            images.push(augment_traditional(&Image::from_tensor(x, i), kind, &config.augment, rng)?);
        }
        let aug = Image::batch(&images)?;
        let loss = detector.accumulate_param_grad(&aug, labels, 1.0, &mut grads)?;
        return Ok((grads, StepLosses { clean: loss, adv: Some(loss) }));
    }
    let adv = match config.regime {
        Regime::Normal => None,
        Regime::Aat => Some(pgd_images(detector, x, labels, &config.budgets.additive)?.0),
        Regime::Sat => Some(spatial_attack_images(detector, x, labels, &config.budgets.spatial)?.0),
        Regime::BatGrad => Some(blur_attack_images(detector, x, labels, &config.budgets.blur, &config.blur)?.0),
        r => return Err(Error::Config(format!("regime {r} needs generators"))),
    };
    let clean = detector.accumulate_param_grad(x, labels, 1.0, &mut grads)?;
    let adv_loss = match adv {
        Some(a) => Some(detector.accumulate_param_grad(&a, labels, config.lambda, &mut grads)?),
        None => None,
    };
    Ok((grads, StepLosses { clean, adv: adv_loss }))
}

/// Detector gradient for the combined regime: generator blur, then FGSM on
/// the blurred batch, mixed with the clean loss by `λ`.
pub fn combined_gradient(detector: &Detector, gens: &Generators, config: &TrainConfig, x: &Tensor, labels: &[u8]) -> Result<(Gradients, StepLosses)> {
    let (blurred, _) = gens.generate(x, labels, &config.blur.spec)?;
    let (adv, _) = fgsm_images(detector, &blurred, labels, config.budgets.additive.epsilon)?;
    let mut grads = detector.network().zero_grads();
    let clean = detector.accumulate_param_grad(x, labels, 1.0, &mut grads)?;
    let adv_loss = detector.accumulate_param_grad(&adv, labels, config.lambda, &mut grads)?;
    Ok((grads, StepLosses { clean, adv: Some(adv_loss) }))
}

/// Detector gradient of `L(x) + L(blur(x, G(x)))`.
pub fn game_gradient(detector: &Detector, gens: &Generators, config: &TrainConfig, x: &Tensor, labels: &[u8]) -> Result<(Gradients, StepLosses)> {
    let (generated, _) = gens.generate(x, labels, &config.blur.spec)?;
    let mut grads = detector.network().zero_grads();
    let clean = detector.accumulate_param_grad(x, labels, 1.0, &mut grads)?;
    let gen = detector.accumulate_param_grad(&generated, labels, 1.0, &mut grads)?;
    Ok((grads, StepLosses { clean, adv: Some(gen) }))
}

fn check_finite(losses: &StepLosses, epoch: usize, batch: usize, config: &TrainConfig) -> Result<()> {
    if !losses.clean.is_finite() || losses.adv.is_some_and(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss ({:?}) in regime {} at epoch {epoch}, batch {batch}, seed {}",
            losses, config.regime, config.seed
        )));
    }
    Ok(())
}

/// Runs the remaining epochs of `state`. `on_epoch` sees the state after
/// every epoch (for checkpointing) and may abort by returning an error.
pub fn train_with<F>(state: &mut TrainState, config: &TrainConfig, data: &Dataset, val: Option<&Dataset>, mut on_epoch: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&TrainState, &EpochLog) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let mut logs = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let lr = config.optim.lr_at(epoch);
        let gen_lr = config.generator_optim.lr_at(epoch);
        let mut rng = derived_rng(config.seed, STREAM_EPOCH, epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut clean_sum, mut adv_sum, mut gen_sum) = (0.0, 0.0, 0.0);
        let (mut batches, mut adv_batches, mut gen_batches) = (0usize, 0usize, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = data.subset(idx);
            let (grads, losses) = match state.generators.as_mut() {
                None => regime_gradient(&state.detector, config, &x, &labels, &mut rng)?,
                Some(gens) => {
                    for _ in 0..config.gen_steps {
                        gen_sum += gen_adv_step(&state.detector, gens, &mut state.gen_optims, &x, &labels, &config.blur.spec, gen_lr)?;
                        gen_batches += 1;
                    }
                    if config.regime == Regime::Combined {
                        combined_gradient(&state.detector, gens, config, &x, &labels)?
                    } else {
                        game_gradient(&state.detector, gens, config, &x, &labels)?
                    }
                }
            };
            check_finite(&losses, epoch, b, config)?;
            state.optim.step(state.detector.params_mut(), &grads, lr);
            clean_sum += losses.clean;
            batches += 1;
            if let Some(a) = losses.adv {
                adv_sum += a;
                adv_batches += 1;
            }
        }
        state.epoch += 1;
        let metrics: Option<CellMetrics> = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&state.detector, &v.x, &v.labels, 64)?),
            _ => None,
        };
        let log = EpochLog {
            epoch,
            regime: config.regime,
            seed: config.seed,
            lr,
            clean_loss: clean_sum / batches as f64,
            adv_loss: (adv_batches > 0).then(|| adv_sum / adv_batches as f64),
            gen_loss: (gen_batches > 0).then(|| gen_sum / gen_batches as f64),
            val_acc: metrics.map(|m| m.acc),
            val_auc: metrics.map(|m| m.auc),
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(state, &log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Trains a fresh detector from the config's seed.
pub fn train(config: &TrainConfig, data: &Dataset, val: Option<&Dataset>, id: &str) -> Result<(TrainState, Vec<EpochLog>)> {
    let mut state = TrainState::init(config, id)?;
    let logs = train_with(&mut state, config, data, val, |_, _| Ok(()))?;
    Ok((state, logs))
}

/// Blurs a batch with every member's output; used to inspect generators.
pub fn generated_batch(gens: &Generators, config: &TrainConfig, x: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let rho = crate::attacks::RhoSource::rho_for(gens, x, labels)?;
    blur_batch(x, &rho, &config.blur.spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> Dataset {
        // fakes are brighter: linearly separable
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let mut data = Vec::new();
        for &y in &labels {
            let base = if y == 1 { 0.7 } else { 0.3 };
            data.extend((0..3 * 8 * 8).map(|_| base + rng.random_range(-0.05..0.05)));
        }
        Dataset::new(Tensor::from_vec([n, 3, 8, 8], data).unwrap(), labels).unwrap()
    }

    fn small(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            epochs: 2,
            batch_size: 8,
            optim: OptimConfig {
                lr: 5e-3,
                ..OptimConfig::default()
            },
            detector: DetectorArch {
                widths: vec![4, 8],
                strides: vec![1, 2],
                ..DetectorArch::default()
            },
            generator: GeneratorArch {
                stem: 4,
                width: 4,
                res_blocks: 1,
                downsamples: 1,
                ..GeneratorArch::default()
            },
            blur: BlurSettings::with_k(3).unwrap(),
            augment: AugmentConfig {
                blur_k: 3,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(Regime::parse(r.name()).unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.name()));
        }
        assert!(Regime::parse("bat").is_err());
    }

    #[test]
    fn normal_regime_separates_toy_data() {
        let data = toy(256, 1);
        let mut cfg = TrainConfig { epochs: 5, ..small(Regime::Normal) };
        cfg.optim.lr = 2e-2;
        let (state, logs) = train(&cfg, &data, Some(&data), "t").unwrap();
        assert_eq!(logs.len(), 5);
        let pred = state.detector.predict(&data.x).unwrap();
        assert_eq!(pred, data.labels);
    }

    #[test]
    fn aat_with_zero_budget_doubles_the_clean_gradient() {
        let data = toy(8, 2);
        let mut cfg = small(Regime::Aat);
        cfg.budgets.additive = PerturbationBudget::fgsm(0.0);
        let det = TrainState::init(&cfg, "t").unwrap().detector;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (adv, _) = regime_gradient(&det, &cfg, &data.x, &data.labels, &mut rng).unwrap();
        let normal = TrainConfig { regime: Regime::Normal, ..cfg.clone() };
        let (clean, _) = regime_gradient(&det, &normal, &data.x, &data.labels, &mut rng).unwrap();
        for (a, c) in adv.iter().flatten().zip(clean.iter().flatten()) {
            assert!((a - 2.0 * c).abs() <= 1e-6 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn zero_lambda_reduces_to_the_clean_gradient() {
        let data = toy(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for regime in [Regime::Aat, Regime::Sat, Regime::BatGrad] {
            let cfg = TrainConfig { lambda: 0.0, ..small(regime) };
            let det = TrainState::init(&cfg, "t").unwrap().detector;
            let (g, _) = regime_gradient(&det, &cfg, &data.x, &data.labels, &mut rng).unwrap();
            let normal = TrainConfig { regime: Regime::Normal, ..cfg.clone() };
            let (c, _) = regime_gradient(&det, &normal, &data.x, &data.labels, &mut rng).unwrap();
            assert_eq!(g, c, "{regime}");
        }
    }

    #[test]
    fn generator_mismatch_is_a_config_error() {
        let cfg = small(Regime::BatTwogen);
        let det = TrainState::init(&small(Regime::Normal), "t").unwrap().detector;
        let single = Generators::single(&cfg.generator, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(TrainState::from_parts(&cfg, det.clone(), Some(single.clone())), Err(Error::Config(_))));
        assert!(matches!(TrainState::from_parts(&small(Regime::Normal), det, Some(single)), Err(Error::Config(_))));
    }

    #[test]
    fn every_regime_runs_and_is_deterministic() {
        let data = toy(16, 4);
        for regime in Regime::ALL {
            let cfg = TrainConfig { epochs: 1, ..small(regime) };
            let (a, la) = train(&cfg, &data, None, "t").unwrap();
            let (b, _) = train(&cfg, &data, None, "t").unwrap();
            assert_eq!(a.detector.params(), b.detector.params(), "{regime}");
            assert!(la[0].clean_loss.is_finite());
            assert_eq!(a.generators.is_some(), regime.generator_count() > 0);
        }
    }

    #[test]
    fn resumed_training_follows_the_same_trajectory() {
        let data = toy(16, 5);
        let cfg = TrainConfig { epochs: 3, ..small(Regime::BatTwogen) };
        let (full, _) = train(&cfg, &data, None, "t").unwrap();
        let mut state = TrainState::init(&cfg, "t").unwrap();
        let one = TrainConfig { epochs: 1, ..cfg.clone() };
        train_with(&mut state, &one, &data, None, |_, _| Ok(())).unwrap();
        let mut resumed = state.clone();
        train_with(&mut resumed, &cfg, &data, None, |_, _| Ok(())).unwrap();
        assert_eq!(full.detector.params(), resumed.detector.params());
        let g = |s: &TrainState| s.generators.as_ref().unwrap().members().iter().map(|m| m.params().to_vec()).collect::<Vec<_>>();
        assert_eq!(g(&full), g(&resumed));
    }
}
