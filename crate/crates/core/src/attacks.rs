//! Gradient-based adversarial examples: additive (FGSM, PGD), spatial
//! (flow warping) and blurring (per-pixel σ maps), each under an explicit
//! budget that is re-verified when the result is constructed.
//!
//! All attacks work on NCHW batches. Samples never interact, so a batch
//! attack is the same as attacking each image on its own.

use serde::{Deserialize, Serialize};

use crate::blur::{blur_batch, blur_batch_backward, BlurSpec, RhoBounds, SigmaMap};
use crate::detector::{check_labels, Classifier};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp::{warp_flow_grad, warp_planes, FlowField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Additive,
    Spatial,
    Blur,
}

/// The constraint set an attack operates in.
///
/// `epsilon` is the l∞ radius for additive attacks, the total ρ step for
/// blur attacks and the per-pixel flow norm bound for spatial attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBudget {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub flow_reg: f64,
}

impl PerturbationBudget {
    /// Single signed step of size ε.
    pub fn fgsm(epsilon: f64) -> Self {
        PerturbationBudget {
            family: AttackFamily::Additive,
            epsilon,
            steps: 1,
            step_size: epsilon,
            flow_reg: 0.0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, step_size: f64) -> Self {
        PerturbationBudget {
            family: AttackFamily::Additive,
            epsilon,
            steps,
            step_size,
            flow_reg: 0.0,
        }
    }

    /// Blur ascent with total step ε split evenly over `steps`.
    pub fn blur(epsilon: f64, steps: usize) -> Self {
        PerturbationBudget {
            family: AttackFamily::Blur,
            epsilon,
            steps,
            step_size: epsilon / steps.max(1) as f64,
            flow_reg: 0.0,
        }
    }

    pub fn spatial(epsilon: f64, steps: usize, step_size: f64, flow_reg: f64) -> Self {
        PerturbationBudget {
            family: AttackFamily::Spatial,
            epsilon,
            steps,
            step_size,
            flow_reg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon >= 0.0
            && self.epsilon.is_finite()
            && self.steps >= 1
            && self.step_size >= 0.0
            && self.step_size.is_finite()
            && self.flow_reg >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid perturbation budget {self:?}")));
        }
        Ok(())
    }

    fn expect(&self, family: AttackFamily) -> Result<()> {
        self.validate()?;
        if self.family != family {
            return Err(Error::Config(format!("{family:?} attack given a {:?} budget", self.family)));
        }
        Ok(())
    }
}

/// Defaults used throughout: FGSM ε = 16/255; blur ε = 0.1, one step;
/// spatial flows bounded by 2 px, three steps of 0.5 px, TV weight 0.05.
pub mod defaults {
    use super::PerturbationBudget;

    pub const FGSM_EPSILON: f64 = 16.0 / 255.0;
    pub const BLUR_EPSILON: f64 = 0.1;
    pub const SIGMA_INIT: f64 = 1.0;
    pub const FLOW_LIMIT: f64 = 2.0;
    pub const FLOW_STEPS: usize = 3;
    pub const FLOW_STEP_SIZE: f64 = 0.5;
    pub const FLOW_REG: f64 = 0.05;

    pub fn fgsm() -> PerturbationBudget {
        PerturbationBudget::fgsm(FGSM_EPSILON)
    }

    pub fn blur() -> PerturbationBudget {
        PerturbationBudget::blur(BLUR_EPSILON, 1)
    }

    pub fn spatial() -> PerturbationBudget {
        PerturbationBudget::spatial(FLOW_LIMIT, FLOW_STEPS, FLOW_STEP_SIZE, FLOW_REG)
    }
}

/// Blur operator and σ initialization used by blur attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurSettings {
    pub spec: BlurSpec,
    pub bounds: RhoBounds,
    pub sigma_init: f64,
}

impl Default for BlurSettings {
    fn default() -> Self {
        BlurSettings {
            spec: BlurSpec::default(),
            bounds: RhoBounds::default(),
            sigma_init: defaults::SIGMA_INIT,
        }
    }
}

impl BlurSettings {
    pub fn with_k(k: usize) -> Result<Self> {
        Ok(BlurSettings {
            spec: BlurSpec::with_k(k)?,
            ..BlurSettings::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.bounds.validate()?;
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            return Err(Error::Config(format!("sigma_init must be positive, got {}", self.sigma_init)));
        }
        Ok(())
    }

    /// Constant ρ batch `[n, 1, h, w]` at the initial σ.
    pub fn initial_rho(&self, n: usize, h: usize, w: usize) -> Tensor {
        Tensor::filled([n, 1, h, w], self.bounds.clamp(1.0 / self.sigma_init))
    }
}

/// Anything that maps a labelled batch to a ρ batch `[n, 1, h, w]`.
pub trait RhoSource {
    fn rho_for(&self, x: &Tensor, labels: &[u8]) -> Result<Tensor>;
}

/// How a perturbation was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub family: AttackFamily,
    pub budget: PerturbationBudget,
    pub source_model: String,
    /// Per-sample loss on the clean input.
    pub loss_before: Vec<f64>,
    /// Per-sample loss on the adversarial input.
    pub loss_after: Vec<f64>,
}

/// What the budget is checked against.
#[derive(Debug, Clone, PartialEq)]
pub enum Evidence {
    /// l∞ ball around `reference`, intersected with `[0, 1]`.
    Additive { reference: Tensor },
    /// ρ maps that produced the blur.
    Blur { rho: Tensor, bounds: RhoBounds },
    /// One flow per sample.
    Spatial { flows: Vec<FlowField> },
    /// Blur stage evidence plus the additive stage's reference (the blurred batch).
    Combined {
        blurred: Tensor,
        rho: Tensor,
        bounds: RhoBounds,
    },
}

/// A batch of adversarial images that provably satisfies its budget.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    images: Tensor,
    evidence: Evidence,
    provenance: Provenance,
}

impl AdversarialExample {
    /// Verifies `images` against `evidence` and the budget in `provenance`.
    pub fn new(images: Tensor, evidence: Evidence, provenance: Provenance) -> Result<Self> {
        if !images.is_finite() {
            return Err(Error::Budget("adversarial images contain non-finite values".into()));
        }
        let eps = provenance.budget.epsilon;
        match &evidence {
            Evidence::Additive { reference } => check_linf(&images, reference, eps)?,
            Evidence::Blur { rho, bounds } => check_rho(rho, &images, bounds)?,
            Evidence::Spatial { flows } => {
                if flows.len() != images.n() {
                    return Err(Error::Budget("one flow field per sample required".into()));
                }
                for (i, f) in flows.iter().enumerate() {
                    let m = f.max_norm();
                    if m > eps {
                        return Err(Error::Budget(format!("sample {i}: flow norm {m} exceeds {eps}")));
                    }
                }
            }
            Evidence::Combined { blurred, rho, bounds } => {
                check_rho(rho, blurred, bounds)?;
                check_linf(&images, blurred, eps)?;
            }
        }
        Ok(AdversarialExample {
            images,
            evidence,
            provenance,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn into_images(self) -> Tensor {
        self.images
    }

    pub fn evidence(&self) -> &Evidence {
        &self.evidence
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// σ map of sample `i`, for blur-based examples.
    pub fn sigma_map(&self, i: usize) -> Option<SigmaMap> {
        let rho = match &self.evidence {
            Evidence::Blur { rho, .. } | Evidence::Combined { rho, .. } => rho,
            _ => return None,
        };
        SigmaMap::new(rho.h(), rho.w(), rho.sample(i).iter().map(|r| 1.0 / r).collect()).ok()
    }
}

fn check_linf(images: &Tensor, reference: &Tensor, eps: f64) -> Result<()> {
    if images.shape() != reference.shape() {
        return Err(Error::Budget("adversarial batch shape differs from its reference".into()));
    }
    for (k, (&a, &r)) in images.data().iter().zip(reference.data()).enumerate() {
        if a < r - eps || a > r + eps || !(0.0..=1.0).contains(&a) {
            return Err(Error::Budget(format!(
                "entry {k}: {a} outside [{}, {}] ∩ [0, 1]",
                r - eps,
                r + eps
            )));
        }
    }
    Ok(())
}

fn check_rho(rho: &Tensor, images: &Tensor, bounds: &RhoBounds) -> Result<()> {
    let [n, _, h, w] = images.shape();
    if rho.shape() != [n, 1, h, w] {
        return Err(Error::Budget("ρ batch shape differs from the images".into()));
    }
    if let Some(r) = rho.data().iter().find(|r| !(**r >= bounds.min && **r <= bounds.max)) {
        return Err(Error::Budget(format!("ρ = {r} outside [{}, {}]", bounds.min, bounds.max)));
    }
    Ok(())
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn provenance<C: Classifier + ?Sized>(
    model: &C,
    budget: PerturbationBudget,
    loss_before: Vec<f64>,
    adv: &Tensor,
    labels: &[u8],
) -> Result<Provenance> {
    Ok(Provenance {
        family: budget.family,
        budget,
        source_model: model.model_id().to_string(),
        loss_before,
        loss_after: model.losses(adv, labels)?,
    })
}

/// `clamp_[0,1](x + ε·sign(∇ₓL))` without provenance bookkeeping.
/// Returns the clean per-sample losses alongside.
pub fn fgsm_images<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[u8], epsilon: f64) -> Result<(Tensor, Vec<f64>)> {
    let (losses, g) = model.loss_and_input_grad(x, labels)?;
    let mut adv = x.clone();
    for (a, gv) in adv.data_mut().iter_mut().zip(g.data()) {
        *a = (*a + epsilon * sign(*gv)).clamp(0.0, 1.0);
    }
    Ok((adv, losses))
}

/// Fast gradient sign method, clamped to the valid pixel range.
pub fn fgsm<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[u8], epsilon: f64) -> Result<AdversarialExample> {
    let budget = PerturbationBudget::fgsm(epsilon);
    budget.validate()?;
    let (adv, before) = fgsm_images(model, x, labels, epsilon)?;
    let prov = provenance(model, budget, before, &adv, labels)?;
    AdversarialExample::new(adv, Evidence::Additive { reference: x.clone() }, prov)
}

/// Iterated signed steps projected onto the l∞ ball and `[0, 1]`.
pub fn pgd_images<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[u8],
    budget: &PerturbationBudget,
) -> Result<(Tensor, Vec<f64>)> {
    budget.expect(AttackFamily::Additive)?;
    let eps = budget.epsilon;
    let mut adv = x.clone();
    let mut clean = None;
    for _ in 0..budget.steps {
        let (losses, g) = model.loss_and_input_grad(&adv, labels)?;
        clean.get_or_insert(losses);
        for ((a, gv), &x0) in adv.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
            *a = (*a + budget.step_size * sign(*gv)).clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        }
    }
    Ok((adv, clean.unwrap_or_default()))
}

pub fn pgd<C: Classifier + ?Sized>(model: &C, x: &Tensor, labels: &[u8], budget: &PerturbationBudget) -> Result<AdversarialExample> {
    let (adv, before) = pgd_images(model, x, labels, budget)?;
    let prov = provenance(model, *budget, before, &adv, labels)?;
    AdversarialExample::new(adv, Evidence::Additive { reference: x.clone() }, prov)
}

/// Gradient ascent on the ρ map: `ρ ← clamp(ρ + (ε/steps)·∇_ρ L)`.
/// Returns the blurred batch, the final ρ batch and the per-sample losses of
/// the initial blur.
pub fn blur_attack_images<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[u8],
    budget: &PerturbationBudget,
    settings: &BlurSettings,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    budget.expect(AttackFamily::Blur)?;
    settings.validate()?;
    check_labels(labels, x.n())?;
    let mut rho = settings.initial_rho(x.n(), x.h(), x.w());
    let step = budget.epsilon / budget.steps as f64;
    let mut initial = None;
    if step > 0.0 {
        for _ in 0..budget.steps {
            let xb = blur_batch(x, &rho, &settings.spec)?;
            let (losses, gxb) = model.loss_and_input_grad(&xb, labels)?;
            initial.get_or_insert(losses);
            let (_, grho) = blur_batch_backward(x, &rho, &settings.spec, &gxb)?;
            if !grho.is_finite() {
                return Err(Error::Numeric(format!("non-finite ρ gradient against {}", model.model_id())));
            }
            for (r, g) in rho.data_mut().iter_mut().zip(grho.data()) {
                *r = settings.bounds.clamp(*r + step * g);
            }
        }
    }
    let adv = blur_batch(x, &rho, &settings.spec)?;
    let initial = match initial {
        Some(l) => l,
        None => model.losses(&adv, labels)?,
    };
    Ok((adv, rho, initial))
}

/// Blurring attack. The returned example's provenance records the clean
/// loss as `loss_before`; its evidence holds the ρ maps.
pub fn blur_attack<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[u8],
    budget: &PerturbationBudget,
    settings: &BlurSettings,
) -> Result<AdversarialExample> {
    let (adv, rho, _) = blur_attack_images(model, x, labels, budget, settings)?;
    let before = model.losses(x, labels)?;
    let prov = provenance(model, *budget, before, &adv, labels)?;
    AdversarialExample::new(
        adv,
        Evidence::Blur {
            rho,
            bounds: settings.bounds,
        },
        prov,
    )
}

/// Signed ascent on `Σ L − flow_reg·TV(flow)` with per-pixel flow norm
/// clipped to ε. Returns the warped batch and one flow per sample.
pub fn spatial_attack_images<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[u8],
    budget: &PerturbationBudget,
) -> Result<(Tensor, Vec<FlowField>)> {
    budget.expect(AttackFamily::Spatial)?;
    check_labels(labels, x.n())?;
    let [n, c, h, w] = x.shape();
    let mut flows = vec![FlowField::zeros(h, w); n];
    if budget.epsilon > 0.0 && budget.step_size > 0.0 {
        for _ in 0..budget.steps {
            let adv = warp_batch(x, &flows)?;
            let (_, g) = model.loss_and_input_grad(&adv, labels)?;
            for (s, flow) in flows.iter_mut().enumerate() {
                let (mut gu, mut gv) = warp_flow_grad(x.sample(s), c, flow, g.sample(s));
                if budget.flow_reg > 0.0 {
                    let (su, sv) = flow.smoothness_grad(TV_ETA);
                    for (a, b) in gu.iter_mut().zip(&su) {
                        *a -= budget.flow_reg * b;
                    }
                    for (a, b) in gv.iter_mut().zip(&sv) {
                        *a -= budget.flow_reg * b;
                    }
                }
                if gu.iter().chain(&gv).any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite flow gradient against {}", model.model_id())));
                }
                for (d, gd) in flow.du.iter_mut().zip(&gu) {
                    *d += budget.step_size * sign(*gd);
                }
                for (d, gd) in flow.dv.iter_mut().zip(&gv) {
                    *d += budget.step_size * sign(*gd);
                }
                flow.clip_norm(budget.epsilon);
            }
        }
    }
    Ok((warp_batch(x, &flows)?, flows))
}

const TV_ETA: f64 = 1e-8;

/// Warps each sample of `x` by its own flow.
pub fn warp_batch(x: &Tensor, flows: &[FlowField]) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if flows.len() != n || flows.iter().any(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::Shape("one h×w flow per sample required".into()));
    }
    let mut data = Vec::with_capacity(x.data().len());
    for (s, f) in flows.iter().enumerate() {
        data.extend(warp_planes(x.sample(s), c, f));
    }
    Tensor::from_vec(x.shape(), data)
}

pub fn spatial_attack<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[u8],
    budget: &PerturbationBudget,
) -> Result<AdversarialExample> {
    let (adv, flows) = spatial_attack_images(model, x, labels, budget)?;
    let before = model.losses(x, labels)?;
    let prov = provenance(model, *budget, before, &adv, labels)?;
    AdversarialExample::new(adv, Evidence::Spatial { flows }, prov)
}

/// Where the blur stage of a combined attack gets its ρ maps.
pub enum SigmaSource<'a> {
    /// Input-gradient blur attack from the settings' initial σ.
    Gradient { budget: PerturbationBudget, settings: BlurSettings },
    /// A learned map (for example a generator pair), applied with `settings.spec`.
    Learned { source: &'a dyn RhoSource, settings: BlurSettings },
}

/// Blur stage followed by FGSM on the blurred batch.
/// Returns `(x_adv2, x_adv1, ρ)`.
pub fn combined_attack_images<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[u8],
    source: &SigmaSource<'_>,
    additive_epsilon: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (blurred, rho, bounds) = match source {
        SigmaSource::Gradient { budget, settings } => {
            let (b, r, _) = blur_attack_images(model, x, labels, budget, settings)?;
            (b, r, settings.bounds)
        }
        SigmaSource::Learned { source, settings } => {
            settings.validate()?;
            let r = source.rho_for(x, labels)?;
            (blur_batch(x, &r, &settings.spec)?, r, settings.bounds)
        }
    };
    check_rho(&rho, &blurred, &bounds)?;
    let (adv, _) = fgsm_images(model, &blurred, labels, additive_epsilon)?;
    Ok((adv, blurred, rho))
}

pub fn combined_attack<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[u8],
    source: &SigmaSource<'_>,
    additive: &PerturbationBudget,
) -> Result<AdversarialExample> {
    additive.expect(AttackFamily::Additive)?;
    let (adv, blurred, rho) = combined_attack_images(model, x, labels, source, additive.epsilon)?;
    let bounds = match source {
        SigmaSource::Gradient { settings, .. } | SigmaSource::Learned { settings, .. } => settings.bounds,
    };
    let before = model.losses(x, labels)?;
    let prov = provenance(model, *additive, before, &adv, labels)?;
    AdversarialExample::new(adv, Evidence::Combined { blurred, rho, bounds }, prov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Logistic model over flattened pixels: logits `(0, w·x + b)`.
    struct Logistic {
        w: Vec<f64>,
        b: f64,
    }

    impl Classifier for Logistic {
        fn model_id(&self) -> &str {
            "logistic"
        }

        fn logits(&self, x: &Tensor) -> Result<Vec<[f64; 2]>> {
            Ok((0..x.n())
                .map(|i| [0.0, self.w.iter().zip(x.sample(i)).map(|(a, b)| a * b).sum::<f64>() + self.b])
                .collect())
        }

        fn loss_and_input_grad(&self, x: &Tensor, labels: &[u8]) -> Result<(Vec<f64>, Tensor)> {
            let logits = self.logits(x)?;
            let mut g = Tensor::zeros(x.shape());
            let mut losses = Vec::new();
            for (i, (z, &y)) in logits.iter().zip(labels).enumerate() {
                losses.push(cross_entropy(*z, y));
                let p = 1.0 / (1.0 + (-z[1]).exp());
                for (gv, wv) in g.sample_mut(i).iter_mut().zip(&self.w) {
                    *gv = (p - y as f64) * wv;
                }
            }
            Ok((losses, g))
        }
    }

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    fn checker_model(h: usize, w: usize) -> Logistic {
        Logistic {
            w: (0..h * w).map(|p| if (p / w + p % w) % 2 == 0 { 4.0 } else { -4.0 }).collect(),
            b: 0.0,
        }
    }

    /// Smooth ramps plus a ±0.1 checkerboard on the fakes.
    fn checker_batch(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<u8>) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for s in 0..n {
            let fake = s % 2 == 1;
            let (a, b) = (rng.random_range(0.3..0.6), rng.random_range(-0.01..0.01));
            for p in 0..h * w {
                let base = a + b * (p / w) as f64;
                let art = if fake { if (p / w + p % w) % 2 == 0 { 0.1 } else { -0.1 } } else { 0.0 };
                data.push(base + art);
            }
            labels.push(u8::from(fake));
        }
        (Tensor::from_vec([n, 1, h, w], data).unwrap(), labels)
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(2.0), 1.0);
        assert_eq!(sign(-1e-300), -1.0);
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([3, 1, 4, 4], &mut rng);
        let model = Logistic {
            w: (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: 0.1,
        };
        let adv = fgsm(&model, &x, &[0, 1, 1], 0.0).unwrap();
        assert_eq!(adv.images(), &x);
    }

    #[test]
    fn fgsm_matches_logistic_closed_form() {
        // ∇ₓL = (p − y)·w, so sign(∇ₓL) = sign(−y'·w) with y' = 2y − 1
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = Logistic { w: w.clone(), b: 0.0 };
        let x = Tensor::filled([2, 1, 1, 8], 0.5);
        let eps = 0.1;
        let adv = fgsm(&model, &x, &[0, 1], eps).unwrap();
        for (i, y) in [(0usize, -1.0), (1, 1.0)] {
            for (j, wv) in w.iter().enumerate() {
                let expect = 0.5 + eps * sign(-y * wv);
                assert_eq!(adv.images().sample(i)[j], expect);
            }
        }
    }

    #[test]
    fn pgd_single_step_equals_fgsm_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([4, 2, 5, 5], &mut rng);
        let model = Logistic {
            w: (0..50).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: -0.2,
        };
        let labels = [0, 1, 0, 1];
        let eps = 16.0 / 255.0;
        let a = fgsm(&model, &x, &labels, eps).unwrap();
        let b = pgd(&model, &x, &labels, &PerturbationBudget::pgd(eps, 1, eps)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.images()), bits(b.images()));
    }

    #[test]
    fn pgd_respects_ball_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([3, 1, 6, 6], &mut rng);
        let model = Logistic {
            w: (0..36).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: 0.0,
        };
        let budget = PerturbationBudget::pgd(0.05, 5, 0.03);
        let adv = pgd(&model, &x, &[0, 1, 0], &budget).unwrap();
        for (a, r) in adv.images().data().iter().zip(x.data()) {
            assert!(*a >= r - 0.05 && *a <= r + 0.05 && (0.0..=1.0).contains(a));
        }
        let zero = pgd(&model, &x, &[0, 1, 0], &PerturbationBudget::pgd(0.0, 3, 0.01)).unwrap();
        assert_eq!(zero.images(), &x);
    }

    #[test]
    fn violating_examples_are_rejected() {
        let x = Tensor::filled([1, 1, 2, 2], 0.5);
        let mut bad = x.clone();
        bad.data_mut()[0] = 0.7;
        let prov = Provenance {
            family: AttackFamily::Additive,
            budget: PerturbationBudget::fgsm(0.1),
            source_model: "m".into(),
            loss_before: vec![],
            loss_after: vec![],
        };
        let r = AdversarialExample::new(bad, Evidence::Additive { reference: x.clone() }, prov.clone());
        assert!(matches!(r, Err(Error::Budget(_))));
        let rho = Tensor::filled([1, 1, 2, 2], 5000.0);
        let r = AdversarialExample::new(
            x,
            Evidence::Blur {
                rho,
                bounds: RhoBounds::default(),
            },
            prov,
        );
        assert!(matches!(r, Err(Error::Budget(_))));
    }

    #[test]
    fn blur_attack_zero_epsilon_is_initial_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, labels) = checker_batch(4, 9, 9, &mut rng);
        let model = checker_model(9, 9);
        let settings = BlurSettings::with_k(3).unwrap();
        let adv = blur_attack(&model, &x, &labels, &PerturbationBudget::blur(0.0, 1), &settings).unwrap();
        let init = blur_batch(&x, &settings.initial_rho(4, 9, 9), &settings.spec).unwrap();
        assert_eq!(adv.images(), &init);
        assert_eq!(adv.sigma_map(0).unwrap().data(), &vec![1.0; 81][..]);
    }

    #[test]
    fn blur_step_raises_loss_on_checkerboard_fakes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, labels) = checker_batch(20, 9, 9, &mut rng);
        let model = checker_model(9, 9);
        // the 3×3 checkerboard response (1 - 2e^{-1/(2σ²)})² falls with σ below σ ≈ 0.85
        let settings = BlurSettings {
            sigma_init: 0.5,
            ..BlurSettings::with_k(3).unwrap()
        };
        let (_, _, initial) = blur_attack_images(&model, &x, &labels, &PerturbationBudget::blur(0.0, 1), &settings).unwrap();
        let adv = blur_attack(&model, &x, &labels, &PerturbationBudget::blur(0.1, 1), &settings).unwrap();
        let after = &adv.provenance().loss_after;
        for i in (1..20).step_by(2) {
            assert!(after[i] > initial[i], "sample {i}: {} <= {}", after[i], initial[i]);
            // fakes get blurred more
            assert!(adv.sigma_map(i).unwrap().min() > 0.5);
        }
    }

    #[test]
    fn multi_step_blur_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, labels) = checker_batch(4, 9, 9, &mut rng);
        let model = checker_model(9, 9);
        let settings = BlurSettings::with_k(5).unwrap();
        let adv = blur_attack(&model, &x, &labels, &PerturbationBudget::blur(1e4, 3), &settings).unwrap();
        if let Evidence::Blur { rho, .. } = adv.evidence() {
            assert!(rho.data().iter().all(|r| (0.1..=1000.0).contains(r)));
        } else {
            panic!("blur evidence expected");
        }
    }

    #[test]
    fn spatial_zero_epsilon_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random([2, 3, 6, 6], &mut rng);
        let model = Logistic {
            w: (0..108).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: 0.0,
        };
        let adv = spatial_attack(&model, &x, &[0, 1], &PerturbationBudget::spatial(0.0, 3, 0.5, 0.05)).unwrap();
        assert_eq!(adv.images(), &x);
    }

    #[test]
    fn spatial_attack_stays_in_budget_and_raises_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, labels) = checker_batch(6, 9, 9, &mut rng);
        let model = checker_model(9, 9);
        let adv = spatial_attack(&model, &x, &labels, &defaults::spatial()).unwrap();
        if let Evidence::Spatial { flows } = adv.evidence() {
            assert!(flows.iter().all(|f| f.max_norm() <= 2.0));
        }
        let p = adv.provenance();
        let before: f64 = p.loss_before.iter().sum();
        let after: f64 = p.loss_after.iter().sum();
        assert!(after > before);
    }

    struct ConstRho(f64);

    impl RhoSource for ConstRho {
        fn rho_for(&self, x: &Tensor, _: &[u8]) -> Result<Tensor> {
            Ok(Tensor::filled([x.n(), 1, x.h(), x.w()], self.0))
        }
    }

    #[test]
    fn combined_attack_reduces_to_initial_blur_at_zero_budgets() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (x, labels) = checker_batch(4, 9, 9, &mut rng);
        let model = checker_model(9, 9);
        let settings = BlurSettings::with_k(3).unwrap();
        let source = SigmaSource::Gradient {
            budget: PerturbationBudget::blur(0.0, 1),
            settings,
        };
        let adv = combined_attack(&model, &x, &labels, &source, &PerturbationBudget::fgsm(0.0)).unwrap();
        let init = blur_batch(&x, &settings.initial_rho(4, 9, 9), &settings.spec).unwrap();
        assert_eq!(adv.images(), &init);
    }

    #[test]
    fn combined_attack_bounds_the_additive_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, labels) = checker_batch(4, 9, 9, &mut rng);
        let model = checker_model(9, 9);
        let learned = ConstRho(0.8);
        let source = SigmaSource::Learned {
            source: &learned,
            settings: BlurSettings::with_k(3).unwrap(),
        };
        let eps = defaults::FGSM_EPSILON;
        let adv = combined_attack(&model, &x, &labels, &source, &defaults::fgsm()).unwrap();
        if let Evidence::Combined { blurred, .. } = adv.evidence() {
            for (a, b) in adv.images().data().iter().zip(blurred.data()) {
                assert!(*a >= b - eps && *a <= b + eps);
            }
        } else {
            panic!("combined evidence expected");
        }
    }

    #[test]
    fn budget_family_mismatch_is_a_config_error() {
        let model = checker_model(9, 9);
        let x = Tensor::filled([1, 1, 9, 9], 0.5);
        let r = pgd(&model, &x, &[0], &defaults::blur());
        assert!(matches!(r, Err(Error::Config(_))));
        assert!(PerturbationBudget::pgd(-1.0, 1, 0.1).validate().is_err());
    }
}
