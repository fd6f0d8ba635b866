//! The acceptance suite behind `advblur reproduce`.
//!
//! Each [`Criterion`] yields a list of [`Check`]s; a criterion passes when all
//! of its checks do. Thresholds are constants of this module, not config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    blur_attack_images, combined_attack_images, fgsm_images, pgd_images, spatial_attack_images, BlurSettings,
    PerturbationBudget, SigmaSource,
};
use crate::blur::{blur_batch, BlurSpec};
use crate::config::ExperimentConfig;
use crate::data::{load_manifest, Family, Filters, Quality, Split, SynthSpec, MANIFEST_FILE, SPEC_FILE};
use crate::detector::{Classifier, Detector};
use crate::error::{Error, Result};
use crate::eval::{accuracy, evaluate, median, transfer_matrix, CellKey, EvalReport, ReportMeta, DEFAULT_THRESHOLD};
use crate::gradcheck::{blur_operator_checks, gradient_checks, Measurement};
use crate::tensor::Tensor;
use crate::train::{train, Dataset, Regime, TrainState};

/// Fraction of fakes whose loss must rise under one blur or FGSM step.
pub const LOSS_INCREASE_FRACTION: f64 = 0.95;
/// Fraction of samples on which a follow-up attack stage must not lower the loss.
pub const FOLLOW_UP_FRACTION: f64 = 0.90;
/// Two-Gen-BAT's required mean unseen-cell AUC margin over the normal regime.
pub const GENERALIZATION_MARGIN: f64 = 0.03;
/// Combined AT may trail Two-Gen-BAT by at most this much.
pub const COMBINED_SLACK: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    BlurOperator,
    GradChecks,
    AttackContracts,
    KernelOrder,
    Generalization,
    Augmentation,
    Transfer,
    Determinism,
    /// Further measured properties of the attacks and transfer matrices.
    AttackProperties,
}

impl Criterion {
    pub const ALL: [Criterion; 9] = [
        Criterion::BlurOperator,
        Criterion::GradChecks,
        Criterion::AttackContracts,
        Criterion::KernelOrder,
        Criterion::Generalization,
        Criterion::Augmentation,
        Criterion::Transfer,
        Criterion::Determinism,
        Criterion::AttackProperties,
    ];

    /// Position in the acceptance list; the extra properties have none.
    pub fn number(self) -> Option<usize> {
        Criterion::ALL[..8].iter().position(|&c| c == self).map(|i| i + 1)
    }

    pub fn slug(self) -> &'static str {
        match self {
            Criterion::BlurOperator => "blur",
            Criterion::GradChecks => "grad-checks",
            Criterion::AttackContracts => "attacks",
            Criterion::KernelOrder => "kernel-order",
            Criterion::Generalization => "generalization",
            Criterion::Augmentation => "augmentation",
            Criterion::Transfer => "transfer",
            Criterion::Determinism => "determinism",
            Criterion::AttackProperties => "properties",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Criterion::BlurOperator => "blur operator correctness",
            Criterion::GradChecks => "gradient fidelity",
            Criterion::AttackContracts => "attack contracts",
            Criterion::KernelOrder => "kernel-size ordering",
            Criterion::Generalization => "generalization gain",
            Criterion::Augmentation => "traditional-augmentation contrast",
            Criterion::Transfer => "transfer structure",
            Criterion::Determinism => "determinism",
            Criterion::AttackProperties => "measured attack properties",
        }
    }

    /// Accepts a slug or a criterion number.
    pub fn parse(s: &str) -> Result<Criterion> {
        let s = s.trim();
        Criterion::ALL
            .into_iter()
            .find(|c| c.slug() == s || c.number().is_some_and(|n| n.to_string() == s))
            .ok_or_else(|| {
                let names: Vec<_> = Criterion::ALL.iter().map(|c| c.slug()).collect();
                Error::Validation(format!("unknown criterion `{s}` (expected one of {} or 1-8)", names.join(", ")))
            })
    }

    /// Parses a comma-separated selection.
    pub fn parse_list(s: &str) -> Result<Vec<Criterion>> {
        let mut out: Vec<Criterion> = s.split(',').filter(|p| !p.trim().is_empty()).map(Criterion::parse).collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::Validation("empty criterion selection".into()));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Wall-clock budget on one CPU. Training done on first use counts
    /// against the criterion that triggers it.
    pub fn time_budget_secs(self) -> Option<f64> {
        match self {
            Criterion::BlurOperator => Some(10.0),
            Criterion::GradChecks => Some(60.0),
            Criterion::AttackContracts => Some(300.0),
            Criterion::KernelOrder | Criterion::Transfer => Some(600.0),
            Criterion::Generalization | Criterion::Augmentation => Some(7200.0),
            Criterion::Determinism | Criterion::AttackProperties => None,
        }
    }

    pub fn needs_data(self) -> bool {
        !matches!(self, Criterion::BlurOperator | Criterion::GradChecks | Criterion::Determinism)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.number() {
            Some(n) => write!(f, "{n} {}", self.slug()),
            None => write!(f, "+ {}", self.slug()),
        }
    }
}

/// One measured condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub observed: String,
    pub required: String,
    pub passed: bool,
}

impl Check {
    fn new(name: impl Into<String>, observed: impl Into<String>, required: impl Into<String>, passed: bool) -> Self {
        Check {
            name: name.into(),
            observed: observed.into(),
            required: required.into(),
            passed,
        }
    }

    fn measurement(m: &Measurement) -> Self {
        Check::new(
            format!("{} ({} cases)", m.name, m.cases),
            format!("{:.3e}", m.worst),
            format!("< {:.0e}", m.tolerance),
            m.passed(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub criterion: Criterion,
    pub checks: Vec<Check>,
    pub secs: f64,
    /// Set when the criterion could not be evaluated.
    pub error: Option<String>,
}

impl CriterionReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    /// `PASS 3 attacks: attack contracts (41.2 s)` plus one indented line per check.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{} {}: {} ({:.1} s)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.criterion,
            self.criterion.title(),
            self.secs
        );
        if let Some(e) = &self.error {
            out += &format!("    error: {e}\n");
        }
        for c in &self.checks {
            out += &format!(
                "    {} {}: {} (required {})\n",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.observed,
                c.required
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSummary {
    pub seed: u64,
    pub config_hash: String,
    pub criteria: Vec<CriterionReport>,
    /// Generalization cells measured along the way, if any.
    pub report: Option<EvalReport>,
}

impl AcceptanceSummary {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(CriterionReport::passed)
    }

    pub fn get(&self, c: Criterion) -> Option<&CriterionReport> {
        self.criteria.iter().find(|r| r.criterion == c)
    }
}

/// The cells of the benchmark used by the suite, held in memory.
#[derive(Debug, Clone)]
pub struct Bench {
    pub train: Dataset,
    /// Test split of every grid cell.
    pub test: BTreeMap<(Family, Quality), Dataset>,
}

/// Message for commands that need a dataset but find none.
pub fn missing_dataset(dir: &Path) -> Error {
    Error::Validation(format!(
        "no dataset found at {}; run `advblur synth --config <config>` first",
        dir.display()
    ))
}

/// Checks that `dir` holds a dataset generated from `cfg.synth` and returns
/// the manifest path.
pub fn dataset_manifest(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let manifest = cfg.data_dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(missing_dataset(&cfg.data_dir));
    }
    let spec_path = cfg.data_dir.join(SPEC_FILE);
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: spec_path.clone(),
        message: e.to_string(),
    })?;
    if spec != cfg.synth {
        return Err(Error::Validation(format!(
            "dataset at {} was generated from a different synth spec (seed {} vs {}); rerun `advblur synth` with this config",
            cfg.data_dir.display(),
            spec.seed,
            cfg.synth.seed
        )));
    }
    Ok(manifest)
}

/// Loads one (family, quality, split) cell from the dataset on disk.
pub fn load_cell(cfg: &ExperimentConfig, family: Family, quality: Quality, split: Split) -> Result<Dataset> {
    let manifest = dataset_manifest(cfg)?;
    let m = load_manifest(&manifest, &Filters::cell(family, quality, split))?;
    let (x, labels) = m.load_images(cfg.synth.channels)?;
    Dataset::new(x, labels)
}

impl Bench {
    pub fn load(cfg: &ExperimentConfig) -> Result<Bench> {
        let grid = &cfg.eval;
        let train = load_cell(cfg, grid.train_family, grid.train_quality, Split::Train)?;
        let mut test = BTreeMap::new();
        let mut cells = grid.cells();
        cells.push((grid.train_family, grid.train_quality));
        for (f, q) in cells {
            if let std::collections::btree_map::Entry::Vacant(e) = test.entry((f, q)) {
                e.insert(load_cell(cfg, f, q, Split::Test)?);
            }
        }
        Ok(Bench { train, test })
    }

    /// Test split of the training cell.
    pub fn home(&self, cfg: &ExperimentConfig) -> &Dataset {
        &self.test[&(cfg.eval.train_family, cfg.eval.train_quality)]
    }
}

fn fake_indices(labels: &[u8]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == 1).collect()
}

/// Applies `craft` to consecutive chunks of `batch` samples.
pub fn in_chunks<F>(x: &Tensor, labels: &[u8], batch: usize, mut craft: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, &[u8]) -> Result<Tensor>,
{
    let mut out = Vec::with_capacity(x.data().len());
    let b = batch.max(1);
    for start in (0..x.n()).step_by(b) {
        let idx: Vec<usize> = (start..(start + b).min(x.n())).collect();
        let ys: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        out.extend(craft(&x.select(&idx), &ys)?.into_vec());
    }
    Tensor::from_vec(x.shape(), out)
}

fn clean_accuracy(det: &Detector, data: &Dataset) -> Result<f64> {
    accuracy(&det.fake_probs(&data.x)?, &data.labels, DEFAULT_THRESHOLD)
}

fn adv_accuracy(det: &Detector, adv: &Tensor, labels: &[u8]) -> Result<f64> {
    accuracy(&det.fake_probs(adv)?, labels, DEFAULT_THRESHOLD)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Fraction of positions where `after[i] > before[i]` (strict) or `>=`.
fn fraction(before: &[f64], after: &[f64], idx: &[usize], strict: bool) -> f64 {
    let hits = idx
        .iter()
        .filter(|&&i| if strict { after[i] > before[i] } else { after[i] >= before[i] })
        .count();
    hits as f64 / idx.len().max(1) as f64
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn within_linf(adv: &Tensor, reference: &Tensor, eps: f64) -> bool {
    adv.data()
        .iter()
        .zip(reference.data())
        .all(|(&a, &r)| a >= r - eps && a <= r + eps && (0.0..=1.0).contains(&a))
}

/// Runs the acceptance criteria, training detectors on demand and caching
/// them by (regime, seed).
pub struct Harness<'a> {
    cfg: &'a ExperimentConfig,
    work: PathBuf,
    bench: Option<Bench>,
    models: BTreeMap<(Regime, u64), TrainState>,
    progress: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> Harness<'a> {
    /// `work` receives the scratch pipelines of the determinism check.
    pub fn new(cfg: &'a ExperimentConfig, work: &Path) -> Self {
        Harness {
            cfg,
            work: work.to_path_buf(),
            bench: None,
            models: BTreeMap::new(),
            progress: Box::new(|_| {}),
        }
    }

    pub fn with_progress(mut self, f: impl FnMut(&str) + 'a) -> Self {
        self.progress = Box::new(f);
        self
    }

    /// Uses an already loaded benchmark instead of reading the dataset.
    pub fn with_bench(mut self, bench: Bench) -> Self {
        self.bench = Some(bench);
        self
    }

    fn bench(&mut self) -> Result<&Bench> {
        if self.bench.is_none() {
            (self.progress)(&format!("loading dataset from {}", self.cfg.data_dir.display()));
            self.bench = Some(Bench::load(self.cfg)?);
        }
        Ok(self.bench.as_ref().expect("loaded"))
    }

    fn seeds(&self) -> Vec<u64> {
        self.cfg.eval.seeds(self.cfg.seed)
    }

    /// The detector of `regime` trained with `seed`, training it if needed.
    pub fn model(&mut self, regime: Regime, seed: u64) -> Result<&TrainState> {
        if !self.models.contains_key(&(regime, seed)) {
            let tc = self.cfg.train_config(regime, seed);
            self.bench()?;
            let data = &self.bench.as_ref().expect("loaded").train;
            let started = Instant::now();
            let (state, _) = train(&tc, data, None, &format!("{regime}-s{seed}"))?;
            (self.progress)(&format!("trained {regime} seed {seed} in {:.1} s", started.elapsed().as_secs_f64()));
            self.models.insert((regime, seed), state);
        }
        Ok(&self.models[&(regime, seed)])
    }

    fn detectors(&mut self, regime: Regime) -> Result<Vec<Detector>> {
        let mut out = Vec::new();
        for s in self.seeds() {
            out.push(self.model(regime, s)?.detector.clone());
        }
        Ok(out)
    }

    /// Runs the selected criteria in order.
    pub fn run(&mut self, selection: &[Criterion]) -> AcceptanceSummary {
        let mut criteria = Vec::new();
        let mut report = None;
        for &c in selection {
            let started = Instant::now();
            (self.progress)(&format!("criterion {c}: {}", c.title()));
            let result = match c {
                Criterion::BlurOperator => blur_operator_checks(self.cfg.seed).map(|ms| ms.iter().map(Check::measurement).collect()),
                Criterion::GradChecks => gradient_checks(self.cfg.seed).map(|ms| ms.iter().map(Check::measurement).collect()),
                Criterion::AttackContracts => self.attack_contracts(),
                Criterion::KernelOrder => self.kernel_order(),
                Criterion::Generalization | Criterion::Augmentation => match self.generalization_report() {
                    Ok(r) => {
                        let checks = if c == Criterion::Generalization {
                            self.generalization_checks(&r)
                        } else {
                            self.augmentation_checks(&r)
                        };
                        report = Some(r);
                        checks
                    }
                    Err(e) => Err(e),
                },
                Criterion::Transfer => self.transfer(),
                Criterion::Determinism => self.determinism(),
                Criterion::AttackProperties => self.attack_properties(),
            };
            let secs = started.elapsed().as_secs_f64();
            let (checks, error) = match result {
                Ok(mut checks) => {
                    if let Some(budget) = c.time_budget_secs() {
                        checks.push(Check::new("runtime", format!("{secs:.1} s"), format!("< {budget} s"), secs < budget));
                    }
                    (checks, None)
                }
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            let r = CriterionReport {
                criterion: c,
                checks,
                secs,
                error,
            };
            (self.progress)(r.render().trim_end());
            criteria.push(r);
        }
        AcceptanceSummary {
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            criteria,
            report,
        }
    }

    fn attack_contracts(&mut self) -> Result<Vec<Check>> {
        let a = self.cfg.attack.clone();
        let dets = self.detectors(self.cfg.acceptance.contract_regime)?;
        let cfg = self.cfg;
        let home = self.bench()?.home(cfg).clone();
        let (x, y) = (&home.x, &home.labels[..]);
        let fakes = fake_indices(y);
        let eps = a.fgsm.epsilon;
        let (mut pgd_same, mut identity, mut budget_ok) = (0, 0, 0);
        let (mut blur_frac, mut fgsm_frac, mut blur_frac_init) = (Vec::new(), Vec::new(), Vec::new());
        for det in &dets {
            let clean = det.losses(x, y)?;
            let (f, _) = fgsm_images(det, x, y, eps)?;
            let (p, _) = pgd_images(det, x, y, &PerturbationBudget::pgd(eps, 1, eps))?;
            pgd_same += usize::from(f == p);

            let init = a.blur_settings.initial_rho(x.n(), x.h(), x.w());
            let plain = blur_batch(x, &init, &a.blur_settings.spec)?;
            let zero_blur = blur_attack_images(det, x, y, &PerturbationBudget::blur(0.0, a.blur.steps), &a.blur_settings)?;
            let zero_combined = combined_attack_images(
                det,
                x,
                y,
                &SigmaSource::Gradient {
                    budget: PerturbationBudget::blur(0.0, a.blur.steps),
                    settings: a.blur_settings,
                },
                0.0,
            )?;
            let zero_spatial = PerturbationBudget { epsilon: 0.0, ..a.spatial };
            let ok = fgsm_images(det, x, y, 0.0)?.0 == *x
                && pgd_images(det, x, y, &PerturbationBudget { epsilon: 0.0, ..a.pgd })?.0 == *x
                && spatial_attack_images(det, x, y, &zero_spatial)?.0 == *x
                && zero_blur.1 == init
                && zero_blur.0 == plain
                && zero_combined.0 == plain;
            identity += usize::from(ok);

            let (pg, _) = pgd_images(det, x, y, &a.pgd)?;
            let (sp, flows) = spatial_attack_images(det, x, y, &a.spatial)?;
            let (bl, rho, init_losses) = blur_attack_images(det, x, y, &a.blur, &a.blur_settings)?;
            let (x2, x1, rho2) = combined_attack_images(
                det,
                x,
                y,
                &SigmaSource::Gradient {
                    budget: a.blur,
                    settings: a.blur_settings,
                },
                eps,
            )?;
            let bounds = a.blur_settings.bounds;
            let rho_ok = |r: &Tensor| r.data().iter().all(|&v| v >= bounds.min && v <= bounds.max);
            let ok = within_linf(&f, x, eps)
                && within_linf(&pg, x, a.pgd.epsilon)
                && flows.iter().all(|fl| fl.max_norm() <= a.spatial.epsilon)
                && sp.is_finite()
                && rho_ok(&rho)
                && rho_ok(&rho2)
                && within_linf(&x2, &x1, eps);
            budget_ok += usize::from(ok);

            let after_blur = det.losses(&bl, y)?;
            let after_fgsm = det.losses(&f, y)?;
            blur_frac.push(fraction(&clean, &after_blur, &fakes, true));
            blur_frac_init.push(fraction(&init_losses, &after_blur, &fakes, true));
            fgsm_frac.push(fraction(&clean, &after_fgsm, &fakes, true));
        }
        let n = dets.len();
        let (mb, mf) = (median(&blur_frac), median(&fgsm_frac));
        Ok(vec![
            Check::new("pgd(1 step, step = eps) equals fgsm bitwise", format!("{pgd_same}/{n} detectors"), "all", pgd_same == n),
            Check::new(
                "eps = 0 is the identity (fgsm, pgd, spatial; blur and combined keep sigma_init)",
                format!("{identity}/{n} detectors"),
                "all",
                identity == n,
            ),
            Check::new(
                "budget compliance (l_inf for fgsm/pgd/combined, flow norm, rho bounds)",
                format!("{budget_ok}/{n} detectors"),
                "all",
                budget_ok == n,
            ),
            Check::new(
                format!(
                    "fakes whose loss rises under one blur step (k={}, eps={}, sigma_init={}), median over seeds; vs initial blur {}",
                    a.blur_settings.spec.k,
                    a.blur.epsilon,
                    a.blur_settings.sigma_init,
                    fmt_list(&blur_frac_init)
                ),
                format!("{mb:.4} {}", fmt_list(&blur_frac)),
                format!(">= {LOSS_INCREASE_FRACTION}"),
                mb >= LOSS_INCREASE_FRACTION,
            ),
            Check::new(
                format!("fakes whose loss rises under one fgsm step (eps={eps:.5}), median over seeds"),
                format!("{mf:.4} {}", fmt_list(&fgsm_frac)),
                format!(">= {LOSS_INCREASE_FRACTION}"),
                mf >= LOSS_INCREASE_FRACTION,
            ),
        ])
    }

    fn attack_properties(&mut self) -> Result<Vec<Check>> {
        let a = self.cfg.attack.clone();
        let batch = a.batch;
        if self.seeds().len() < 2 {
            return Err(Error::Config("the attack-property checks need eval.replicates >= 2".into()));
        }
        let dets = self.detectors(self.cfg.acceptance.contract_regime)?;
        let cfg = self.cfg;
        let home = self.bench()?.home(cfg).clone();
        let (x, y) = (&home.x, &home.labels[..]);
        let all: Vec<usize> = (0..y.len()).collect();
        let eps = a.fgsm.epsilon;
        let (mut pgd_frac, mut comb_frac, mut spatial_drop) = (Vec::new(), Vec::new(), Vec::new());
        let (mut fgsm_monotone, mut blur_monotone) = (0, 0);
        let mut curves = Vec::new();
        for det in &dets {
            let (f, _) = fgsm_images(det, x, y, eps)?;
            let (p, _) = pgd_images(det, x, y, &a.pgd)?;
            pgd_frac.push(fraction(&det.losses(&f, y)?, &det.losses(&p, y)?, &all, false));
            let (x2, x1, _) = combined_attack_images(
                det,
                x,
                y,
                &SigmaSource::Gradient {
                    budget: a.blur,
                    settings: a.blur_settings,
                },
                eps,
            )?;
            comb_frac.push(fraction(&det.losses(&x1, y)?, &det.losses(&x2, y)?, &all, false));
            let (sp, _) = spatial_attack_images(det, x, y, &a.spatial)?;
            spatial_drop.push(clean_accuracy(det, &home)? - adv_accuracy(det, &sp, y)?);

            let mut fgsm_curve = Vec::new();
            let mut blur_curve = Vec::new();
            for scale in [0.0, 0.5, 1.0] {
                fgsm_curve.push(mean(&det.losses(&fgsm_images(det, x, y, scale * eps)?.0, y)?));
                let b = PerturbationBudget::blur(scale * a.blur.epsilon, a.blur.steps);
                blur_curve.push(mean(&det.losses(&blur_attack_images(det, x, y, &b, &a.blur_settings)?.0, y)?));
            }
            fgsm_monotone += usize::from(fgsm_curve.windows(2).all(|w| w[1] >= w[0]));
            blur_monotone += usize::from(blur_curve.windows(2).all(|w| w[1] >= w[0]));
            curves.push(format!("fgsm {} blur {}", fmt_list(&fgsm_curve), fmt_list(&blur_curve)));
        }
        let refs: Vec<&Detector> = dets.iter().collect();
        let zero = transfer_matrix(&refs, "fgsm", 0.0, x, y, batch, |c, xs, ys| Ok(fgsm_images(c, xs, ys, 0.0)?.0))?;
        let clean: Vec<f64> = dets.iter().map(|d| clean_accuracy(d, &home)).collect::<Result<_>>()?;
        let broadcast = zero.accuracy.iter().all(|row| *row == clean);
        let n = dets.len();
        let (mp, mc, ms) = (median(&pgd_frac), median(&comb_frac), median(&spatial_drop));
        Ok(vec![
            Check::new(
                format!("samples where pgd ({} steps) loss >= one-step loss, median", a.pgd.steps),
                format!("{mp:.4} {}", fmt_list(&pgd_frac)),
                format!(">= {FOLLOW_UP_FRACTION}"),
                mp >= FOLLOW_UP_FRACTION,
            ),
            Check::new(
                "samples where combined loss(x_adv2) >= loss(x_adv1), median",
                format!("{mc:.4} {}", fmt_list(&comb_frac)),
                format!(">= {FOLLOW_UP_FRACTION}"),
                mc >= FOLLOW_UP_FRACTION,
            ),
            Check::new(
                "spatial attack accuracy drop, median",
                format!("{ms:.4} {}", fmt_list(&spatial_drop)),
                "> 0",
                ms > 0.0,
            ),
            Check::new(
                "mean adversarial loss non-decreasing over eps in {0, eps/2, eps}",
                format!("fgsm {fgsm_monotone}/{n}, blur {blur_monotone}/{n}; {}", curves.join("; ")),
                "all detectors",
                fgsm_monotone == n && blur_monotone == n,
            ),
            Check::new(
                "transfer matrix at eps = 0 equals clean accuracy broadcast across rows",
                format!("clean {}", fmt_list(&clean)),
                "exact",
                broadcast,
            ),
        ])
    }

    fn victim_settings(&self, k: usize) -> Result<BlurSettings> {
        Ok(BlurSettings {
            spec: BlurSpec::with_k(k)?,
            sigma_init: self.cfg.acceptance.victim_sigma_init,
            ..self.cfg.attack.blur_settings
        })
    }

    fn kernel_order(&mut self) -> Result<Vec<Check>> {
        let ks = self.cfg.attack.k_sweep.clone();
        let budget = self.cfg.acceptance.victim_blur;
        let batch = self.cfg.attack.batch;
        let dets = self.detectors(self.cfg.acceptance.victim_regime)?;
        let cfg = self.cfg;
        let home = self.bench()?.home(cfg).clone();
        let mut per_k = Vec::new();
        let mut medians = Vec::new();
        for &k in &ks {
            let settings = self.victim_settings(k)?;
            let mut accs = Vec::new();
            for det in &dets {
                let adv = in_chunks(&home.x, &home.labels, batch, |xs, ys| Ok(blur_attack_images(det, xs, ys, &budget, &settings)?.0))?;
                accs.push(adv_accuracy(det, &adv, &home.labels)?);
            }
            medians.push(median(&accs));
            per_k.push(format!("k={k}: {}", fmt_list(&accs)));
        }
        let ordered = medians.windows(2).all(|w| w[1] <= w[0]);
        Ok(vec![Check::new(
            format!(
                "white-box blur accuracy of {} detectors over k = {ks:?} (eps={}, steps={}, sigma_init={}), median over seeds; {}",
                self.cfg.acceptance.victim_regime,
                budget.epsilon,
                budget.steps,
                self.cfg.acceptance.victim_sigma_init,
                per_k.join("; ")
            ),
            fmt_list(&medians),
            "non-increasing",
            ordered,
        )])
    }

    /// AUC of every requested regime and seed on every grid cell.
    pub fn generalization_report(&mut self) -> Result<EvalReport> {
        let grid = self.cfg.eval.clone();
        let seeds = self.seeds();
        let mut report = EvalReport::new(ReportMeta {
            seeds: seeds.clone(),
            config_hash: self.cfg.hash(),
            created_unix: None,
        });
        for &regime in &grid.regimes {
            for &s in &seeds {
                let det = self.model(regime, s)?.detector.clone();
                let bench = self.bench()?;
                for (f, q) in grid.cells() {
                    let data = &bench.test[&(f, q)];
                    report.push_cell(
                        CellKey {
                            train: format!("{regime}-s{s}"),
                            family: f.to_string(),
                            quality: q.to_string(),
                        },
                        evaluate(&det, &data.x, &data.labels, grid.batch),
                    );
                }
            }
        }
        Ok(report)
    }

    /// Per-seed mean AUC over `cells` for `regime`, read from the report.
    fn mean_auc(&self, report: &EvalReport, regime: Regime, cells: &[(Family, Quality)]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in self.seeds() {
            let mut v = Vec::new();
            for (f, q) in cells {
                let key = CellKey {
                    train: format!("{regime}-s{s}"),
                    family: f.to_string(),
                    quality: q.to_string(),
                };
                let cell = report
                    .cells
                    .iter()
                    .find(|c| c.key == key)
                    .ok_or_else(|| Error::Validation(format!("regime {regime} is not in the eval grid")))?;
                match &cell.result {
                    crate::eval::CellResult::Ok { auc, .. } => v.push(*auc),
                    crate::eval::CellResult::Skipped { reason } => {
                        return Err(Error::Validation(format!("cell {key:?} skipped: {reason}")))
                    }
                }
            }
            out.push(mean(&v));
        }
        Ok(out)
    }

    fn generalization_checks(&self, report: &EvalReport) -> Result<Vec<Check>> {
        let g = &self.cfg.eval;
        let mut unseen = g.unseen_family_cells();
        unseen.extend(g.unseen_quality_cells());
        let normal = self.mean_auc(report, Regime::Normal, &unseen)?;
        let twogen = self.mean_auc(report, Regime::BatTwogen, &unseen)?;
        let combined = self.mean_auc(report, Regime::Combined, &unseen)?;
        let (mn, mt, mc) = (median(&normal), median(&twogen), median(&combined));
        Ok(vec![
            Check::new(
                format!(
                    "two-gen BAT mean unseen AUC vs normal (normal {} twogen {})",
                    fmt_list(&normal),
                    fmt_list(&twogen)
                ),
                format!("{mt:.4} vs {mn:.4} (gain {:+.4})", mt - mn),
                format!("gain >= {GENERALIZATION_MARGIN}"),
                mt >= mn + GENERALIZATION_MARGIN,
            ),
            Check::new(
                format!("combined AT mean unseen AUC vs two-gen BAT (combined {})", fmt_list(&combined)),
                format!("{mc:.4} vs {mt:.4} ({:+.4})", mc - mt),
                format!(">= twogen - {COMBINED_SLACK}"),
                mc >= mt - COMBINED_SLACK,
            ),
        ])
    }

    fn augmentation_checks(&self, report: &EvalReport) -> Result<Vec<Check>> {
        let g = &self.cfg.eval;
        let (fam, qual) = (g.unseen_family_cells(), g.unseen_quality_cells());
        let normal_q = median(&self.mean_auc(report, Regime::Normal, &qual)?);
        let normal_f = median(&self.mean_auc(report, Regime::Normal, &fam)?);
        let twogen_f = median(&self.mean_auc(report, Regime::BatTwogen, &fam)?);
        let mut checks = Vec::new();
        for regime in [Regime::AugNoise, Regime::AugBlur, Regime::AugJpeg, Regime::AugCombined] {
            let q = median(&self.mean_auc(report, regime, &qual)?);
            let f = median(&self.mean_auc(report, regime, &fam)?);
            checks.push(Check::new(
                format!("{regime}: unseen-quality AUC above normal"),
                format!("{q:.4} vs {normal_q:.4} ({:+.4})", q - normal_q),
                "> normal",
                q > normal_q,
            ));
            checks.push(Check::new(
                format!("{regime}: unseen-family gain below two-gen BAT's"),
                format!("{:+.4} vs {:+.4}", f - normal_f, twogen_f - normal_f),
                "< twogen gain",
                f - normal_f < twogen_f - normal_f,
            ));
        }
        Ok(checks)
    }

    fn transfer(&mut self) -> Result<Vec<Check>> {
        let seeds = self.seeds();
        if seeds.len() < 2 {
            return Err(Error::Config("the transfer check needs eval.replicates >= 2".into()));
        }
        let regime = self.cfg.acceptance.victim_regime;
        let budget = self.cfg.acceptance.victim_blur;
        let batch = self.cfg.attack.batch;
        let settings = self.victim_settings(self.cfg.attack.blur_settings.spec.k)?;
        let dets = vec![self.model(regime, seeds[0])?.detector.clone(), self.model(regime, seeds[1])?.detector.clone()];
        let cfg = self.cfg;
        let home = self.bench()?.home(cfg).clone();
        let refs: Vec<&Detector> = dets.iter().collect();
        let blur = transfer_matrix(&refs, "blur", budget.epsilon, &home.x, &home.labels, batch, |c, xs, ys| {
            Ok(blur_attack_images(c, xs, ys, &budget, &settings)?.0)
        })?;
        // matched budget: the mean absolute pixel change of the white-box blur examples
        let mut changes = Vec::new();
        let mut clean = Vec::new();
        for det in &dets {
            let adv = in_chunks(&home.x, &home.labels, batch, |xs, ys| Ok(blur_attack_images(det, xs, ys, &budget, &settings)?.0))?;
            let d: Vec<f64> = adv.data().iter().zip(home.x.data()).map(|(a, b)| (a - b).abs()).collect();
            changes.push(mean(&d));
            clean.push(clean_accuracy(det, &home)?);
        }
        let matched = mean(&changes);
        let fgsm = transfer_matrix(&refs, "fgsm", matched, &home.x, &home.labels, batch, |c, xs, ys| Ok(fgsm_images(c, xs, ys, matched)?.0))?;
        let (bd, fd) = (blur.diagonal(), fgsm.diagonal());
        let below_clean = bd.iter().zip(&clean).all(|(b, c)| b <= c);
        Ok(vec![
            Check::new(
                format!(
                    "blur transfer matrix of two {regime} detectors (k={}, eps={}, steps={}, sigma_init={}): white-box entries strictly below transfer entries",
                    settings.spec.k, budget.epsilon, budget.steps, settings.sigma_init
                ),
                format!("{:?}", blur.accuracy),
                "max diagonal < min off-diagonal",
                blur.diagonal_below_off_diagonal(),
            ),
            Check::new(
                format!(
                    "blur diagonal <= fgsm diagonal at matched budget (fgsm eps = mean |blur change| = {matched:.5} = {:.2}/255; fgsm matrix {:?})",
                    matched * 255.0,
                    fgsm.accuracy
                ),
                format!("blur {} fgsm {}", fmt_list(&bd), fmt_list(&fd)),
                "blur <= fgsm per detector",
                bd.iter().zip(&fd).all(|(b, f)| b <= f),
            ),
            Check::new(
                "blur diagonal <= clean accuracy",
                format!("blur {} clean {}", fmt_list(&bd), fmt_list(&clean)),
                "per detector",
                below_clean,
            ),
        ])
    }

    fn determinism(&mut self) -> Result<Vec<Check>> {
        let a = self.work.join("determinism-a");
        let b = self.work.join("determinism-b");
        for dir in [&a, &b] {
            if dir.exists() {
                std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            crate::commands::small_pipeline(self.cfg, dir, self.cfg.acceptance.determinism_epochs)?;
        }
        let (fa, fb) = (crate::commands::tree_digest(&a)?, crate::commands::tree_digest(&b)?);
        let kinds = |d: &[(String, String)], suffix: &str| d.iter().filter(|(p, _)| p.ends_with(suffix)).count();
        let differing: Vec<&str> = fa
            .iter()
            .zip(&fb)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.as_str())
            .collect();
        let same = fa == fb;
        Ok(vec![Check::new(
            format!(
                "two runs of synth + train + eval + attack with one config and seed ({} files: {} checkpoints, {} manifests, {} reports, {} images)",
                fa.len(),
                kinds(&fa, ".ckpt.json"),
                kinds(&fa, ".jsonl") - kinds(&fa, "train_log.jsonl"),
                kinds(&fa, "report.json"),
                kinds(&fa, ".png")
            ),
            if same {
                "identical".to_string()
            } else {
                format!("differ: {:?}", &differing[..differing.len().min(5)])
            },
            "bitwise identical",
            same && !fa.is_empty(),
        )])
    }
}
