//! Experiment configuration: one TOML file holding the synthetic data spec,
//! the training setup, attack budgets, the evaluation grid and the
//! acceptance-suite settings.
//!
//! A file only needs the keys it changes; everything else keeps the values
//! of [`ExperimentConfig::default`]. Unknown keys anywhere are errors. The
//! top-level `seed` drives data synthesis and training; `synth.seed` and
//! `train.seed` may only repeat it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackFamily, BlurSettings, PerturbationBudget};
use crate::blur::BlurSpec;
use crate::data::{Family, Quality, SplitCounts, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::config_hash;
use crate::generator::GeneratorArch;
use crate::optim::OptimConfig;
use crate::train::{Regime, TrainConfig};

/// Budgets and blur settings used by the `attack`, `eval` and `reproduce`
/// commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Images per attack batch.
    pub batch: usize,
    pub fgsm: PerturbationBudget,
    pub pgd: PerturbationBudget,
    pub spatial: PerturbationBudget,
    pub blur: PerturbationBudget,
    pub blur_settings: BlurSettings,
    /// Kernel sizes of the blur sweep.
    pub k_sweep: Vec<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let eps = crate::attacks::defaults::FGSM_EPSILON;
        AttackConfig {
            batch: 64,
            fgsm: PerturbationBudget::fgsm(eps),
            pgd: PerturbationBudget::pgd(eps, 3, eps / 2.0),
            spatial: crate::attacks::defaults::spatial(),
            blur: crate::attacks::defaults::blur(),
            blur_settings: BlurSettings::default(),
            k_sweep: vec![3, 5, 9],
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("attack.batch must be positive".into()));
        }
        for (name, b, family) in [
            ("fgsm", &self.fgsm, AttackFamily::Additive),
            ("pgd", &self.pgd, AttackFamily::Additive),
            ("spatial", &self.spatial, AttackFamily::Spatial),
            ("blur", &self.blur, AttackFamily::Blur),
        ] {
            b.validate()?;
            if b.family != family {
                return Err(Error::Config(format!("attack.{name} must be a {family:?} budget")));
            }
        }
        if self.fgsm.steps != 1 {
            return Err(Error::Config("attack.fgsm takes exactly one step".into()));
        }
        self.blur_settings.validate()?;
        if self.k_sweep.is_empty() {
            return Err(Error::Config("attack.k_sweep is empty".into()));
        }
        for &k in &self.k_sweep {
            BlurSpec::with_k(k)?;
        }
        Ok(())
    }
}

/// The generalization grid: detectors train on one (family, quality) cell
/// and are tested on every listed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    pub train_family: Family,
    pub train_quality: Quality,
    pub families: Vec<Family>,
    pub qualities: Vec<Quality>,
    pub regimes: Vec<Regime>,
    /// Independent training runs per regime; seeds are `seed, seed + 1, ...`.
    pub replicates: usize,
    pub batch: usize,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            train_family: Family::Checker,
            train_quality: Quality::QMid,
            families: Family::ARTIFACTS.to_vec(),
            qualities: Quality::ALL.to_vec(),
            regimes: vec![
                Regime::Normal,
                Regime::BatTwogen,
                Regime::Combined,
                Regime::AugNoise,
                Regime::AugBlur,
                Regime::AugJpeg,
                Regime::AugCombined,
            ],
            replicates: 3,
            batch: 64,
        }
    }
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        if self.train_family == Family::None || self.families.contains(&Family::None) {
            return Err(Error::Config("eval cells are keyed by artifact families, not `none`".into()));
        }
        if self.families.is_empty() || self.qualities.is_empty() || self.regimes.is_empty() {
            return Err(Error::Config("eval grid needs at least one family, quality and regime".into()));
        }
        if self.replicates == 0 || self.batch == 0 {
            return Err(Error::Config("eval.replicates and eval.batch must be positive".into()));
        }
        Ok(())
    }

    /// Every requested (family, quality) cell in grid order.
    pub fn cells(&self) -> Vec<(Family, Quality)> {
        self.families
            .iter()
            .flat_map(|&f| self.qualities.iter().map(move |&q| (f, q)))
            .collect()
    }

    /// Cells with an unseen family at the training quality.
    pub fn unseen_family_cells(&self) -> Vec<(Family, Quality)> {
        self.cells()
            .into_iter()
            .filter(|&(f, q)| f != self.train_family && q == self.train_quality)
            .collect()
    }

    /// Cells with the training family at an unseen quality.
    pub fn unseen_quality_cells(&self) -> Vec<(Family, Quality)> {
        self.cells()
            .into_iter()
            .filter(|&(f, q)| f == self.train_family && q != self.train_quality)
            .collect()
    }

    pub fn seeds(&self, base: u64) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| base.wrapping_add(r)).collect()
    }
}

/// Victims and budgets of the acceptance suite's attack criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceConfig {
    /// Regime of the detectors whose attack contracts are measured.
    pub contract_regime: Regime,
    /// Regime of the detectors used for the kernel-size and transfer checks.
    pub victim_regime: Regime,
    /// Blur budget against those victims.
    pub victim_blur: PerturbationBudget,
    pub victim_sigma_init: f64,
    /// Epochs of the small pipeline that is run twice for the determinism check.
    pub determinism_epochs: usize,
}

impl Default for AcceptanceConfig {
    fn default() -> Self {
        AcceptanceConfig {
            contract_regime: Regime::Normal,
            victim_regime: Regime::BatTwogen,
            victim_blur: PerturbationBudget::blur(1000.0, 10),
            victim_sigma_init: 2.0,
            determinism_epochs: 2,
        }
    }
}

impl AcceptanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.victim_blur.validate()?;
        if self.victim_blur.family != AttackFamily::Blur {
            return Err(Error::Config("acceptance.victim_blur must be a Blur budget".into()));
        }
        if !(self.victim_sigma_init > 0.0 && self.victim_sigma_init.is_finite()) {
            return Err(Error::Config("acceptance.victim_sigma_init must be positive".into()));
        }
        if self.determinism_epochs == 0 {
            return Err(Error::Config("acceptance.determinism_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Parent of the run directories.
    pub out: PathBuf,
    /// Where `synth` writes the dataset and the other commands read it.
    pub data_dir: PathBuf,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub eval: EvalGrid,
    pub acceptance: AcceptanceConfig,
}

impl Default for ExperimentConfig {
    /// Settings sized for a single CPU core: 32×32 images, 200 training
    /// bases, 20 epochs, small generators.
    fn default() -> Self {
        let synth = SynthSpec {
            size: 32,
            counts: SplitCounts {
                train: 200,
                val: 20,
                test: 100,
            },
            ..SynthSpec::default()
        };
        let mut train = TrainConfig {
            epochs: 20,
            batch_size: 16,
            optim: OptimConfig {
                lr: 5e-3,
                decay_every: 0,
                ..OptimConfig::default()
            },
            generator_optim: OptimConfig {
                lr: 5e-4,
                decay_every: 0,
                ..OptimConfig::generator()
            },
            generator: GeneratorArch {
                stem: 4,
                width: 8,
                res_blocks: 1,
                ..GeneratorArch::default()
            },
            ..TrainConfig::default()
        };
        train.budgets.additive = PerturbationBudget::fgsm(0.5 / 255.0);
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            data_dir: PathBuf::from("data"),
            synth,
            train,
            attack: AttackConfig::default(),
            eval: EvalGrid::default(),
            acceptance: AcceptanceConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses TOML text on top of the defaults and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let patch: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let top = patch.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
        for section in ["synth", "train"] {
            if patch.get(section).and_then(|s| s.get("seed")).is_some_and(|v| *v != top) {
                return Err(Error::Config(format!("{section}.seed is derived from the top-level seed; set `seed` instead")));
            }
        }
        let mut merged = toml::Value::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(patch));
        let mut cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A missing or malformed file is a
    /// config error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets the experiment seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        self.eval.validate()?;
        self.acceptance.validate()?;
        if self.synth.channels != self.train.detector.in_channels || self.synth.channels != self.train.generator.in_channels {
            return Err(Error::Config(format!(
                "synth.channels = {} but the models expect {} (detector) and {} (generator)",
                self.synth.channels, self.train.detector.in_channels, self.train.generator.in_channels
            )));
        }
        let min = self.attack.k_sweep.iter().chain([&self.train.blur.spec.k, &self.attack.blur_settings.spec.k]).max().copied().unwrap_or(1);
        if self.synth.size < min {
            return Err(Error::Config(format!("synth.size {} is smaller than blur kernel {min}", self.synth.size)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, leaving out `out` and
    /// `data_dir`: where files live does not change what is computed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.data_dir = PathBuf::new();
        config_hash(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Training config for one regime and seed.
    pub fn train_config(&self, regime: Regime, seed: u64) -> TrainConfig {
        TrainConfig {
            regime,
            seed,
            ..self.train.clone()
        }
    }
}
