//! Versioned, self-describing model checkpoints.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "advblur-checkpoint",
//!   "version": 1,
//!   "model": {"kind": "detector", "id": "...", "arch": {...}}
//!          | {"kind": "generator", "role": "real" | "fake" | "single", "arch": {...}},
//!   "params": [{"name": "0.conv.weight", "shape": [8, 3, 3, 3], "value": [...]}, ...],
//!   "optimizer": {"config": {...}, "state": {"step": 120, "m": [...], "v": [...]}} | null,
//!   "seed": 0,
//!   "epoch": 3,
//!   "step": 120
//! }
//! ```
//!
//! Floats are written with round-trip precision, so loading reproduces the
//! parameters bit for bit. `epoch` counts completed epochs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorArch};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorArch};
use crate::nn::Param;
use crate::optim::{OptimConfig, RAdam, RAdamState};

pub const CHECKPOINT_FORMAT: &str = "advblur-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorRole {
    Single,
    Real,
    Fake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Detector { id: String, arch: DetectorArch },
    Generator { role: GeneratorRole, arch: GeneratorArch },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSnapshot {
    pub config: OptimConfig,
    pub state: RAdamState,
}

impl OptimizerSnapshot {
    pub fn of(opt: &RAdam) -> Self {
        OptimizerSnapshot {
            config: opt.config.clone(),
            state: opt.state.clone(),
        }
    }

    pub fn restore(&self) -> RAdam {
        RAdam::with_state(self.config.clone(), self.state.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub params: Vec<Param>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub seed: u64,
    pub epoch: usize,
    pub step: u64,
}

impl Checkpoint {
    pub fn detector(det: &Detector, arch: &DetectorArch, opt: Option<&RAdam>, seed: u64, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: ModelSpec::Detector {
                id: det.id().to_string(),
                arch: arch.clone(),
            },
            params: det.params().to_vec(),
            optimizer: opt.map(OptimizerSnapshot::of),
            seed,
            epoch,
            step: opt.map_or(0, |o| o.state.step),
        }
    }

    pub fn generator(g: &Generator, role: GeneratorRole, opt: Option<&RAdam>, seed: u64, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: ModelSpec::Generator {
                role,
                arch: g.arch().clone(),
            },
            params: g.params().to_vec(),
            optimizer: opt.map(OptimizerSnapshot::of),
            seed,
            epoch,
            step: opt.map_or(0, |o| o.state.step),
        }
    }

    fn check_header(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        Ok(())
    }

    pub fn to_detector(&self) -> Result<(Detector, DetectorArch)> {
        self.check_header()?;
        match &self.model {
            ModelSpec::Detector { id, arch } => {
                let det = Detector::from_parts(id.clone(), &arch.layers()?, self.params.clone())?;
                Ok((det.with_input_norm(arch.input_mean, arch.input_std), arch.clone()))
            }
            ModelSpec::Generator { .. } => Err(Error::Validation("checkpoint holds a generator, not a detector".into())),
        }
    }

    pub fn to_generator(&self) -> Result<(Generator, GeneratorRole)> {
        self.check_header()?;
        match &self.model {
            ModelSpec::Generator { role, arch } => Ok((Generator::from_parts(arch, self.params.clone())?, *role)),
            ModelSpec::Detector { .. } => Err(Error::Validation("checkpoint holds a detector, not a generator".into())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        ck.check_header()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detector_round_trip_is_bitwise() {
        let arch = DetectorArch {
            widths: vec![4, 4],
            strides: vec![1, 2],
            ..DetectorArch::default()
        };
        let det = Detector::new("d0", &arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut opt = RAdam::new(OptimConfig::default(), det.params());
        opt.state.step = 7;
        opt.state.m[0][0] = 0.1 + 0.2;
        let ck = Checkpoint::detector(&det, &arch, Some(&opt), 5, 2);
        let back: Checkpoint = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let (d2, a2) = back.to_detector().unwrap();
        assert_eq!(d2.params(), det.params());
        assert_eq!(a2, arch);
        assert_eq!(back.optimizer.as_ref().unwrap().restore(), opt);
        assert!(back.to_generator().is_err());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let g = Generator::new(&GeneratorArch::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ck = Checkpoint::generator(&g, GeneratorRole::Fake, None, 0, 0);
        assert!(ck.to_generator().is_ok());
        ck.version = 99;
        assert!(ck.to_generator().is_err());
    }
}
