//! The work behind each CLI subcommand. Every command except `synth` writes
//! into a fresh run directory `{out}/{command}-s{seed}-{NNN}` holding the
//! effective `config.toml`, a `run.json` and the command's artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    blur_attack_images, combined_attack_images, fgsm_images, pgd_images, spatial_attack_images, BlurSettings,
    PerturbationBudget, SigmaSource,
};
use crate::blur::{BlurSpec, Image};
use crate::checkpoint::{Checkpoint, GeneratorRole, ModelSpec};
use crate::config::ExperimentConfig;
use crate::data::{
    load_manifest, synth_generate, write_image, write_manifest, Family, Filters, Label, Quality, SampleRecord, Split,
    SynthSpec, MANIFEST_FILE, SPEC_FILE,
};
use crate::detector::{Classifier, Detector};
use crate::error::{Error, Result};
use crate::eval::{accuracy, evaluate, transfer_matrix, CellKey, EvalReport, ReportMeta, DEFAULT_THRESHOLD};
use crate::generator::Generators;
use crate::harness::{dataset_manifest, in_chunks, load_cell, AcceptanceSummary, Criterion, Harness};
use crate::tensor::Tensor;
use crate::train::{train_with, Dataset, EpochLog, Regime, TrainState};

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const DETECTOR_CKPT: &str = "detector.ckpt.json";
pub const REPORT_FILE: &str = "report.json";
pub const ATTACK_REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Record wall-clock times and timestamps. Off makes every artifact a
    /// pure function of config and seed.
    pub timestamps: bool,
    /// Progress lines on stderr.
    pub progress: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            timestamps: true,
            progress: true,
        }
    }
}

impl RunOptions {
    pub fn quiet() -> Self {
        RunOptions {
            timestamps: false,
            progress: false,
        }
    }

    fn now(&self) -> Option<u64> {
        self.timestamps
            .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
    }

    fn say(&self, msg: &str) {
        if self.progress {
            eprintln!("{msg}");
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub regime: Option<Regime>,
    pub started_unix: Option<u64>,
    pub version: String,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Creates the first unused `{parent}/{command}-s{seed}-{NNN}`.
pub fn new_run_dir(parent: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    for i in 1..10_000 {
        let dir = parent.join(format!("{command}-s{seed}-{i:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    Err(Error::Validation(format!("no free run directory under {}", parent.display())))
}

fn start_run(cfg: &ExperimentConfig, command: &str, regime: Option<Regime>, opts: &RunOptions) -> Result<PathBuf> {
    let dir = new_run_dir(&cfg.out, command, cfg.seed)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let meta = RunMeta {
        command: command.into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        regime,
        started_unix: opts.now(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    write_text(&dir.join(RUN_FILE), &to_json(&meta)?)?;
    Ok(dir)
}

/// Writes the synthetic dataset to `out` (default `cfg.data_dir`).
///
/// Refuses to write into a non-empty directory unless it already holds a
/// dataset generated from the same spec, in which case the identical files
/// are rewritten.
pub fn cmd_synth(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(PathBuf, Vec<SampleRecord>)> {
    cfg.validate()?;
    let dir = out.unwrap_or(&cfg.data_dir).to_path_buf();
    let non_empty = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        let spec_path = dir.join(SPEC_FILE);
        if !spec_path.is_file() {
            return Err(Error::Validation(format!(
                "refusing to write a dataset into non-empty directory {}",
                dir.display()
            )));
        }
        let existing: SynthSpec = read_json(&spec_path)?;
        if existing != cfg.synth {
            return Err(Error::Validation(format!(
                "{} holds a dataset from a different spec (seed {}); choose another --out",
                dir.display(),
                existing.seed
            )));
        }
    }
    let records = synth_generate(&cfg.synth, &dir)?;
    Ok((dir, records))
}

fn generator_files(regime: Regime) -> Vec<(GeneratorRole, &'static str)> {
    match regime.generator_count() {
        0 => vec![],
        1 => vec![(GeneratorRole::Single, "generator.ckpt.json")],
        _ => vec![
            (GeneratorRole::Real, "generator_real.ckpt.json"),
            (GeneratorRole::Fake, "generator_fake.ckpt.json"),
        ],
    }
}

fn save_state(dir: &Path, state: &TrainState, cfg: &ExperimentConfig, regime: Regime) -> Result<()> {
    // generators first: a detector checkpoint implies matching generators
    if let Some(gens) = &state.generators {
        for ((role, file), (g, opt)) in generator_files(regime).into_iter().zip(gens.members().into_iter().zip(&state.gen_optims)) {
            Checkpoint::generator(g, role, Some(opt), cfg.seed, state.epoch).save(&dir.join(file))?;
        }
    }
    Checkpoint::detector(&state.detector, &cfg.train.detector, Some(&state.optim), cfg.seed, state.epoch).save(&dir.join(DETECTOR_CKPT))
}

fn load_state(dir: &Path, regime: Regime) -> Result<TrainState> {
    let ck = Checkpoint::load(&dir.join(DETECTOR_CKPT))?;
    let (detector, _) = ck.to_detector()?;
    let optim = ck
        .optimizer
        .as_ref()
        .ok_or_else(|| Error::Validation("detector checkpoint has no optimizer state".into()))?
        .restore();
    let mut members = Vec::new();
    let mut gen_optims = Vec::new();
    for (role, file) in generator_files(regime) {
        let g = Checkpoint::load(&dir.join(file))?;
        if g.epoch != ck.epoch {
            return Err(Error::Validation(format!("{file} is at epoch {} but the detector at {}", g.epoch, ck.epoch)));
        }
        let (gen, r) = g.to_generator()?;
        if r != role {
            return Err(Error::Validation(format!("{file} holds a {r:?} generator")));
        }
        members.push(gen);
        gen_optims.push(
            g.optimizer
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("{file} has no optimizer state")))?
                .restore(),
        );
    }
    let generators = match members.len() {
        0 => None,
        1 => Some(Generators::Single(members.remove(0))),
        _ => {
            let g_fake = members.pop().expect("two members");
            let g_real = members.pop().expect("two members");
            Some(Generators::Pair(crate::generator::GeneratorPair { g_real, g_fake }))
        }
    };
    Ok(TrainState {
        detector,
        optim,
        generators,
        gen_optims,
        epoch: ck.epoch,
    })
}

fn append_log(path: &Path, log: &EpochLog, opts: &RunOptions) -> Result<()> {
    let mut log = log.clone();
    if !opts.timestamps {
        log.wall_secs = 0.0;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(&log).map_err(|e| Error::Validation(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Drops log lines for epochs at or after `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let log: EpochLog = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if log.epoch < epoch {
            kept += line;
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

fn train_data(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let g = &cfg.eval;
    let data = load_cell(cfg, g.train_family, g.train_quality, Split::Train)?;
    let val = if cfg.synth.counts.val > 0 {
        Some(load_cell(cfg, g.train_family, g.train_quality, Split::Val)?)
    } else {
        None
    };
    Ok((data, val))
}

/// Trains a detector (and generators) on the training cell, checkpointing
/// after every epoch. With `resume`, continues the run in that directory
/// from its last checkpoint; `cfg` must match the run's config apart from
/// `train.epochs`.
pub fn cmd_train(cfg: &ExperimentConfig, regime: Option<Regime>, resume: Option<&Path>, opts: &RunOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let (dir, regime, mut state) = match resume {
        None => {
            let regime = regime.unwrap_or(cfg.train.regime);
            let tc = cfg.train_config(regime, cfg.seed);
            tc.validate()?;
            dataset_manifest(cfg)?;
            let state = TrainState::init(&tc, &format!("{regime}-s{}", cfg.seed))?;
            let dir = start_run(cfg, "train", Some(regime), opts)?;
            save_state(&dir, &state, cfg, regime)?;
            (dir, regime, state)
        }
        Some(dir) => {
            let meta: RunMeta = read_json(&dir.join(RUN_FILE))?;
            let run_regime = meta
                .regime
                .filter(|_| meta.command == "train")
                .ok_or_else(|| Error::Validation(format!("{} is not a training run", dir.display())))?;
            if regime.is_some_and(|r| r != run_regime) {
                return Err(Error::Validation(format!("run {} trains {run_regime}, not {}", dir.display(), regime.unwrap())));
            }
            let mut saved = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
            saved.train.epochs = cfg.train.epochs;
            if saved.hash() != cfg.hash() {
                return Err(Error::Validation(format!(
                    "config differs from the one run {} was started with (only train.epochs may change)",
                    dir.display()
                )));
            }
            (dir.to_path_buf(), run_regime, load_state(dir, run_regime)?)
        }
    };
    let tc = cfg.train_config(regime, cfg.seed);
    let (data, val) = train_data(cfg)?;
    let log_path = dir.join(LOG_FILE);
    truncate_log(&log_path, state.epoch)?;
    opts.say(&format!("training {regime} (seed {}) from epoch {} to {} in {}", cfg.seed, state.epoch, tc.epochs, dir.display()));
    train_with(&mut state, &tc, &data, val.as_ref(), |s, log| {
        save_state(&dir, s, cfg, regime)?;
        append_log(&log_path, log, opts)?;
        opts.say(&format!(
            "epoch {} clean loss {:.4} val auc {}",
            log.epoch,
            log.clean_loss,
            log.val_auc.map_or("-".into(), |a| format!("{a:.4}"))
        ));
        Ok(())
    })?;
    Ok(dir)
}

/// One row of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub attack: String,
    pub k: Option<usize>,
    pub epsilon: f64,
    pub steps: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Directory of the stored adversarial images, relative to the run.
    pub images: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub detector: String,
    pub checkpoint_sha256: String,
    pub family: Family,
    pub quality: Quality,
    pub n: usize,
    pub clean_accuracy: f64,
    pub entries: Vec<AttackEntry>,
    pub created_unix: Option<u64>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::eval::config_hash(&bytes))
}

fn load_detector(path: &Path) -> Result<(Detector, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    match &ck.model {
        ModelSpec::Detector { .. } => Ok((ck.to_detector()?.0, ck)),
        ModelSpec::Generator { .. } => Err(Error::Validation(format!("{} holds a generator, not a detector", path.display()))),
    }
}

/// Stores a batch as PNGs under `dir`, with a manifest mirroring `records`.
fn store_set(dir: &Path, x: &Tensor, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let name = Path::new(&r.path).file_name().and_then(|n| n.to_str()).unwrap_or("x.png");
        let sub = if r.label == Label::Real { "real" } else { r.family.name() };
        let rel = format!("{sub}/{name}");
        write_image(&dir.join(&rel), &Image::from_tensor(x, i))?;
        out.push(SampleRecord { path: rel, ..r.clone() });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &out)
}

type Craft<'a> = Box<dyn Fn(&Tensor, &[u8]) -> Result<Tensor> + 'a>;

/// Attacks one detector checkpoint on the test split of the training cell
/// with every configured attack, including the blur kernel-size sweep.
pub fn cmd_attack(cfg: &ExperimentConfig, checkpoint: &Path, opts: &RunOptions) -> Result<(PathBuf, AttackReport)> {
    cfg.validate()?;
    let (det, _) = load_detector(checkpoint)?;
    let (family, quality) = (cfg.eval.train_family, cfg.eval.train_quality);
    let manifest = dataset_manifest(cfg)?;
    let m = load_manifest(&manifest, &Filters::cell(family, quality, Split::Test))?;
    let (x, y) = m.load_images(cfg.synth.channels)?;
    let dir = start_run(cfg, "attack", None, opts)?;
    let a = &cfg.attack;
    let batch = a.batch;

    let mut plans: Vec<(String, Option<usize>, PerturbationBudget, Craft<'_>)> = vec![
        ("fgsm".into(), None, a.fgsm, Box::new(|xs: &Tensor, ys: &[u8]| Ok(fgsm_images(&det, xs, ys, a.fgsm.epsilon)?.0))),
        ("pgd".into(), None, a.pgd, Box::new(|xs: &Tensor, ys: &[u8]| Ok(pgd_images(&det, xs, ys, &a.pgd)?.0))),
        ("spatial".into(), None, a.spatial, Box::new(|xs: &Tensor, ys: &[u8]| Ok(spatial_attack_images(&det, xs, ys, &a.spatial)?.0))),
        (
            "combined".into(),
            Some(a.blur_settings.spec.k),
            a.fgsm,
            Box::new(|xs: &Tensor, ys: &[u8]| {
                let source = SigmaSource::Gradient {
                    budget: a.blur,
                    settings: a.blur_settings,
                };
                Ok(combined_attack_images(&det, xs, ys, &source, a.fgsm.epsilon)?.0)
            }),
        ),
    ];
    for &k in &a.k_sweep {
        let settings = BlurSettings {
            spec: BlurSpec { k, ..a.blur_settings.spec },
            ..a.blur_settings
        };
        let det = &det;
        plans.push((
            format!("blur_k{k}"),
            Some(k),
            a.blur,
            Box::new(move |xs: &Tensor, ys: &[u8]| Ok(blur_attack_images(det, xs, ys, &a.blur, &settings)?.0)),
        ));
    }

    let clean_accuracy = accuracy(&det.fake_probs(&x)?, &y, DEFAULT_THRESHOLD)?;
    let mut entries = Vec::new();
    for (name, k, budget, craft) in &plans {
        let adv = in_chunks(&x, &y, batch, |xs, ys| craft(xs, ys))?;
        let losses = det.losses(&adv, &y)?;
        let entry = AttackEntry {
            attack: name.clone(),
            k: *k,
            epsilon: budget.epsilon,
            steps: budget.steps,
            accuracy: accuracy(&det.fake_probs(&adv)?, &y, DEFAULT_THRESHOLD)?,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            images: format!("adv/{name}"),
        };
        store_set(&dir.join(&entry.images), &adv, &m.records)?;
        opts.say(&format!("{name}: accuracy {:.4} (clean {clean_accuracy:.4})", entry.accuracy));
        entries.push(entry);
    }
    let report = AttackReport {
        schema_version: ATTACK_REPORT_SCHEMA,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        detector: det.model_id().to_string(),
        checkpoint_sha256: sha256_file(checkpoint)?,
        family,
        quality,
        n: y.len(),
        clean_accuracy,
        entries,
        created_unix: opts.now(),
    };
    write_text(&dir.join("attack_report.json"), &to_json(&report)?)?;
    Ok((dir, report))
}

/// Evaluates detector checkpoints on every grid cell; with two or more,
/// adds FGSM and blur transfer matrices on the training cell's test split.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoints: &[PathBuf], opts: &RunOptions) -> Result<(PathBuf, EvalReport)> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::Validation("eval needs at least one --checkpoint".into()));
    }
    let mut dets = Vec::new();
    let mut seeds = Vec::new();
    for p in checkpoints {
        let (d, ck) = load_detector(p)?;
        if dets.iter().any(|e: &Detector| e.model_id() == d.model_id()) {
            return Err(Error::Validation(format!("two checkpoints share the detector id {}", d.model_id())));
        }
        seeds.push(ck.seed);
        dets.push(d);
    }
    dataset_manifest(cfg)?;
    let dir = start_run(cfg, "eval", None, opts)?;
    let mut report = EvalReport::new(ReportMeta {
        seeds,
        config_hash: cfg.hash(),
        created_unix: opts.now(),
    });
    report.extra.insert("seed".into(), serde_json::json!(cfg.seed));
    let cells: Vec<(Family, Quality, Result<Dataset>)> = cfg
        .eval
        .cells()
        .into_iter()
        .map(|(f, q)| (f, q, load_cell(cfg, f, q, Split::Test)))
        .collect();
    for det in &dets {
        for (f, q, data) in &cells {
            let metrics = match data {
                Ok(d) => evaluate(det, &d.x, &d.labels, cfg.eval.batch),
                Err(e) => Err(Error::Validation(e.to_string())),
            };
            report.push_cell(
                CellKey {
                    train: det.model_id().to_string(),
                    family: f.to_string(),
                    quality: q.to_string(),
                },
                metrics,
            );
        }
    }
    if dets.len() >= 2 {
        let home = load_cell(cfg, cfg.eval.train_family, cfg.eval.train_quality, Split::Test)?;
        let refs: Vec<&Detector> = dets.iter().collect();
        let a = &cfg.attack;
        report.transfer.push(transfer_matrix(&refs, "fgsm", a.fgsm.epsilon, &home.x, &home.labels, a.batch, |c, xs, ys| {
            Ok(fgsm_images(c, xs, ys, a.fgsm.epsilon)?.0)
        })?);
        report.transfer.push(transfer_matrix(&refs, "blur", a.blur.epsilon, &home.x, &home.labels, a.batch, |c, xs, ys| {
            Ok(blur_attack_images(c, xs, ys, &a.blur, &a.blur_settings)?.0)
        })?);
    }
    write_text(&dir.join(REPORT_FILE), &report.to_json()?)?;
    write_text(&dir.join("report.txt"), &report.to_table())?;
    opts.say(&report.to_table());
    Ok((dir, report))
}

fn run_suite(cfg: &ExperimentConfig, selection: &[Criterion], command: &str, opts: &RunOptions) -> Result<(PathBuf, AcceptanceSummary)> {
    cfg.validate()?;
    if selection.iter().any(|c| c.needs_data()) {
        dataset_manifest(cfg)?;
    }
    let dir = start_run(cfg, command, None, opts)?;
    let mut harness = Harness::new(cfg, &dir.join("work"));
    if opts.progress {
        harness = harness.with_progress(|m| eprintln!("{m}"));
    }
    let summary = harness.run(selection);
    write_text(&dir.join("acceptance.json"), &to_json(&summary)?)?;
    if let Some(r) = &summary.report {
        write_text(&dir.join(REPORT_FILE), &r.to_json()?)?;
    }
    let text: String = summary.criteria.iter().map(|c| c.render()).collect();
    write_text(&dir.join("acceptance.txt"), &text)?;
    Ok((dir, summary))
}

/// Blur-operator and gradient checks.
pub fn cmd_grad_check(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(PathBuf, AcceptanceSummary)> {
    run_suite(cfg, &[Criterion::BlurOperator, Criterion::GradChecks], "grad-check", opts)
}

/// The acceptance suite, or the `only` subset of it.
pub fn cmd_reproduce(cfg: &ExperimentConfig, only: Option<&[Criterion]>, opts: &RunOptions) -> Result<(PathBuf, AcceptanceSummary)> {
    run_suite(cfg, only.unwrap_or(&Criterion::ALL), "reproduce", opts)
}

/// synth → train (two-generator BAT and combined AT) → eval → attack on a
/// tiny version of `cfg`, under `dir`, without timestamps.
pub fn small_pipeline(cfg: &ExperimentConfig, dir: &Path, epochs: usize) -> Result<()> {
    let mut c = cfg.clone();
    c.data_dir = dir.join("data");
    c.out = dir.join("runs");
    c.synth.size = 16;
    c.synth.counts = crate::data::SplitCounts { train: 4, val: 2, test: 4 };
    c.train.epochs = epochs;
    c.train.batch_size = 4;
    c.attack.batch = 4;
    c.eval.batch = 4;
    let k_max = c.attack.k_sweep.iter().chain([&c.train.blur.spec.k, &c.attack.blur_settings.spec.k]).max().copied().unwrap_or(1);
    c.synth.size = c.synth.size.max(k_max);
    let opts = RunOptions::quiet();
    cmd_synth(&c, None)?;
    let a = cmd_train(&c, Some(Regime::BatTwogen), None, &opts)?;
    let b = cmd_train(&c, Some(Regime::Combined), None, &opts)?;
    let ckpts = [a.join(DETECTOR_CKPT), b.join(DETECTOR_CKPT)];
    cmd_eval(&c, &ckpts, &opts)?;
    cmd_attack(&c, &ckpts[0], &opts)?;
    Ok(())
}

/// `(relative path, sha256)` of every file under `root` except the
/// `config.toml` copies, which record the run's own location.
pub fn tree_digest(root: &Path) -> Result<Vec<(String, String)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if e.file_name() != CONFIG_FILE {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
                out.push((rel, Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = new_run_dir(tmp.path(), "train", 3).unwrap();
        let b = new_run_dir(tmp.path(), "train", 3).unwrap();
        assert_ne!(a, b);
        assert!(a.ends_with("train-s3-001") && b.ends_with("train-s3-002"));
    }

    #[test]
    fn generator_files_match_regimes() {
        assert!(generator_files(Regime::Normal).is_empty());
        assert_eq!(generator_files(Regime::BatGen).len(), 1);
        assert_eq!(generator_files(Regime::BatTwogen).len(), 2);
    }

    #[test]
    fn digest_skips_config_copies() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir(tmp.path().join("sub")).unwrap();
        fs::write(tmp.path().join("sub/a.json"), "1").unwrap();
        fs::write(tmp.path().join(CONFIG_FILE), "x").unwrap();
        let d = tree_digest(tmp.path()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].0, "sub/a.json");
    }
}
