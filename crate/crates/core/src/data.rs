//! Sample records, manifests and the synthetic forgery benchmark.
//!
//! A manifest is a JSON-lines file with one record per image:
//!
//! ```text
//! {"path":"test/q_mid/seam/b200150.png","label":"fake","family":"seam","quality":"q_mid","split":"test"}
//! ```
//!
//! Paths are relative to the manifest's directory. Every fake has a real
//! counterpart rendered from the same base image, stored under
//! `{split}/{quality}/real/b{base}.png`.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blur::Image;
use crate::error::{Error, Result};
use crate::jpeg::jpeg_compress;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPEC_FILE: &str = "synth_spec.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    None,
    Checker,
    Seam,
    Residual,
}

impl Family {
    pub const ARTIFACTS: [Family; 3] = [Family::Checker, Family::Seam, Family::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Family::None => "none",
            Family::Checker => "checker",
            Family::Seam => "seam",
            Family::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    QRaw,
    QMid,
    QLow,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::QRaw, Quality::QMid, Quality::QLow];

    pub fn name(self) -> &'static str {
        match self {
            Quality::QRaw => "q_raw",
            Quality::QMid => "q_mid",
            Quality::QLow => "q_low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub path: String,
    pub label: Label,
    pub family: Family,
    pub quality: Quality,
    pub split: Split,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        match (self.label, self.family) {
            (Label::Real, Family::None) => Ok(()),
            (Label::Fake, f) if f != Family::None => Ok(()),
            _ => Err(Error::Validation(format!(
                "record {}: label {:?} is inconsistent with family {}",
                self.path, self.label, self.family
            ))),
        }
    }

    /// Base-image number encoded in the file name (`b000123.png` → 123).
    pub fn base(&self) -> Option<u64> {
        let stem = Path::new(&self.path).file_stem()?.to_str()?;
        stem.strip_prefix('b')?.parse().ok()
    }
}

/// Record filters; `None` matches everything.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Filters {
    pub family: Option<Family>,
    pub quality: Option<Quality>,
    pub split: Option<Split>,
}

impl Filters {
    pub fn cell(family: Family, quality: Quality, split: Split) -> Self {
        Filters {
            family: Some(family),
            quality: Some(quality),
            split: Some(split),
        }
    }
}

/// Applies `filters` in manifest order. A family filter keeps the fakes of
/// that family together with the reals rendered from the same bases; reals
/// whose file names carry no base number (ingested folders) are all kept.
pub fn filter_records(records: &[SampleRecord], filters: &Filters) -> Vec<SampleRecord> {
    let keep_basic = |r: &SampleRecord| {
        filters.quality.is_none_or(|q| r.quality == q) && filters.split.is_none_or(|s| r.split == s)
    };
    let Some(family) = filters.family else {
        return records.iter().filter(|r| keep_basic(r)).cloned().collect();
    };
    let bases: std::collections::HashSet<(Split, u64)> = records
        .iter()
        .filter(|r| keep_basic(r) && r.family == family)
        .filter_map(|r| r.base().map(|b| (r.split, b)))
        .collect();
    records
        .iter()
        .filter(|r| {
            keep_basic(r)
                && (r.family == family
                    || (family != Family::None
                        && r.label == Label::Real
                        && r.base().is_none_or(|b| bases.contains(&(r.split, b)))))
        })
        .cloned()
        .collect()
}

/// Records plus the directory their paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn filtered(&self, filters: &Filters) -> Manifest {
        Manifest {
            root: self.root.clone(),
            records: filter_records(&self.records, filters),
        }
    }

    /// Loads every image into one batch with 0/1 labels.
    pub fn load_images(&self, channels: usize) -> Result<(Tensor, Vec<u8>)> {
        let mut images = Vec::with_capacity(self.records.len());
        for r in &self.records {
            images.push(read_image(&self.resolve(r), channels)?);
        }
        if images.is_empty() {
            return Err(Error::Validation("no records selected".into()));
        }
        let labels = self.records.iter().map(|r| r.label.as_u8()).collect();
        Ok((Image::batch(&images)?, labels))
    }
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        r.validate()?;
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Validation(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Parses a manifest without touching the image files.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        r.validate()?;
        records.push(r);
    }
    Ok(records)
}

/// Reads, filters and checks that every selected file exists.
pub fn load_manifest(path: &Path, filters: &Filters) -> Result<Manifest> {
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = filter_records(&read_manifest(path)?, filters);
    for r in &records {
        let p = root.join(&r.path);
        if !p.is_file() {
            return Err(Error::MissingFile {
                record: format!("{} ({:?}, {}, {}, {})", r.path, r.label, r.family, r.quality, r.split),
                path: p,
            });
        }
    }
    Ok(Manifest { root, records })
}

pub fn read_image(path: &Path, channels: usize) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::Validation(format!("unsupported channel count {c}"))),
    };
    Ok(Image::from_fn(h, w, channels, |i, j, ch| {
        interleaved[(i * w + j) * channels + ch] as f64 / 255.0
    }))
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut buf = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                buf.push(to_u8(image.get(i, j, ch)));
            }
        }
    }
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Validation(format!("cannot store {c} channels"))),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(path, &buf, w as u32, h as u32, color, image::ImageFormat::Png).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize(image: &Image) -> Image {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = to_u8(*v) as f64 / 255.0;
    }
    out
}

/// Smooth random "scene": a few low-frequency waves shared by all channels,
/// a weaker per-channel field, and mild sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureSpec {
    pub waves: usize,
    /// Peak amplitude of the shared field.
    pub amplitude: f64,
    /// Cycles per image, sampled uniformly in this range.
    pub frequency: [f64; 2],
    /// Amplitude of the per-channel fields.
    pub chroma: f64,
    pub noise_std: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            waves: 4,
            amplitude: 0.25,
            frequency: [0.5, 3.0],
            chroma: 0.02,
            noise_std: 0.03,
        }
    }
}

/// Parameters of the manipulated region and of each artifact family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArtifactSpec {
    /// Ellipse semi-axes as fractions of the image side.
    pub region_radius: [f64; 2],
    /// Width of the soft region edge, in normalized radius units.
    pub softness: f64,
    /// Per-channel colour offset inside the region, shared by every family.
    pub color_shift: [f64; 3],
    /// Checkerboard amplitude inside the region.
    pub checker: f64,
    /// Intensity step across a hard-edged copy of the region boundary.
    pub seam: f64,
    /// Noise standard deviation inside the residual patch.
    pub residual: f64,
    /// Residual patch side as a fraction of the image side.
    pub residual_patch: f64,
}

impl Default for ArtifactSpec {
    fn default() -> Self {
        ArtifactSpec {
            region_radius: [0.2, 0.35],
            softness: 0.15,
            color_shift: [0.02, 0.0, -0.02],
            checker: 0.06,
            seam: 0.08,
            residual: 0.08,
            residual_patch: 0.3,
        }
    }
}

/// JPEG qualities of the compressed tiers; `q_raw` is stored losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualitySpec {
    pub q_mid: u8,
    pub q_low: u8,
}

impl Default for QualitySpec {
    fn default() -> Self {
        QualitySpec { q_mid: 75, q_low: 20 }
    }
}

impl QualitySpec {
    pub fn jpeg_quality(&self, q: Quality) -> Option<u8> {
        match q {
            Quality::QRaw => None,
            Quality::QMid => Some(self.q_mid),
            Quality::QLow => Some(self.q_low),
        }
    }
}

/// Bases per artifact family in each split. Each base yields one real and one fake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            val: 50,
            test: 100,
        }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Bases of different splits come from disjoint ranges of this width.
pub const SPLIT_STRIDE: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub size: usize,
    pub channels: usize,
    pub counts: SplitCounts,
    pub texture: TextureSpec,
    pub artifacts: ArtifactSpec,
    pub qualities: QualitySpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            channels: 3,
            counts: SplitCounts::default(),
            texture: TextureSpec::default(),
            artifacts: ArtifactSpec::default(),
            qualities: QualitySpec::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "synthetic images need size >= 8 and 1 or 3 channels, got {} / {}",
                self.size, self.channels
            )));
        }
        let per_split = 3 * Split::ALL.iter().map(|&s| self.counts.get(s)).max().unwrap_or(0) as u64;
        if per_split >= SPLIT_STRIDE {
            return Err(Error::Config("too many bases per split".into()));
        }
        for q in [self.qualities.q_mid, self.qualities.q_low] {
            if !(1..=100).contains(&q) {
                return Err(Error::Config(format!("JPEG quality {q} outside 1..=100")));
            }
        }
        let a = &self.artifacts;
        if !(a.region_radius[0] > 0.0 && a.region_radius[0] <= a.region_radius[1]) || a.softness <= 0.0 {
            return Err(Error::Config("invalid artifact region".into()));
        }
        Ok(())
    }

    /// Base number of the `i`-th base of `family` in `split`.
    pub fn base_id(&self, split: Split, family: Family, i: usize) -> u64 {
        let s = Split::ALL.iter().position(|&x| x == split).unwrap() as u64;
        let f = Family::ARTIFACTS.iter().position(|&x| x == family).unwrap_or(0) as u64;
        s * SPLIT_STRIDE + f * self.counts.get(split) as u64 + i as u64
    }

    fn rng_for(&self, base: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(base);
        rng
    }

    /// The real image of a base.
    pub fn render_real(&self, base: u64) -> Image {
        let mut rng = self.rng_for(base);
        render_texture(self, &mut rng)
    }

    /// The real image of a base and its fake counterpart with `family` artifacts.
    pub fn render_pair(&self, base: u64, family: Family) -> (Image, Image) {
        let mut rng = self.rng_for(base);
        let real = render_texture(self, &mut rng);
        let fake = add_artifact(self, &real, family, &mut rng);
        (real, fake)
    }
}

fn render_texture(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Image {
    let t = &spec.texture;
    let n = spec.size as f64;
    let wave = |amp: f64, rng: &mut ChaCha8Rng| {
        let f = rng.random_range(t.frequency[0]..=t.frequency[1]);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let a = amp * rng.random_range(0.5..1.0);
        (f * theta.cos() / n, f * theta.sin() / n, phase, a)
    };
    let shared: Vec<_> = (0..t.waves).map(|_| wave(t.amplitude / t.waves as f64, rng)).collect();
    let base_level = rng.random_range(0.35..0.65);
    let per_channel: Vec<Vec<_>> = (0..spec.channels)
        .map(|_| (0..2).map(|_| wave(t.chroma / 2.0, rng)).collect())
        .collect();
    let eval = |ws: &[(f64, f64, f64, f64)], i: usize, j: usize| {
        ws.iter()
            .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * i as f64 + fx * j as f64) + ph).cos())
            .sum::<f64>()
    };
    let mut img = Image::from_fn(spec.size, spec.size, spec.channels, |i, j, c| {
        base_level + eval(&shared, i, j) + eval(&per_channel[c], i, j)
    });
    if t.noise_std > 0.0 {
        let normal = Normal::new(0.0, t.noise_std).expect("positive std");
        for v in img.data_mut() {
            *v += normal.sample(rng);
        }
    }
    img.clamp01();
    img
}

/// Elliptical region with a soft and a hard mask.
struct Region {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Region {
    fn sample(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Region {
        let n = spec.size as f64;
        let [lo, hi] = spec.artifacts.region_radius;
        let ry = n * rng.random_range(lo..=hi);
        let rx = n * rng.random_range(lo..=hi);
        Region {
            cy: n / 2.0 + rng.random_range(-0.1..=0.1) * n,
            cx: n / 2.0 + rng.random_range(-0.1..=0.1) * n,
            ry,
            rx,
        }
    }

    fn radius(&self, i: usize, j: usize) -> f64 {
        let dy = (i as f64 + 0.5 - self.cy) / self.ry;
        let dx = (j as f64 + 0.5 - self.cx) / self.rx;
        (dy * dy + dx * dx).sqrt()
    }

    fn soft(&self, i: usize, j: usize, softness: f64) -> f64 {
        1.0 / (1.0 + ((self.radius(i, j) - 1.0) / softness).exp())
    }

    fn hard(&self, i: usize, j: usize) -> f64 {
        f64::from(u8::from(self.radius(i, j) < 1.0))
    }
}

fn add_artifact(spec: &SynthSpec, real: &Image, family: Family, rng: &mut ChaCha8Rng) -> Image {
    let a = &spec.artifacts;
    let region = Region::sample(spec, rng);
    let n = spec.size;
    let mut fake = real.clone();
    // shared cue: a smooth colour mismatch inside the region
    for ch in 0..spec.channels {
        let shift = if spec.channels == 1 {
            a.color_shift.iter().sum::<f64>() / 3.0
        } else {
            a.color_shift[ch]
        };
        for i in 0..n {
            for j in 0..n {
                let v = fake.get(i, j, ch) + shift * region.soft(i, j, a.softness);
                fake.set(i, j, ch, v);
            }
        }
    }
    match family {
        Family::Checker => {
            for ch in 0..spec.channels {
                for i in 0..n {
                    for j in 0..n {
                        let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                        let v = fake.get(i, j, ch) + a.checker * s * region.soft(i, j, a.softness);
                        fake.set(i, j, ch, v);
                    }
                }
            }
        }
        Family::Seam => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for ch in 0..spec.channels {
                for i in 0..n {
                    for j in 0..n {
                        let edge = region.hard(i, j) - region.soft(i, j, a.softness);
                        let v = fake.get(i, j, ch) + sign * a.seam * edge;
                        fake.set(i, j, ch, v);
                    }
                }
            }
        }
        Family::Residual => {
            let side = ((n as f64 * a.residual_patch).round() as usize).clamp(1, n);
            let top = ((region.cy - side as f64 / 2.0).round().max(0.0) as usize).min(n - side);
            let left = ((region.cx - side as f64 / 2.0).round().max(0.0) as usize).min(n - side);
            let normal = Normal::new(0.0, a.residual).expect("positive std");
            for ch in 0..spec.channels {
                for i in top..top + side {
                    for j in left..left + side {
                        let v = fake.get(i, j, ch) + normal.sample(rng);
                        fake.set(i, j, ch, v);
                    }
                }
            }
        }
        Family::None => {}
    }
    fake.clamp01();
    fake
}

fn render_tier(img: &Image, quality: Quality, q: &QualitySpec) -> Result<Image> {
    let raw = quantize(img);
    match q.jpeg_quality(quality) {
        None => Ok(raw),
        Some(level) => jpeg_compress(&raw, level),
    }
}

/// Renders one (split, family, quality) cell in memory, in manifest order:
/// for each base its real image then its fake. Pixel values equal those
/// stored by [`synth_generate`].
pub fn render_cell(spec: &SynthSpec, split: Split, family: Family, quality: Quality) -> Result<(Tensor, Vec<u8>)> {
    spec.validate()?;
    if family == Family::None {
        return Err(Error::Validation("a cell is keyed by an artifact family".into()));
    }
    let n = spec.counts.get(split);
    if n == 0 {
        return Err(Error::Validation(format!("cell {split}/{family}/{quality} is empty")));
    }
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (real, fake) = spec.render_pair(spec.base_id(split, family, i), family);
        images.push(render_tier(&real, quality, &spec.qualities)?);
        images.push(render_tier(&fake, quality, &spec.qualities)?);
        labels.extend([Label::Real.as_u8(), Label::Fake.as_u8()]);
    }
    Ok((Image::batch(&images)?, labels))
}

/// Writes every image and the manifest under `out`; returns the records.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Vec<SampleRecord>> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::new();
    for split in Split::ALL {
        for family in Family::ARTIFACTS {
            for i in 0..spec.counts.get(split) {
                let base = spec.base_id(split, family, i);
                let (real, fake) = spec.render_pair(base, family);
                for quality in Quality::ALL {
                    for (img, label, fam, dir) in [
                        (&real, Label::Real, Family::None, "real"),
                        (&fake, Label::Fake, family, family.name()),
                    ] {
                        let rel = format!("{split}/{quality}/{dir}/b{base:06}.png");
                        write_image(&out.join(&rel), &render_tier(img, quality, &spec.qualities)?)?;
                        records.push(SampleRecord {
                            path: rel,
                            label,
                            family: fam,
                            quality,
                            split,
                        });
                    }
                }
            }
        }
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    let spec_json = serde_json::to_string_pretty(spec).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(out.join(SPEC_FILE), spec_json).map_err(|e| Error::io(out.join(SPEC_FILE), e))?;
    Ok(records)
}

/// Builds and writes a manifest for a user-supplied folder laid out like
/// the synthetic benchmark: `{split}/{quality}/{real|checker|seam|residual}/*.png`.
/// Files are listed in sorted path order; other files and directories are
/// ignored. Returns the records.
pub fn ingest_folder(root: &Path) -> Result<Vec<SampleRecord>> {
    let sorted = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut out: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        out.sort();
        Ok(out)
    };
    let mut records = Vec::new();
    for split in Split::ALL {
        for quality in Quality::ALL {
            for family in std::iter::once(Family::None).chain(Family::ARTIFACTS) {
                let sub = if family == Family::None { "real" } else { family.name() };
                let dir = root.join(split.name()).join(quality.name()).join(sub);
                if !dir.is_dir() {
                    continue;
                }
                for p in sorted(&dir)? {
                    let is_png = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
                    if !(p.is_file() && is_png) {
                        continue;
                    }
                    let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                    records.push(SampleRecord {
                        path: rel,
                        label: if family == Family::None { Label::Real } else { Label::Fake },
                        family,
                        quality,
                        split,
                    });
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "no images found under {} (expected {{split}}/{{quality}}/{{real|family}}/*.png)",
            root.display()
        )));
    }
    write_manifest(&root.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

/// Mean squared response to the discrete Laplacian, over interior pixels
/// and channels.
pub fn high_frequency_energy(image: &Image) -> f64 {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 1..h.saturating_sub(1) {
            for j in 1..w.saturating_sub(1) {
                let lap = 4.0 * image.get(i, j, ch)
                    - image.get(i - 1, j, ch)
                    - image.get(i + 1, j, ch)
                    - image.get(i, j - 1, ch)
                    - image.get(i, j + 1, ch);
                total += lap * lap;
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}

/// Checks that no base used in `test` also appears in `train` or `val`.
pub fn audit_leakage(records: &[SampleRecord]) -> Result<()> {
    use std::collections::HashMap;
    let mut seen: HashMap<u64, Split> = HashMap::new();
    for r in records {
        let Some(b) = r.base() else {
            return Err(Error::Validation(format!("record {} has no base number", r.path)));
        };
        if let Some(&other) = seen.get(&b) {
            if other != r.split {
                return Err(Error::Validation(format!("base {b} appears in both {other} and {}", r.split)));
            }
        }
        seen.insert(b, r.split);
        let expected = Split::ALL.iter().position(|&s| s == r.split).unwrap() as u64;
        if b / SPLIT_STRIDE != expected {
            return Err(Error::Validation(format!("base {b} lies outside the {} range", r.split)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            size: 16,
            counts: SplitCounts {
                train: 2,
                val: 1,
                test: 2,
            },
            seed: 7,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn record_invariants() {
        let mut r = SampleRecord {
            path: "train/q_raw/real/b000001.png".into(),
            label: Label::Real,
            family: Family::None,
            quality: Quality::QRaw,
            split: Split::Train,
        };
        assert!(r.validate().is_ok());
        assert_eq!(r.base(), Some(1));
        r.family = Family::Seam;
        assert!(r.validate().is_err());
        r.label = Label::Fake;
        assert!(r.validate().is_ok());
        r.family = Family::None;
        assert!(r.validate().is_err());
    }

    #[test]
    fn field_names_are_frozen() {
        let r = SampleRecord {
            path: "p.png".into(),
            label: Label::Fake,
            family: Family::Residual,
            quality: Quality::QLow,
            split: Split::Val,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"path":"p.png","label":"fake","family":"residual","quality":"q_low","split":"val"}"#
        );
        let extra = r#"{"path":"p","label":"real","family":"none","quality":"q_raw","split":"val","x":1}"#;
        assert!(serde_json::from_str::<SampleRecord>(extra).is_err());
    }

    #[test]
    fn rendering_is_deterministic_and_bases_differ() {
        let spec = tiny_spec();
        let (r1, f1) = spec.render_pair(3, Family::Checker);
        let (r2, f2) = spec.render_pair(3, Family::Checker);
        assert_eq!((r1.clone(), f1), (r2, f2));
        assert_ne!(r1, spec.render_real(4));
        assert_eq!(r1, spec.render_real(3));
    }

    #[test]
    fn every_family_changes_the_image() {
        let spec = tiny_spec();
        for f in Family::ARTIFACTS {
            let (real, fake) = spec.render_pair(11, f);
            assert!(real.max_abs_diff(&fake) > 0.01, "{f}");
        }
    }

    #[test]
    fn base_ranges_are_disjoint_across_splits() {
        let spec = tiny_spec();
        let mut all = Vec::new();
        for s in Split::ALL {
            for f in Family::ARTIFACTS {
                for i in 0..spec.counts.get(s) {
                    all.push(spec.base_id(s, f, i));
                }
            }
        }
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn family_filter_keeps_paired_reals() {
        let mk = |path: &str, label, family| SampleRecord {
            path: path.into(),
            label,
            family,
            quality: Quality::QMid,
            split: Split::Test,
        };
        let recs = vec![
            mk("test/q_mid/real/b200000.png", Label::Real, Family::None),
            mk("test/q_mid/checker/b200000.png", Label::Fake, Family::Checker),
            mk("test/q_mid/real/b200002.png", Label::Real, Family::None),
            mk("test/q_mid/seam/b200002.png", Label::Fake, Family::Seam),
        ];
        let f = Filters {
            family: Some(Family::Seam),
            ..Filters::default()
        };
        let got = filter_records(&recs, &f);
        assert_eq!(got, vec![recs[2].clone(), recs[3].clone()]);
        assert_eq!(filter_records(&recs, &Filters::default()), recs);
    }

    #[test]
    fn high_frequency_energy_of_flat_image_is_zero() {
        assert_eq!(high_frequency_energy(&Image::filled(8, 8, 3, 0.375)), 0.0);
        let checker = Image::from_fn(8, 8, 1, |i, j, _| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        // every interior Laplacian is ±4
        assert_eq!(high_frequency_energy(&checker), 16.0);
    }
}
