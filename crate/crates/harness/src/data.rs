//! Synthetic segmentation corpus: textured geometric shapes over noisy
//! gradients, with occlusion.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vpnext::{ClassMask, IGNORE_INDEX};
use vpnext_tensor::Tensor;

use crate::error::{config_err, HarnessError, Result};
use crate::pnm::Pixmap;

pub const BACKGROUND: &str = "background";
pub const MIN_CLASS_FRACTION: f64 = 0.01;
pub const MAX_ATTEMPTS: u32 = 8;
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "vpnx-synth";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
    StripeTexture,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::StripeTexture];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::StripeTexture => "stripe-texture",
        }
    }

    fn prototype(self) -> [f64; 3] {
        match self {
            ShapeKind::Disc => [0.85, 0.3, 0.25],
            ShapeKind::Rectangle => [0.3, 0.75, 0.3],
            ShapeKind::Triangle => [0.3, 0.4, 0.9],
            ShapeKind::StripeTexture => [0.85, 0.8, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_train: usize,
    pub num_eval: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub shape_kinds: BTreeSet<ShapeKind>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_train: 200,
            num_eval: 50,
            image_size: 64,
            num_classes: 5,
            shape_kinds: ShapeKind::ALL.into_iter().collect(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return config_err(format!("imageSize {} must be a positive multiple of 16", self.image_size));
        }
        if self.shape_kinds.is_empty() {
            return config_err("shapeKinds must not be empty");
        }
        if self.num_classes != self.shape_kinds.len() + 1 {
            return config_err(format!(
                "numClasses {} must be one more (background) than the {} shape kinds",
                self.num_classes,
                self.shape_kinds.len()
            ));
        }
        if self.num_train == 0 || self.num_eval == 0 {
            return config_err("numTrain and numEval must be at least 1");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        std::iter::once(BACKGROUND).chain(self.shape_kinds.iter().map(|k| k.name())).map(String::from).collect()
    }

    fn class_of(&self, kind: ShapeKind) -> u8 {
        1 + self.shape_kinds.iter().position(|&k| k == kind).expect("kind is enabled") as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// One image with its label map; both row-major, `size × size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub synth: SynthSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    /// Fraction of all pixels carrying each class, over both splits.
    pub class_fractions: Vec<f64>,
    /// One line per rejected attempt.
    pub diagnostics: Vec<String>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// Pixel share of each class over `samples`; ignore pixels count toward
/// the total only.
pub fn class_fractions<'a>(samples: impl IntoIterator<Item = &'a Sample>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for s in samples {
        for &l in &s.labels {
            total += 1;
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// Deterministic corpus for `synth`; regenerates with a fresh attempt
/// stream while any class covers less than [`MIN_CLASS_FRACTION`].
pub fn generate(synth: &SynthSpec) -> Result<Corpus> {
    synth.validate()?;
    let names = synth.class_names();
    let mut diagnostics = Vec::new();
    for attempt in 0..MAX_ATTEMPTS {
        let train: Vec<Sample> = (0..synth.num_train).map(|i| render(synth, attempt, Split::Train, i)).collect();
        let eval: Vec<Sample> = (0..synth.num_eval).map(|i| render(synth, attempt, Split::Eval, i)).collect();
        let fractions = class_fractions(train.iter().chain(&eval), synth.num_classes);
        let starved: Vec<String> = fractions
            .iter()
            .enumerate()
            .filter(|(_, &f)| f < MIN_CLASS_FRACTION)
            .map(|(c, f)| format!("`{}` {:.3}%", names[c], 100.0 * f))
            .collect();
        if starved.is_empty() {
            return Ok(Corpus { synth: synth.clone(), train, eval, class_fractions: fractions, diagnostics });
        }
        diagnostics.push(format!("attempt {attempt}: classes below 1% of pixels: {}", starved.join(", ")));
    }
    Err(HarnessError::Data(format!(
        "no class-balanced corpus after {MAX_ATTEMPTS} attempts; {}",
        diagnostics.join("; ")
    )))
}

fn sample_rng(synth: &SynthSpec, attempt: u32, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let split_bit = matches!(split, Split::Eval) as u64;
    rng.set_stream(((attempt as u64) << 33) | (split_bit << 32) | index as u64);
    rng
}

enum Region {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Triangle([(f64, f64); 3]),
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Region::Rect { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= hw && (-dx * sin + dy * cos).abs() <= hh
            }
            Region::Triangle(v) => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

struct Shape {
    class: u8,
    region: Region,
    fill: [f64; 3],
    /// Dark band colour, direction and period for striped fills.
    stripes: Option<([f64; 3], f64, f64, f64)>,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

fn render(synth: &SynthSpec, attempt: u32, split: Split, index: usize) -> Sample {
    let mut rng = sample_rng(synth, attempt, split, index);
    let n = synth.image_size;
    let s = n as f64;
    let kinds: Vec<ShapeKind> = synth.shape_kinds.iter().copied().collect();

    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());

    let count = rng.gen_range(2..=4);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let cx = rng.gen_range(0.1..0.9) * s;
        let cy = rng.gen_range(0.1..0.9) * s;
        let r = rng.gen_range(0.12..0.28) * s;
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let region = match kind {
            ShapeKind::Disc | ShapeKind::StripeTexture => Region::Disc { cx, cy, r },
            ShapeKind::Rectangle => {
                let aspect = rng.gen_range(0.5..1.0);
                Region::Rect { cx, cy, hw: r, hh: r * aspect, cos: rot.cos(), sin: rot.sin() }
            }
            ShapeKind::Triangle => {
                let v = [0.0, 1.0, 2.0].map(|j| {
                    let a = rot + j * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.35..0.35);
                    (cx + 1.3 * r * a.cos(), cy + 1.3 * r * a.sin())
                });
                Region::Triangle(v)
            }
        };
        let fill = mix(kind.prototype(), random_color(&mut rng), 0.2);
        let stripes = (kind == ShapeKind::StripeTexture).then(|| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let dark = rng.gen_range(0.25..0.45);
            (fill.map(|c| c * dark), a.cos(), a.sin(), rng.gen_range(4.0..7.0))
        });
        shapes.push(Shape { class: synth.class_of(kind), region, fill, stripes });
    }

    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut labels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = 0.5 + 0.5 * ((px / s - 0.5) * gx + (py / s - 0.5) * gy);
            let mut color = mix(c0, c1, t);
            let mut label = 0u8;
            for sh in &shapes {
                if sh.region.contains(px, py) {
                    label = sh.class;
                    color = match sh.stripes {
                        Some((alt, dx, dy, period)) if ((px * dx + py * dy) / period).floor() as i64 % 2 == 0 => alt,
                        _ => sh.fill,
                    };
                }
            }
            for c in color {
                let v = c + rng.gen_range(-0.06..0.06);
                rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            labels.push(label);
        }
    }
    Sample { size: n, rgb, labels }
}

/// Stacks samples into a `[b, n, n, 3]` image batch in `[0, 1]` and its mask.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, ClassMask)> {
    let Some(first) = samples.first() else {
        return Err(HarnessError::Data("empty batch".into()));
    };
    let n = first.size;
    if samples.iter().any(|s| s.size != n) {
        return Err(HarnessError::Data("mixed image sizes in one batch".into()));
    }
    let mut px = Vec::with_capacity(samples.len() * n * n * 3);
    let mut labels = Vec::with_capacity(samples.len() * n * n);
    for s in samples {
        px.extend(s.rgb.iter().map(|&v| v as f32 / 255.0));
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new([samples.len(), n, n, 3], px)?, ClassMask::new(samples.len(), n, n, labels)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileEntry {
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub synth: SynthSpec,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub ignore_index: u8,
    pub class_fractions: Vec<f64>,
    pub diagnostics: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))?;
    Ok(sha256_hex(bytes))
}

/// Writes `corpus` under `dir` as `{split}/{index}.ppm|.pgm` plus a manifest.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| HarnessError::io(&sub, e))?;
        for (i, s) in corpus.split(split).iter().enumerate() {
            let image = format!("{}/{i:05}.ppm", split.name());
            let mask = format!("{}/{i:05}.pgm", split.name());
            let ppm = Pixmap { width: s.size, height: s.size, channels: 3, data: s.rgb.clone() };
            let pgm = Pixmap { width: s.size, height: s.size, channels: 1, data: s.labels.clone() };
            let image_sha256 = write_file(&dir.join(&image), &ppm.encode())?;
            let mask_sha256 = write_file(&dir.join(&mask), &pgm.encode())?;
            files.push(FileEntry { split, image, mask, image_sha256, mask_sha256 });
        }
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        synth: corpus.synth.clone(),
        seed: corpus.synth.seed,
        class_names: corpus.synth.class_names(),
        ignore_index: IGNORE_INDEX,
        class_fractions: corpus.class_fractions.clone(),
        diagnostics: corpus.diagnostics.clone(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn read_checked(dir: &Path, rel: &str, sha: &str) -> Result<Pixmap> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
    let got = sha256_hex(&bytes);
    if got != sha {
        return Err(HarnessError::format(&path, format!("checksum mismatch: manifest {sha}, file {got}")));
    }
    Pixmap::decode(&bytes).map_err(|m| HarnessError::format(&path, m))
}

/// Reloads a corpus from its manifest, verifying every checksum.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| HarnessError::format(&path, e.to_string()))?;
    if m.format != FORMAT || m.version != FORMAT_VERSION {
        return Err(HarnessError::format(&path, format!("unsupported dataset format {} v{}", m.format, m.version)));
    }
    m.synth.validate()?;
    let n = m.synth.image_size;
    let mut corpus = Corpus {
        synth: m.synth.clone(),
        train: Vec::new(),
        eval: Vec::new(),
        class_fractions: m.class_fractions.clone(),
        diagnostics: m.diagnostics.clone(),
    };
    for f in &m.files {
        let img = read_checked(dir, &f.image, &f.image_sha256)?;
        let mask = read_checked(dir, &f.mask, &f.mask_sha256)?;
        if (img.channels, img.width, img.height) != (3, n, n) || (mask.channels, mask.width, mask.height) != (1, n, n) {
            return Err(HarnessError::format(dir.join(&f.image), format!("expected {n}×{n} image/mask pair")));
        }
        if let Some(bad) = mask.data.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= m.synth.num_classes) {
            return Err(HarnessError::format(dir.join(&f.mask), format!("label {bad} out of range")));
        }
        let s = Sample { size: n, rgb: img.data, labels: mask.data };
        match f.split {
            Split::Train => corpus.train.push(s),
            Split::Eval => corpus.eval.push(s),
        }
    }
    if corpus.train.len() != m.synth.num_train || corpus.eval.len() != m.synth.num_eval {
        return Err(HarnessError::format(&path, "file list does not match numTrain/numEval"));
    }
    Ok(corpus)
}
