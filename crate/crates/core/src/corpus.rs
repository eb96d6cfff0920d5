//! Synthetic paired image/report corpus with planted lesions.
//!
//! Images are a fixed smooth "chest" background plus pixel noise; abnormal
//! samples carry one to three lesions of distinct kinds, each rendered as a
//! localized blob whose shape depends on the kind and whose size and
//! contrast grow with severity. Reports are produced by a closed grammar, so
//! [`extract_labels`] inverts them exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbones::ImageGrid;
use crate::checkpoint::{load_tensors, save_tensors};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    Opacity,
    Nodule,
    Effusion,
    Pneumothorax,
    Device,
    Cardiomegaly,
    Consolidation,
    Atelectasis,
}

pub const N_KINDS: usize = 8;

impl LesionKind {
    pub const ALL: [LesionKind; N_KINDS] = [
        LesionKind::Opacity,
        LesionKind::Nodule,
        LesionKind::Effusion,
        LesionKind::Pneumothorax,
        LesionKind::Device,
        LesionKind::Cardiomegaly,
        LesionKind::Consolidation,
        LesionKind::Atelectasis,
    ];

    /// Canonical report keyword.
    pub fn name(self) -> &'static str {
        match self {
            LesionKind::Opacity => "opacity",
            LesionKind::Nodule => "nodule",
            LesionKind::Effusion => "effusion",
            LesionKind::Pneumothorax => "pneumothorax",
            LesionKind::Device => "device",
            LesionKind::Cardiomegaly => "cardiomegaly",
            LesionKind::Consolidation => "consolidation",
            LesionKind::Atelectasis => "atelectasis",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn name(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }

    /// Characteristic size in pixels.
    pub fn size(self) -> f64 {
        match self {
            Severity::Mild => 2.0,
            Severity::Moderate => 3.0,
            Severity::Severe => 4.0,
        }
    }

    pub fn contrast(self) -> f64 {
        match self {
            Severity::Mild => 0.15,
            Severity::Moderate => 0.25,
            Severity::Severe => 0.35,
        }
    }
}

/// One planted lesion, anchored at a patch-grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub kind: LesionKind,
    /// `(row, col)` in the patch grid.
    pub cell: (usize, usize),
    pub severity: Severity,
    /// Pixel offset of the lesion centre from the cell centre.
    pub offset: (i32, i32),
}

impl LesionSpec {
    pub fn new(kind: LesionKind, cell: (usize, usize), severity: Severity) -> Self {
        Self {
            kind,
            cell,
            severity,
            offset: (0, 0),
        }
    }

    fn center(&self, patch: usize) -> (f64, f64) {
        let half = patch as f64 / 2.0;
        (
            (self.cell.0 * patch) as f64 + half + f64::from(self.offset.0),
            (self.cell.1 * patch) as f64 + half + f64::from(self.offset.1),
        )
    }

    /// Intensity added at pixel `(y, x)`, or `None` outside the footprint.
    pub fn intensity_at(&self, y: usize, x: usize, patch: usize) -> Option<f64> {
        let (cy, cx) = self.center(patch);
        let dy = y as f64 + 0.5 - cy;
        let dx = x as f64 + 0.5 - cx;
        let s = self.severity.size();
        let c = self.severity.contrast();
        let r = dy.hypot(dx);
        let ellipse = |ax: f64, ay: f64| (dx / ax).powi(2) + (dy / ay).powi(2) <= 1.0;
        match self.kind {
            LesionKind::Opacity => {
                let big_r = s + 1.0;
                (r <= big_r).then(|| c * (1.0 - 0.5 * (r / big_r).powi(2)))
            }
            LesionKind::Nodule => (r <= 0.5 * s + 1.0).then_some(1.5 * c),
            LesionKind::Effusion => ellipse(2.0 * s, 0.5 * s + 0.5).then_some(c),
            LesionKind::Pneumothorax => (r <= s + 1.0).then_some(-c),
            LesionKind::Device => (dx.abs() <= 1.0 && dy.abs() <= 2.0 * s).then_some(1.8 * c),
            LesionKind::Cardiomegaly => ellipse(s, 1.6 * s).then_some(0.8 * c),
            LesionKind::Consolidation => (dx.abs() <= s && dy.abs() <= s).then_some(c),
            LesionKind::Atelectasis => (dy.abs() <= 0.75 && dx.abs() <= 2.0 * s).then_some(c),
        }
    }

    /// Footprint pixel count per patch, indexed by row-major patch index.
    pub fn patch_coverage(&self, image_size: usize, patch: usize) -> Vec<usize> {
        let grid = image_size / patch;
        let mut counts = vec![0; grid * grid];
        for y in 0..image_size {
            for x in 0..image_size {
                if self.intensity_at(y, x, patch).is_some() {
                    counts[(y / patch) * grid + x / patch] += 1;
                }
            }
        }
        counts
    }
}

/// Presence flag per observation kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ObservationLabels(pub [bool; N_KINDS]);

impl ObservationLabels {
    pub fn from_kinds(kinds: impl IntoIterator<Item = LesionKind>) -> Self {
        let mut flags = [false; N_KINDS];
        for k in kinds {
            flags[k.index()] = true;
        }
        Self(flags)
    }

    pub fn contains(&self, kind: LesionKind) -> bool {
        self.0[kind.index()]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn bitmask(&self) -> u32 {
        self.0
            .iter()
            .enumerate()
            .fold(0, |m, (i, &b)| if b { m | (1 << i) } else { m })
    }

    pub fn from_bitmask(mask: u32) -> Self {
        let mut flags = [false; N_KINDS];
        for (i, f) in flags.iter_mut().enumerate() {
            *f = mask & (1 << i) != 0;
        }
        Self(flags)
    }
}

/// Parameters of [`generate_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub normal_ratio: f64,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_lesions: usize,
    /// Number of lesion kinds in play (the first `n_kinds` of [`LesionKind::ALL`]).
    pub n_kinds: usize,
    pub noise_std: f64,
    pub id_prefix: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 512,
            normal_ratio: 0.7,
            seed: 7,
            image_size: 64,
            patch_size: 8,
            max_lesions: 3,
            n_kinds: N_KINDS,
            noise_std: 0.02,
            id_prefix: "train".into(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.normal_ratio) {
            return Err(Error::Config(format!(
                "normal ratio {} outside [0, 1]",
                self.normal_ratio
            )));
        }
        if self.patch_size == 0
            || self.image_size % self.patch_size != 0
            || self.image_size / self.patch_size < 3
        {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of patch size {} with at least 3 patches per side",
                self.image_size, self.patch_size
            )));
        }
        let grid = self.image_size / self.patch_size;
        let cells = (grid - 2) * (grid - 2);
        if self.n_kinds == 0
            || self.n_kinds > N_KINDS
            || self.max_lesions == 0
            || self.max_lesions > self.n_kinds.min(cells)
        {
            return Err(Error::Config(format!(
                "{} lesion kinds with up to {} lesions per image is not generatable",
                self.n_kinds, self.max_lesions
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub image: ImageGrid,
    pub report: String,
    pub lesions: Vec<LesionSpec>,
    pub lesion_patches: Vec<usize>,
    pub labels: ObservationLabels,
    pub patch_size: usize,
}

/// What is persisted per sample; the lesion specs themselves are not.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub image: ImageGrid,
    pub report: String,
    pub labels: ObservationLabels,
    pub lesion_patches: Vec<usize>,
}

impl From<PairedSample> for CorpusRecord {
    fn from(s: PairedSample) -> Self {
        Self {
            id: s.id,
            image: s.image,
            report: s.report,
            labels: s.labels,
            lesion_patches: s.lesion_patches,
        }
    }
}

pub const NORMAL_OPENING: &str = "no acute findings .";
pub const FIXED_SENTENCES: [&str; 2] = [
    "the mediastinum is unremarkable .",
    "the bony structures are intact .",
];

/// Zone phrase for a patch-grid cell, e.g. `"left upper zone"`. The image
/// left is the patient's right.
pub fn location_phrase(cell: (usize, usize), grid: usize) -> String {
    let level = if cell.0 * 8 < grid * 3 {
        "upper"
    } else if cell.0 * 8 < grid * 5 {
        "middle"
    } else {
        "lower"
    };
    let side = if cell.1 * 2 < grid { "right" } else { "left" };
    format!("{side} {level} zone")
}

pub fn lesion_sentence(lesion: &LesionSpec, grid: usize) -> String {
    format!(
        "there is a {} {} in the {} .",
        lesion.severity.name(),
        lesion.kind.name(),
        location_phrase(lesion.cell, grid)
    )
}

/// Grammar rendering: one sentence per lesion (in the given order) followed
/// by the fixed sentences; the normal opening replaces the lesion sentences
/// when there are none.
pub fn render_report(lesions: &[LesionSpec], grid: usize) -> String {
    let mut parts: Vec<String> = if lesions.is_empty() {
        vec![NORMAL_OPENING.to_string()]
    } else {
        lesions.iter().map(|l| lesion_sentence(l, grid)).collect()
    };
    parts.extend(FIXED_SENTENCES.iter().map(|s| s.to_string()));
    parts.join(" ")
}

/// Noise-free background intensity at pixel `(y, x)`.
fn anatomy(y: usize, x: usize, size: usize) -> f64 {
    let v = (y as f64 + 0.5) / size as f64;
    let u = (x as f64 + 0.5) / size as f64;
    let lung = |cu: f64| {
        let d = ((u - cu) / 0.17).powi(2) + ((v - 0.52) / 0.36).powi(2);
        1.0 / (1.0 + ((d - 1.0) * 8.0).exp())
    };
    let lungs = lung(0.3).max(lung(0.7));
    let base = 0.55 + 0.04 * (std::f64::consts::PI * 3.0 * v).sin();
    base - 0.28 * lungs + 0.03 * v
}

pub fn render_image(
    lesions: &[LesionSpec],
    image_size: usize,
    patch: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> ImageGrid {
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite noise");
    let mut pixels = Vec::with_capacity(image_size * image_size);
    for y in 0..image_size {
        for x in 0..image_size {
            let mut v = anatomy(y, x, image_size);
            if noise_std > 0.0 {
                v += noise.sample(rng);
            }
            for l in lesions {
                if let Some(i) = l.intensity_at(y, x, patch) {
                    v += i;
                }
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    ImageGrid::new(image_size, image_size, 1, pixels).expect("square image")
}

/// Patches whose overlap with any lesion footprint exceeds 10% of the
/// patch area, in increasing order.
pub fn lesion_patches(lesions: &[LesionSpec], image_size: usize, patch: usize) -> Vec<usize> {
    let grid = image_size / patch;
    let mut hit = vec![false; grid * grid];
    for l in lesions {
        for (i, &count) in l.patch_coverage(image_size, patch).iter().enumerate() {
            if count * 10 > patch * patch {
                hit[i] = true;
            }
        }
    }
    hit.iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(i, _)| i)
        .collect()
}

/// Ground-truth salient patches of a generated sample.
pub fn ground_truth_saliency(sample: &PairedSample) -> Vec<usize> {
    lesion_patches(&sample.lesions, sample.image.height, sample.patch_size)
}

fn sample_lesions(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<LesionSpec> {
    let grid = spec.image_size / spec.patch_size;
    let count = rng.gen_range(1..=spec.max_lesions);
    let mut kinds: Vec<LesionKind> = LesionKind::ALL[..spec.n_kinds].to_vec();
    kinds.shuffle(rng);
    let mut cells: Vec<(usize, usize)> = (1..grid - 1)
        .flat_map(|r| (1..grid - 1).map(move |c| (r, c)))
        .collect();
    cells.shuffle(rng);
    let jitter = (spec.patch_size / 4) as i32;
    let mut lesions: Vec<LesionSpec> = kinds[..count]
        .iter()
        .zip(&cells)
        .map(|(&kind, &cell)| LesionSpec {
            kind,
            cell,
            severity: *Severity::ALL.choose(rng).expect("non-empty"),
            offset: (
                rng.gen_range(-jitter..=jitter),
                rng.gen_range(-jitter..=jitter),
            ),
        })
        .collect();
    lesions.sort_by_key(|l| l.kind);
    lesions
}

/// Deterministic corpus: sample `i` draws from its own seeded stream, so the
/// output is reproducible bit-for-bit and independent of generation order.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let grid = spec.image_size / spec.patch_size;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[i as u64]));
            let normal = rng.gen::<f64>() < spec.normal_ratio;
            let lesions = if normal {
                Vec::new()
            } else {
                sample_lesions(spec, &mut rng)
            };
            let image = render_image(
                &lesions,
                spec.image_size,
                spec.patch_size,
                spec.noise_std,
                &mut rng,
            );
            PairedSample {
                id: format!("{}_{i:04}", spec.id_prefix),
                report: render_report(&lesions, grid),
                lesion_patches: lesion_patches(&lesions, spec.image_size, spec.patch_size),
                labels: ObservationLabels::from_kinds(lesions.iter().map(|l| l.kind)),
                lesions,
                image,
                patch_size: spec.patch_size,
            }
        })
        .collect();
    Ok(samples)
}

/// Rule-based observation extractor: a kind is present iff its keyword
/// appears in a sentence that does not start with "no".
pub fn extract_labels(report: &str) -> ObservationLabels {
    let lower = report.to_lowercase();
    let mut flags = [false; N_KINDS];
    for sentence in lower.split('.') {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.first() == Some(&"no") {
            continue;
        }
        for kind in LesionKind::ALL {
            if words.contains(&kind.name()) {
                flags[kind.index()] = true;
            }
        }
    }
    ObservationLabels(flags)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_samples: usize,
    pub n_abnormal: usize,
    pub per_kind: Vec<(String, usize)>,
    pub mean_lesion_patches: f64,
}

pub fn corpus_stats(records: &[CorpusRecord]) -> CorpusStats {
    let n_abnormal = records.iter().filter(|r| r.labels.count() > 0).count();
    let per_kind = LesionKind::ALL
        .iter()
        .map(|&k| {
            (
                k.name().to_string(),
                records.iter().filter(|r| r.labels.contains(k)).count(),
            )
        })
        .collect();
    let total: usize = records.iter().map(|r| r.lesion_patches.len()).sum();
    CorpusStats {
        n_samples: records.len(),
        n_abnormal,
        per_kind,
        mean_lesion_patches: if n_abnormal == 0 {
            0.0
        } else {
            total as f64 / n_abnormal as f64
        },
    }
}

/// Writes `images/<id>.sisr`, `reports/<id>.txt` and a tab-separated
/// manifest: image path, report path, label bitmask, lesion patches (`-` if none).
pub fn write_corpus(dir: &Path, manifest: &str, records: &[CorpusRecord]) -> Result<()> {
    for sub in ["images", "reports"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut lines = String::new();
    for r in records {
        let image = format!("images/{}.sisr", r.id);
        let report = format!("reports/{}.txt", r.id);
        save_tensors(&dir.join(&image), &[(r.id.clone(), r.image.to_tensor())])?;
        let rp = dir.join(&report);
        fs::write(&rp, format!("{}\n", r.report)).map_err(|e| Error::io(&rp, e))?;
        let patches = if r.lesion_patches.is_empty() {
            "-".to_string()
        } else {
            r.lesion_patches
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(
            lines,
            "{image}\t{report}\t{}\t{patches}",
            r.labels.bitmask()
        )
        .expect("string write");
    }
    let mp = dir.join(manifest);
    fs::write(&mp, lines).map_err(|e| Error::io(&mp, e))
}

pub fn read_corpus(dir: &Path, manifest: &str) -> Result<Vec<CorpusRecord>> {
    let mp = dir.join(manifest);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let bad = |what: &str| {
                Error::format("manifest", format!("{}:{}: {what}", mp.display(), n + 1))
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [image, report, mask, patches] = fields[..] else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let id = Path::new(image)
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| bad("bad image path"))?
                .to_string();
            let tensors = load_tensors(&dir.join(image))?;
            let (_, t) = tensors.first().ok_or_else(|| bad("empty image file"))?;
            let image = ImageGrid::from_tensor(t)?;
            let rp = dir.join(report);
            let report = fs::read_to_string(&rp)
                .map_err(|e| Error::io(&rp, e))?
                .trim()
                .to_string();
            let labels = ObservationLabels::from_bitmask(
                mask.parse().map_err(|_| bad("bad label bitmask"))?,
            );
            let lesion_patches = if patches == "-" {
                Vec::new()
            } else {
                patches
                    .split(',')
                    .map(|p| p.parse().map_err(|_| bad("bad patch index")))
                    .collect::<Result<_>>()?
            };
            Ok(CorpusRecord {
                id,
                image,
                report,
                labels,
                lesion_patches,
            })
        })
        .collect()
}
