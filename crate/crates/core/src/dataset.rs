//! Sample manifests, synthetic dataset generation and loading.
//!
//! A manifest is a text file with `#`-prefixed header lines and one line per sample:
//!
//! ```text
//! # classes 4
//! # width 20
//! images/0000.png scribbles/0000.png full/0000.png 1234567
//! ```
//!
//! Paths are relative to the manifest's directory; the last field is the sample seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::annotation::{propagate_scribbles, synth_scene, synth_scribbles, SceneSpec};
use crate::error::{Error, Result};
use crate::io::{load_image, load_mask, save_image, save_mask};
use crate::superpixels::oversegment;
use crate::types::{Image, LabelMask};

pub const MANIFEST_NAME: &str = "manifest.txt";
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub scribbles: PathBuf,
    pub full: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub class_count: usize,
    /// Scribble width the samples were drawn with, when known.
    pub scribble_width: Option<usize>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut class_count = None;
        let mut scribble_width = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let mut parts = header.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("classes"), Some(v)) => {
                        class_count = Some(v.parse().map_err(|_| bad(i + 1, format!("bad class count {v:?}")))?)
                    }
                    (Some("width"), Some(v)) => {
                        scribble_width = Some(v.parse().map_err(|_| bad(i + 1, format!("bad width {v:?}")))?)
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [image, scribbles, full, seed] = fields[..] else {
                return Err(bad(i + 1, format!("expected 4 fields, found {}", fields.len())));
            };
            entries.push(ManifestEntry {
                image: image.into(),
                scribbles: scribbles.into(),
                full: full.into(),
                seed: seed.parse().map_err(|_| bad(i + 1, format!("bad seed {seed:?}")))?,
            });
        }
        let class_count = class_count.ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            message: "missing '# classes <C>' header".into(),
        })?;
        if !(2..=255).contains(&class_count) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!("class count {class_count} outside 2..=255"),
            });
        }
        if entries.is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: "no samples".into(),
            });
        }
        Ok(Self {
            class_count,
            scribble_width,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn render(&self) -> String {
        let mut out = format!("# classes {}\n", self.class_count);
        if let Some(w) = self.scribble_width {
            let _ = writeln!(out, "# width {w}");
        }
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                e.image.display(),
                e.scribbles.display(),
                e.full.display(),
                e.seed
            );
        }
        out
    }
}

/// Finds the manifest for a data argument: either the manifest file itself or a directory holding one.
pub fn resolve_manifest(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub scribbles: LabelMask,
    pub full: LabelMask,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    pub scribble_width: Option<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every sample of a manifest (or of the manifest inside a directory) and checks consistency.
    pub fn load(data: &Path) -> Result<Self> {
        let path = resolve_manifest(data);
        let manifest = Manifest::load(&path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let image = load_image(base.join(&e.image))?;
            let scribbles = load_mask(base.join(&e.scribbles), manifest.class_count)?;
            let full = load_mask(base.join(&e.full), manifest.class_count)?;
            let (h, w) = (image.height(), image.width());
            if !scribbles.same_size(h, w) || !full.same_size(h, w) {
                return Err(Error::Manifest {
                    path: path.clone(),
                    message: format!("masks of {} do not match the image size", e.image.display()),
                });
            }
            if !full.is_fully_labelled() {
                return Err(Error::Manifest {
                    path: path.clone(),
                    message: format!("full mask {} has unlabelled pixels", e.full.display()),
                });
            }
            samples.push(Sample {
                image,
                scribbles,
                full,
                seed: e.seed,
            });
        }
        Ok(Self {
            class_count: manifest.class_count,
            scribble_width: manifest.scribble_width,
            samples,
        })
    }

    /// Image size shared by all samples.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = &self.samples.first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?.image;
        let size = (first.height(), first.width());
        if self
            .samples
            .iter()
            .any(|s| (s.image.height(), s.image.width()) != size)
        {
            return Err(Error::DimensionMismatch("samples have different image sizes".into()));
        }
        Ok(size)
    }
}

/// Scribble-to-superpixel pseudo-mask of one sample; `superpixels` is the requested segment count.
pub fn pseudo_mask(sample: &Sample, superpixels: usize) -> Result<LabelMask> {
    let map = oversegment(&sample.image, superpixels, sample.seed)?;
    propagate_scribbles(&sample.scribbles, &map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub scene: SceneSpec,
    pub count: usize,
    pub scribble_width: usize,
    pub seed: u64,
}

/// Mixes a base seed with a sample index and attempt number.
fn sample_seed(base: u64, index: u64, attempt: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene and scribbles of one sample seed, or `None` if a class is missing or cannot host a scribble.
pub fn synth_sample(scene: &SceneSpec, scribble_width: usize, seed: u64) -> Result<Option<Sample>> {
    let (image, full) = synth_scene(scene, seed)?;
    if full.class_histogram().contains(&0) {
        return Ok(None);
    }
    match synth_scribbles(&full, scribble_width, seed ^ 0x5C81_BB1E) {
        Ok(scribbles) => Ok(Some(Sample {
            image,
            scribbles,
            full,
            seed,
        })),
        Err(Error::RegionTooSmall { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Generates `count` samples in memory. Every class appears in every sample.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count as u64 {
        let mut found = None;
        for attempt in 0..MAX_ATTEMPTS {
            if let Some(s) = synth_sample(&spec.scene, spec.scribble_width, sample_seed(spec.seed, i, attempt))? {
                found = Some(s);
                break;
            }
        }
        samples.push(found.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "could not place every class with room for width-{} scribbles in {MAX_ATTEMPTS} attempts",
                spec.scribble_width
            ))
        })?);
    }
    Ok(Dataset {
        class_count: spec.scene.class_count,
        scribble_width: Some(spec.scribble_width),
        samples,
    })
}

/// Writes a dataset as PNG triples plus a manifest under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    for sub in ["images", "scribbles", "full"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = format!("{i:04}.png");
        let entry = ManifestEntry {
            image: Path::new("images").join(&name),
            scribbles: Path::new("scribbles").join(&name),
            full: Path::new("full").join(&name),
            seed: s.seed,
        };
        save_image(dir.join(&entry.image), &s.image)?;
        save_mask(dir.join(&entry.scribbles), &s.scribbles)?;
        save_mask(dir.join(&entry.full), &s.full)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        class_count: dataset.class_count,
        scribble_width: dataset.scribble_width,
        entries,
    };
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
