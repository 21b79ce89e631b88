// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bias and preservation metrics.
//!
//! - biasedness `ψ = |r_ideal − r| / r_ideal` with `r_ideal = 1/L`,
//! - deviation of ratios `ξ = mean_p |δ_method − δ_base|` with the signed
//!   `δ = (r_ideal − r) / r_ideal`,
//! - average pixel shift: mean Euclidean distance between same-seed images.
//!
//! Counts come from an oracle; this module is arithmetic only.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Six race categories used for intersectional grids.
pub const RACE_CATEGORIES: [&str; 6] = ["Indian", "Asian", "African", "European", "Latino", "Middle Eastern"];

/// An attribute and its categories (`L ≥ 2`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AttributeSpecFile")]
pub struct AttributeSpec {
    name: String,
    categories: Vec<String>,
    classification_prompts: Vec<String>,
}

#[derive(Deserialize)]
struct AttributeSpecFile {
    name: String,
    categories: Vec<String>,
    #[serde(default)]
    classification_prompts: Option<Vec<String>>,
}

impl TryFrom<AttributeSpecFile> for AttributeSpec {
    type Error = Error;

    fn try_from(f: AttributeSpecFile) -> Result<Self> {
        match f.classification_prompts {
            Some(prompts) => AttributeSpec::new(f.name, f.categories, prompts),
            None => AttributeSpec::with_default_prompts(f.name, f.categories),
        }
    }
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, categories: Vec<String>, classification_prompts: Vec<String>) -> Result<Self> {
        let name = name.into();
        if categories.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "attribute `{name}` needs at least 2 categories, got {}",
                categories.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = categories.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "attribute `{name}`: duplicate category `{dup}`"
            )));
        }
        if classification_prompts.len() != categories.len() {
            return Err(Error::InvalidArgument(format!(
                "attribute `{name}`: {} classification prompts for {} categories",
                classification_prompts.len(),
                categories.len()
            )));
        }
        Ok(Self {
            name,
            categories,
            classification_prompts,
        })
    }

    /// Classification prompts `"a photo of a {category} person"`.
    pub fn with_default_prompts(name: impl Into<String>, categories: Vec<String>) -> Result<Self> {
        let prompts = categories.iter().map(|c| format!("a photo of a {c} person")).collect();
        Self::new(name, categories, prompts)
    }

    pub fn gender() -> Self {
        Self::with_default_prompts("gender", vec!["female".into(), "male".into()]).expect("static spec")
    }

    pub fn race() -> Self {
        Self::with_default_prompts("race", RACE_CATEGORIES.iter().map(|s| s.to_string()).collect())
            .expect("static spec")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn classification_prompts(&self) -> &[String] {
        &self.classification_prompts
    }

    /// Number of categories `L`.
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// `1 / L`.
    pub fn ideal_ratio(&self) -> f64 {
        1.0 / self.len() as f64
    }
}

/// Category counts from one oracle query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RatioReportFile")]
pub struct RatioReport {
    spec: AttributeSpec,
    counts: Vec<u64>,
    n_total: u64,
    ratios: Vec<f64>,
}

#[derive(Deserialize)]
struct RatioReportFile {
    spec: AttributeSpec,
    counts: Vec<u64>,
}

impl TryFrom<RatioReportFile> for RatioReport {
    type Error = Error;

    fn try_from(f: RatioReportFile) -> Result<Self> {
        RatioReport::from_counts(f.spec, f.counts)
    }
}

impl RatioReport {
    pub fn from_counts(spec: AttributeSpec, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != spec.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} counts for {} categories of `{}`",
                counts.len(),
                spec.len(),
                spec.name
            )));
        }
        let n_total: u64 = counts.iter().sum();
        if n_total == 0 {
            return Err(Error::InvalidArgument("ratio report has n_total = 0".into()));
        }
        let ratios = counts.iter().map(|&c| c as f64 / n_total as f64).collect();
        Ok(Self {
            spec,
            counts,
            n_total,
            ratios,
        })
    }

    pub fn spec(&self) -> &AttributeSpec {
        &self.spec
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    fn ratio(&self, category_index: usize) -> Result<f64> {
        if self.n_total == 0 {
            return Err(Error::InvalidArgument("ratio report has n_total = 0".into()));
        }
        self.ratios.get(category_index).copied().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "category index {category_index} out of range for L = {}",
                self.spec.len()
            ))
        })
    }

    /// Signed deviation `(r_ideal − r) / r_ideal`.
    pub fn signed_deviation(&self, category_index: usize) -> Result<f64> {
        let ideal = self.spec.ideal_ratio();
        Ok((ideal - self.ratio(category_index)?) / ideal)
    }
}

/// `ψ` for one category; in `[0, L − 1]`.
pub fn biasedness(report: &RatioReport, category_index: usize) -> Result<f64> {
    let ideal = report.spec.ideal_ratio();
    Ok((ideal - report.ratio(category_index)?).abs() / ideal)
}

/// `ψ` for every category.
pub fn biasedness_per_category(report: &RatioReport) -> Vec<f64> {
    (0..report.spec.len())
        .map(|i| biasedness(report, i).expect("index in range"))
        .collect()
}

/// Largest `ψ` over categories; the calibration stopping statistic.
pub fn worst_biasedness(report: &RatioReport) -> f64 {
    biasedness_per_category(report).into_iter().fold(0.0, f64::max)
}

/// `ξ` over a preservation set of `(method, baseline)` report pairs.
pub fn ratio_deviation(preserved: &[(RatioReport, RatioReport)], category_index: usize) -> Result<f64> {
    if preserved.is_empty() {
        return Err(Error::Empty("preservation set is empty".into()));
    }
    let mut total = 0.0;
    for (i, (method, baseline)) in preserved.iter().enumerate() {
        if method.spec != baseline.spec {
            return Err(Error::InvalidArgument(format!(
                "preserved concept {i}: method spec `{}` differs from baseline spec `{}`",
                method.spec.name, baseline.spec.name
            )));
        }
        total += (method.signed_deviation(category_index)? - baseline.signed_deviation(category_index)?).abs();
    }
    Ok(total / preserved.len() as f64)
}

/// An `H × W × C` image in `f32` (RGB, values in `[0, 255]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let numel = shape.iter().product::<usize>();
        if numel != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "image shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Decodes a PNG to RGB.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(f32::from).collect();
        Self::new([h as usize, w as usize, 3], data)
    }

    /// Reads a raw little-endian `f32` blob of the given shape.
    pub fn load_raw(path: impl AsRef<Path>, shape: [usize; 3]) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Image(format!(
                "{}: length is not a multiple of 4",
                path.display()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(shape, data)
    }
}

/// Same-seed images from the base and the edited model.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub baseline: Image,
    pub edited: Image,
    pub seed: u64,
}

/// Mean over pairs of `‖baseline − edited‖₂` on flattened pixels.
pub fn average_pixel_shift(pairs: &[ImagePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no image pairs".into()));
    }
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        if p.baseline.shape != p.edited.shape {
            return Err(Error::DimensionMismatch(format!(
                "image pair {i} (seed {}): baseline {:?} vs edited {:?}",
                p.seed, p.baseline.shape, p.edited.shape
            )));
        }
        let sq: f64 = p
            .baseline
            .data
            .iter()
            .zip(&p.edited.data)
            .map(|(a, b)| {
                let diff = f64::from(*a) - f64::from(*b);
                diff * diff
            })
            .sum();
        total += sq.sqrt();
    }
    Ok(total / pairs.len() as f64)
}

/// Manifest listing image pairs. Paths ending in `.png` are decoded as PNG;
/// anything else is a raw `f32` blob of `shape`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageManifest {
    #[serde(default)]
    pub shape: Option<[usize; 3]>,
    pub pairs: Vec<ImageManifestPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageManifestPair {
    pub baseline: String,
    pub edited: String,
    #[serde(default)]
    pub seed: u64,
}

fn load_image(base: &Path, name: &str, shape: Option<[usize; 3]>) -> Result<Image> {
    let path: PathBuf = base.join(name);
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        Image::load_png(&path)
    } else {
        let shape = shape
            .ok_or_else(|| Error::InvalidArgument(format!("raw image `{name}` needs a `shape` in the manifest")))?;
        Image::load_raw(&path, shape)
    }
}

pub fn load_image_pairs(manifest_path: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ImageManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest
        .pairs
        .iter()
        .map(|p| {
            Ok(ImagePair {
                baseline: load_image(&base, &p.baseline, manifest.shape)?,
                edited: load_image(&base, &p.edited, manifest.shape)?,
                seed: p.seed,
            })
        })
        .collect()
}

/// JSON record emitted for each computed metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub spec: Option<AttributeSpec>,
}
