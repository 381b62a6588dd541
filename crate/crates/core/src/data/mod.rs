//! Referring-segmentation samples, manifests on disk, synthetic scenes and
//! category-stratified accurate/weak splits.

mod io;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_manifest_records, write_dataset, ManifestRecord};
pub use split::{stratified_split, Split, SplitFile, SplitSpec, BENCHMARK_RATIOS};
pub use synthetic::{
    generate_synthetic, make_weak_expression, recorrupt, ShapeClass, SyntheticSceneConfig,
    DEFAULT_CLASSES, DEFAULT_COLORS, QUADRANTS,
};

/// RGB image, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// Binary mask, row-major `H x W`, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits: bits.into_iter().map(|b| u8::from(b != 0)).collect(),
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    /// Foreground wherever `logits > threshold`.
    pub fn from_logits(height: usize, width: usize, logits: &[f64], threshold: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            logits.iter().map(|&z| u8::from(z > threshold)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Accurate,
    Weak,
}

/// Attributes that disambiguate a synthetic target from its distractors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub color: String,
    pub quadrant: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferringSample {
    pub sample_id: String,
    pub image: Image,
    pub mask: Mask,
    pub expression: String,
    pub category: String,
    pub annotation_kind: AnnotationKind,
    /// The weak form of the expression this sample takes when it lands in the
    /// weak subset. `None` means the bare class name.
    pub weak_expression: Option<String>,
    pub attributes: Option<Attributes>,
}

impl ReferringSample {
    /// The text this sample carries when demoted to a weak annotation.
    pub fn weak_text(&self) -> String {
        self.weak_expression
            .clone()
            .unwrap_or_else(|| default_weak_expression(&self.category))
    }

    /// Copy with the weak text installed as the expression.
    pub fn to_weak(&self) -> Self {
        Self {
            expression: self.weak_text(),
            annotation_kind: AnnotationKind::Weak,
            ..self.clone()
        }
    }
}

/// Default class-name mapping: the lower-cased class name.
pub fn default_weak_expression(category: &str) -> String {
    category.trim().to_lowercase()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<ReferringSample>,
    pub categories: BTreeSet<String>,
    pub n_accurate: usize,
    pub n_weak: usize,
}

impl DatasetManifest {
    /// Builds a manifest whose categories and counts are derived from the samples.
    pub fn new(samples: Vec<ReferringSample>) -> Self {
        let categories = samples.iter().map(|s| s.category.clone()).collect();
        let n_weak = samples
            .iter()
            .filter(|s| s.annotation_kind == AnnotationKind::Weak)
            .count();
        Self {
            n_accurate: samples.len() - n_weak,
            n_weak,
            categories,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&ReferringSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Hex SHA-256 over ids, texts, pixels and masks in sample order.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let text = |h: &mut Sha256, s: &str| {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        };
        for s in &self.samples {
            text(&mut h, &s.sample_id);
            text(&mut h, &s.expression);
            text(&mut h, &s.category);
            text(&mut h, &s.weak_text());
            h.update([s.annotation_kind as u8]);
            h.update((s.image.height() as u64).to_le_bytes());
            h.update((s.image.width() as u64).to_le_bytes());
            for v in s.image.pixels() {
                h.update(v.to_le_bytes());
            }
            h.update(s.mask.bits());
        }
        hex::encode(h.finalize())
    }

    pub fn category_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> =
            self.categories.iter().map(|c| (c.as_str(), 0)).collect();
        for s in &self.samples {
            *counts.entry(s.category.as_str()).or_default() += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyMask,
    ShapeMismatch,
    PixelOutOfRange,
    EmptyExpression,
    DuplicateId,
    UnknownCategory,
    WeakExpressionMismatch,
    CountMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Empty for manifest-level violations.
    pub sample_id: String,
    pub rule: Rule,
}

/// Checks every sample and manifest invariant; one record per breach.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |id: &str, rule| {
        out.push(Violation {
            sample_id: id.to_string(),
            rule,
        })
    };
    for s in &manifest.samples {
        let id = s.sample_id.as_str();
        if !seen.insert(id) {
            push(id, Rule::DuplicateId);
        }
        if s.mask.count() == 0 {
            push(id, Rule::EmptyMask);
        }
        if s.image.height() != s.mask.height() || s.image.width() != s.mask.width() {
            push(id, Rule::ShapeMismatch);
        }
        if s.image.pixels().iter().any(|v| !(0.0..=1.0).contains(v)) {
            push(id, Rule::PixelOutOfRange);
        }
        if s.expression.trim().is_empty() {
            push(id, Rule::EmptyExpression);
        }
        if !manifest.categories.contains(&s.category) {
            push(id, Rule::UnknownCategory);
        }
        if s.annotation_kind == AnnotationKind::Weak && s.expression != s.weak_text() {
            push(id, Rule::WeakExpressionMismatch);
        }
    }
    let n_weak = manifest
        .samples
        .iter()
        .filter(|s| s.annotation_kind == AnnotationKind::Weak)
        .count();
    if manifest.n_weak != n_weak || manifest.n_accurate + manifest.n_weak != manifest.samples.len() {
        push("", Rule::CountMismatch);
    }
    out
}
