use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationKind, Attributes, DatasetManifest, Image, Mask, ReferringSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub expression: String,
    pub category: String,
    pub annotation_kind: AnnotationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak_expression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Attributes>,
}

pub fn read_manifest_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads `manifest.jsonl` plus the referenced PNGs. Invariants are not
/// checked here; run [`super::validate_manifest`] on the result.
pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let records = read_manifest_records(&dir.join(MANIFEST_FILE))?;
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let img_path = dir.join(&rec.image_path);
        let rgb = image::open(&img_path)
            .map_err(|e| image_err(&img_path, e))?
            .to_rgb8();
        let (w, h) = rgb.dimensions();
        let image = Image::from_rgb8(h as usize, w as usize, rgb.as_raw())?;

        let mask_path = dir.join(&rec.mask_path);
        let gray = image::open(&mask_path)
            .map_err(|e| image_err(&mask_path, e))?
            .to_luma8();
        let (mw, mh) = gray.dimensions();
        let mask = Mask::new(mh as usize, mw as usize, gray.into_raw())?;

        samples.push(ReferringSample {
            sample_id: rec.sample_id,
            image,
            mask,
            expression: rec.expression,
            category: rec.category,
            annotation_kind: rec.annotation_kind,
            weak_expression: rec.weak_expression,
            attributes: rec.attributes,
        });
    }
    Ok(DatasetManifest::new(samples))
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for s in &manifest.samples {
        let image_rel = format!("images/{}.png", s.sample_id);
        let mask_rel = format!("masks/{}.png", s.sample_id);
        let img_path: PathBuf = dir.join(&image_rel);
        image::RgbImage::from_raw(
            s.image.width() as u32,
            s.image.height() as u32,
            s.image.to_rgb8(),
        )
        .expect("buffer sized by Image invariant")
        .save(&img_path)
        .map_err(|e| image_err(&img_path, e))?;
        let mask_path = dir.join(&mask_rel);
        image::GrayImage::from_raw(
            s.mask.width() as u32,
            s.mask.height() as u32,
            s.mask.bits().iter().map(|&b| b * 255).collect(),
        )
        .expect("buffer sized by Mask invariant")
        .save(&mask_path)
        .map_err(|e| image_err(&mask_path, e))?;

        let rec = ManifestRecord {
            sample_id: s.sample_id.clone(),
            image_path: image_rel,
            mask_path: mask_rel,
            expression: s.expression.clone(),
            category: s.category.clone(),
            annotation_kind: s.annotation_kind,
            weak_expression: s.weak_expression.clone(),
            attributes: s.attributes.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}
