use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Mask, ReferringSample};
use crate::error::{Error, Result};
use crate::model::{Network, SegmentationModel};

/// IoU thresholds of the P@X columns.
pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Integer intersection and union pixel counts of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub intersection: u64,
    pub union: u64,
}

impl PairCounts {
    pub fn new(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            inter += (p & g) as u64;
            union += (p | g) as u64;
        }
        if gt.count() == 0 {
            return Err(Error::InvalidInput("ground-truth mask is empty".into()));
        }
        Ok(Self {
            intersection: inter,
            union,
        })
    }

    pub fn iou(&self) -> f64 {
        self.intersection as f64 / self.union as f64
    }
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(PairCounts::new(pred, gt)?.iou())
}

fn nonempty(pairs: &[PairCounts]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("metric over an empty set of pairs".into()));
    }
    Ok(())
}

/// Cumulative intersection over cumulative union.
pub fn oiou(pairs: &[PairCounts]) -> Result<f64> {
    nonempty(pairs)?;
    let inter: u64 = pairs.iter().map(|p| p.intersection).sum();
    let union: u64 = pairs.iter().map(|p| p.union).sum();
    Ok(inter as f64 / union as f64)
}

/// Unweighted mean of per-sample IoU.
pub fn miou(pairs: &[PairCounts]) -> Result<f64> {
    nonempty(pairs)?;
    Ok(pairs.iter().map(PairCounts::iou).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of pairs with IoU >= `x`.
pub fn precision_at(pairs: &[PairCounts], x: f64) -> Result<f64> {
    nonempty(pairs)?;
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::InvalidInput(format!("threshold must lie in (0, 1), got {x}")));
    }
    // The quotient is correctly rounded, so a ratio equal to a decimal
    // threshold compares equal to its literal.
    let hits = pairs.iter().filter(|p| p.iou() >= x).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Split-level metrics in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub split: String,
    pub n_samples: usize,
    #[serde(rename = "P@0.5")]
    pub p50: f64,
    #[serde(rename = "P@0.6")]
    pub p60: f64,
    #[serde(rename = "P@0.7")]
    pub p70: f64,
    #[serde(rename = "P@0.8")]
    pub p80: f64,
    #[serde(rename = "P@0.9")]
    pub p90: f64,
    #[serde(rename = "oIoU")]
    pub oiou: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
}

impl MetricsReport {
    pub fn from_counts(split: &str, pairs: &[PairCounts]) -> Result<Self> {
        let p = |x| precision_at(pairs, x).map(|v| 100.0 * v);
        Ok(Self {
            split: split.to_string(),
            n_samples: pairs.len(),
            p50: p(0.5)?,
            p60: p(0.6)?,
            p70: p(0.7)?,
            p80: p(0.8)?,
            p90: p(0.9)?,
            oiou: 100.0 * oiou(pairs)?,
            miou: 100.0 * miou(pairs)?,
        })
    }

    /// Values in table column order.
    pub fn columns(&self) -> [f64; 7] {
        [self.p50, self.p60, self.p70, self.p80, self.p90, self.oiou, self.miou]
    }
}

pub const TABLE_COLUMNS: [&str; 7] = ["P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "oIoU", "mIoU"];

/// Aligned text table with one row per labelled report.
pub fn format_table(key: &str, rows: &[(String, &MetricsReport)]) -> String {
    let key_w = rows
        .iter()
        .map(|(k, _)| k.len())
        .chain([key.len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "{key:<key_w$}");
    for c in TABLE_COLUMNS {
        let _ = write!(out, " | {c:>6}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(key_w + TABLE_COLUMNS.len() * 9));
    for (k, r) in rows {
        let _ = write!(out, "{k:<key_w$}");
        for v in r.columns() {
            let _ = write!(out, " | {v:>6.2}");
        }
        out.push('\n');
    }
    out
}

/// Anything that maps a sample to per-pixel logits.
pub trait Segmenter {
    fn logits(&self, sample: &ReferringSample) -> Result<Vec<f64>>;
}

/// Scores a network with each sample's own expression.
impl Segmenter for Network {
    fn logits(&self, sample: &ReferringSample) -> Result<Vec<f64>> {
        let r = self.referring_embedding(&sample.expression)?;
        self.forward(&sample.image, &r)
    }
}

/// Returns `+margin` on ground-truth pixels and `-margin` elsewhere.
pub struct OracleSegmenter {
    pub margin: f64,
}

impl Segmenter for OracleSegmenter {
    fn logits(&self, sample: &ReferringSample) -> Result<Vec<f64>> {
        Ok(sample
            .mask
            .bits()
            .iter()
            .map(|&b| if b == 1 { self.margin } else { -self.margin })
            .collect())
    }
}

/// Predicts background everywhere.
pub struct EmptySegmenter;

impl Segmenter for EmptySegmenter {
    fn logits(&self, sample: &ReferringSample) -> Result<Vec<f64>> {
        Ok(vec![-1.0; sample.mask.bits().len()])
    }
}

/// Per-sample counts after thresholding logits at `threshold`.
pub fn evaluate_counts(model: &dyn Segmenter, samples: &[ReferringSample], threshold: f64) -> Result<Vec<PairCounts>> {
    samples
        .iter()
        .map(|s| {
            let logits = model.logits(s)?;
            let pred = Mask::from_logits(s.mask.height(), s.mask.width(), &logits, threshold)?;
            PairCounts::new(&pred, &s.mask)
        })
        .collect()
}

/// Evaluates with the samples' stored expressions; pass accurate expressions.
pub fn evaluate(model: &dyn Segmenter, samples: &[ReferringSample], split: &str, threshold: f64) -> Result<MetricsReport> {
    MetricsReport::from_counts(split, &evaluate_counts(model, samples, threshold)?)
}
