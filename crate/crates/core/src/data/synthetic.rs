//! Procedural scenes of colored shapes with exactly one referred target.
//!
//! Each sample draws from its own random stream (derived from the scene seed
//! and the sample index), so the first `k` samples of a run do not depend on
//! how many samples were requested. The weak expression uses a second,
//! independent stream; changing the corruption level therefore leaves pixels
//! and masks untouched, and the set of dropped attributes grows monotonically
//! with `q`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    default_weak_expression, AnnotationKind, Attributes, DatasetManifest, Image, Mask,
    ReferringSample,
};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_CLASSES: [&str; 5] = ["circle", "square", "triangle", "cross", "bar"];
pub const DEFAULT_COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const QUADRANTS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];

const MAX_PLACEMENT_TRIES: usize = 200;
const STREAM_SCENE: u64 = 1;
const STREAM_WEAK: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Bar,
}

impl ShapeClass {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "circle" => Some(Self::Circle),
            "square" => Some(Self::Square),
            "triangle" => Some(Self::Triangle),
            "cross" => Some(Self::Cross),
            "bar" => Some(Self::Bar),
            _ => None,
        }
    }

    /// Whether the pixel centred at `(px, py)` lies inside a shape of
    /// half-extent `s` centred at `(cx, cy)`.
    fn contains(self, cx: f64, cy: f64, s: f64, px: f64, py: f64) -> bool {
        let dx = px - cx;
        let dy = py - cy;
        match self {
            Self::Circle => dx * dx + dy * dy <= s * s,
            Self::Square => dx.abs() <= 0.8 * s && dy.abs() <= 0.8 * s,
            Self::Triangle => {
                // apex up, base at cy + s
                let t = (dy + s) / (2.0 * s);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * s
            }
            Self::Cross => {
                let arm = (s / 3.0).max(1.0);
                (dx.abs() <= arm && dy.abs() <= s) || (dy.abs() <= arm && dx.abs() <= s)
            }
            Self::Bar => dx.abs() <= s && dy.abs() <= (s / 3.0).max(1.0),
        }
    }
}

fn palette(name: &str) -> Option<[u8; 3]> {
    Some(match name {
        "red" => [220, 40, 40],
        "green" => [40, 190, 70],
        "blue" => [50, 90, 230],
        "yellow" => [230, 215, 40],
        "purple" => [160, 60, 200],
        "orange" => [245, 140, 30],
        "white" => [235, 235, 235],
        "cyan" => [40, 210, 220],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub grid_size: usize,
    pub classes: Vec<String>,
    pub colors: Vec<String>,
    pub max_instances: usize,
    /// Probability that each attribute is dropped from the weak expression.
    pub corruption: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            grid_size: 48,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            colors: DEFAULT_COLORS.iter().map(|s| s.to_string()).collect(),
            max_instances: 4,
            corruption: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 16 {
            return Err(Error::Config(format!(
                "grid_size must be >= 16, got {}",
                self.grid_size
            )));
        }
        if self.grid_size % 4 != 0 {
            return Err(Error::Config(format!(
                "grid_size must be a multiple of 4, got {}",
                self.grid_size
            )));
        }
        if self.max_instances < 1 {
            return Err(Error::Config("max_instances must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(Error::Config(format!(
                "corruption must lie in [0, 1], got {}",
                self.corruption
            )));
        }
        if self.classes.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("classes and colors must be nonempty".into()));
        }
        for c in &self.classes {
            if ShapeClass::parse(c).is_none() {
                return Err(Error::Config(format!("unknown shape class `{c}`")));
            }
        }
        for c in &self.colors {
            if palette(c).is_none() {
                return Err(Error::Config(format!("unknown color `{c}`")));
            }
        }
        Ok(())
    }
}

/// Maps a class name to a weak expression.
///
/// Without attributes this is the lower-cased class name. With attributes,
/// each of color and quadrant is dropped independently with probability `q`
/// (one uniform draw per attribute, color first) and the survivors are placed
/// in the accurate template, so `q = 0` reproduces the accurate expression and
/// `q = 1` yields the bare class name.
pub fn make_weak_expression<R: Rng + ?Sized>(
    category: &str,
    q: f64,
    attributes: Option<&Attributes>,
    rng: &mut R,
) -> String {
    let class = default_weak_expression(category);
    let Some(attrs) = attributes else {
        return class;
    };
    let keep_color = rng.gen::<f64>() >= q;
    let keep_quadrant = rng.gen::<f64>() >= q;
    match (keep_color, keep_quadrant) {
        (true, true) => format!("the {} {class} in the {}", attrs.color, attrs.quadrant),
        (true, false) => format!("the {} {class}", attrs.color),
        (false, true) => format!("the {class} in the {}", attrs.quadrant),
        (false, false) => class,
    }
}

pub(crate) fn accurate_expression(class: &str, attrs: &Attributes) -> String {
    format!("the {} {class} in the {}", attrs.color, attrs.quadrant)
}

fn quadrant(cx: f64, cy: f64, grid: usize) -> &'static str {
    let half = grid as f64 / 2.0;
    match (cy < half, cx < half) {
        (true, true) => QUADRANTS[0],
        (true, false) => QUADRANTS[1],
        (false, true) => QUADRANTS[2],
        (false, false) => QUADRANTS[3],
    }
}

struct Placed {
    class_idx: usize,
    color_idx: usize,
    cx: f64,
    cy: f64,
    half: f64,
    quadrant: &'static str,
}

impl Placed {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.half - 1.0,
            self.cy - self.half - 1.0,
            self.cx + self.half + 1.0,
            self.cy + self.half + 1.0,
        )
    }

    fn overlaps(&self, other: &Placed) -> bool {
        let (ax0, ay0, ax1, ay1) = self.bbox();
        let (bx0, by0, bx1, by1) = other.bbox();
        ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1
    }
}

fn weak_for(config: &SyntheticSceneConfig, index: usize, category: &str, attrs: &Attributes) -> String {
    let mut wrng = rng::stream(config.seed, &[STREAM_WEAK, index as u64]);
    make_weak_expression(category, config.corruption, Some(attrs), &mut wrng)
}

fn generation_error(config: &SyntheticSceneConfig, index: usize, reason: &str) -> Error {
    Error::Generation {
        seed: config.seed,
        index,
        reason: reason.to_string(),
    }
}

/// Places the target (first entry) and its distractors.
fn place_instances<R: Rng>(config: &SyntheticSceneConfig, index: usize, r: &mut R) -> Result<Vec<Placed>> {
    let g = config.grid_size;

    let min_half = (g as f64 / 12.0).max(3.0);
    let max_half = (g as f64 / 7.0).max(min_half + 1.0);
    let n_inst = r.gen_range(1..=config.max_instances);
    let mut placed: Vec<Placed> = Vec::with_capacity(n_inst);

    'instances: for k in 0..n_inst {
        let mut crowded = 0usize;
        let mut ambiguous = 0usize;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let class_idx = if k > 0 && r.gen_bool(0.5) {
                placed[0].class_idx
            } else {
                r.gen_range(0..config.classes.len())
            };
            let color_idx = r.gen_range(0..config.colors.len());
            let half = r.gen_range(min_half..max_half).floor();
            let lo = half + 1.0;
            let hi = g as f64 - half - 2.0;
            if hi <= lo {
                crowded += 1;
                continue;
            }
            let cx = r.gen_range(lo..hi).floor() + 0.5;
            let cy = r.gen_range(lo..hi).floor() + 0.5;
            let cand = Placed {
                class_idx,
                color_idx,
                cx,
                cy,
                half,
                quadrant: quadrant(cx, cy, g),
            };
            if placed.iter().any(|p| p.overlaps(&cand)) {
                crowded += 1;
                continue;
            }
            if k > 0 {
                let t = &placed[0];
                if t.class_idx == cand.class_idx
                    && t.color_idx == cand.color_idx
                    && t.quadrant == cand.quadrant
                {
                    ambiguous += 1;
                    continue;
                }
            }
            placed.push(cand);
            continue 'instances;
        }
        if k == 0 {
            return Err(generation_error(config, index, "could not place target"));
        }
        if crowded == 0 && ambiguous > 0 {
            return Err(generation_error(
                config,
                index,
                "every distractor candidate duplicated the target's description",
            ));
        }
        // Out of room: the scene keeps the instances placed so far.
        break;
    }
    Ok(placed)
}

fn generate_one(config: &SyntheticSceneConfig, index: usize) -> Result<ReferringSample> {
    let g = config.grid_size;
    let mut r = rng::stream(config.seed, &[STREAM_SCENE, index as u64]);
    let placed = place_instances(config, index, &mut r)?;

    let base = r.gen_range(20u8..=60);
    let mut rgb = vec![0u8; g * g * 3];
    for px in rgb.chunks_mut(3) {
        let noise = r.gen_range(-8i16..=8);
        let v = (base as i16 + noise).clamp(0, 255) as u8;
        px.copy_from_slice(&[v, v, v]);
    }
    let mut mask = Mask::zeros(g, g);
    for (k, p) in placed.iter().enumerate() {
        let class = ShapeClass::parse(&config.classes[p.class_idx]).expect("validated class");
        let color = palette(&config.colors[p.color_idx]).expect("validated color");
        for y in 0..g {
            for x in 0..g {
                if class.contains(p.cx, p.cy, p.half, x as f64 + 0.5, y as f64 + 0.5) {
                    let o = (y * g + x) * 3;
                    for c in 0..3 {
                        let noise = r.gen_range(-10i16..=10);
                        rgb[o + c] = (color[c] as i16 + noise).clamp(0, 255) as u8;
                    }
                    if k == 0 {
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }
    if mask.count() == 0 {
        return Err(generation_error(config, index, "target rasterized to an empty mask"));
    }

    let target = &placed[0];
    let category = config.classes[target.class_idx].clone();
    let attrs = Attributes {
        color: config.colors[target.color_idx].clone(),
        quadrant: target.quadrant.to_string(),
    };
    Ok(ReferringSample {
        sample_id: format!("syn{}-{index:05}", config.seed),
        image: Image::from_rgb8(g, g, &rgb)?,
        mask,
        expression: accurate_expression(&category, &attrs),
        weak_expression: Some(weak_for(config, index, &category, &attrs)),
        category,
        annotation_kind: AnnotationKind::Accurate,
        attributes: Some(attrs),
    })
}

/// Generates `n` accurate-annotated scenes. Fully determined by `config`.
pub fn generate_synthetic(config: &SyntheticSceneConfig, n: usize) -> Result<DatasetManifest> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    let samples = (0..n)
        .map(|i| generate_one(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest::new(samples))
}

/// Re-derives every sample's weak expression at corruption level `q`, keeping
/// pixels, masks and accurate expressions. Sample `i` must be the `i`-th
/// sample generated from `config`.
pub fn recorrupt(manifest: &DatasetManifest, config: &SyntheticSceneConfig, q: f64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("corruption must lie in [0, 1], got {q}")));
    }
    let cfg = SyntheticSceneConfig {
        corruption: q,
        ..config.clone()
    };
    let samples = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s.clone();
            if let Some(attrs) = &s.attributes {
                s.weak_expression = Some(weak_for(&cfg, i, &s.category, attrs));
            }
            s
        })
        .collect();
    Ok(DatasetManifest::new(samples))
}
