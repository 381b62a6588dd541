//! Minimal PNG charts: polylines and bars on a white canvas, no text.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use wrel_core::ablation::AblationReport;
use wrel_core::theory::BoundProbeReport;
use wrel_core::train::EpochRecord;

const W: u32 = 640;
const H: u32 = 360;
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const ORANGE: Rgb<u8> = Rgb([255, 127, 14]);
const GREY: Rgb<u8> = Rgb([90, 90, 90]);
const LIGHT: Rgb<u8> = Rgb([220, 220, 220]);

#[derive(Clone, Copy)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, c);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn fill(img: &mut RgbImage, r: Rect, c: Rgb<u8>) {
    for y in r.y0.max(0)..r.y1.min(img.height() as i64) {
        for x in r.x0.max(0)..r.x1.min(img.width() as i64) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

fn frame(img: &mut RgbImage, r: Rect) {
    line(img, (r.x0, r.y1), (r.x1, r.y1), GREY);
    line(img, (r.x0, r.y0), (r.x0, r.y1), GREY);
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Draws every series into `r`, sharing one auto-scaled pair of axes.
fn series_panel(img: &mut RgbImage, r: Rect, series: &[(Vec<(f64, f64)>, Rgb<u8>)]) {
    frame(img, r);
    let (xlo, xhi) = range(series.iter().flat_map(|(s, _)| s.iter().map(|p| p.0)));
    let (ylo, yhi) = range(series.iter().flat_map(|(s, _)| s.iter().map(|p| p.1)));
    if ylo < 0.0 && yhi > 0.0 {
        let zero = r.y1 - (((0.0 - ylo) / (yhi - ylo)) * (r.y1 - r.y0) as f64) as i64;
        line(img, (r.x0, zero), (r.x1, zero), LIGHT);
    }
    let to_px = |(x, y): (f64, f64)| {
        (
            r.x0 + ((x - xlo) / (xhi - xlo) * (r.x1 - r.x0) as f64).round() as i64,
            r.y1 - ((y - ylo) / (yhi - ylo) * (r.y1 - r.y0) as f64).round() as i64,
        )
    };
    for (pts, c) in series {
        let px: Vec<(i64, i64)> = pts.iter().filter(|p| p.1.is_finite()).map(|&p| to_px(p)).collect();
        for w in px.windows(2) {
            line(img, w[0], w[1], *c);
        }
        for &(x, y) in &px {
            fill(img, Rect { x0: x - 2, y0: y - 2, x1: x + 3, y1: y + 3 }, *c);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn canvas() -> RgbImage {
    RgbImage::from_pixel(W, H, Rgb([255, 255, 255]))
}

const TOP: Rect = Rect { x0: 40, y0: 20, x1: 620, y1: 165 };
const BOTTOM: Rect = Rect { x0: 40, y0: 195, x1: 620, y1: 340 };

/// Top: training loss per epoch. Bottom: validation mIoU (student blue,
/// teacher orange) when recorded.
pub fn training_curves(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut img = canvas();
    let loss: Vec<(f64, f64)> = records.iter().enumerate().map(|(i, r)| (i as f64, r.train_loss)).collect();
    series_panel(&mut img, TOP, &[(loss, BLUE)]);
    let student: Vec<(f64, f64)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.val_student.as_ref().map(|m| (i as f64, m.miou)))
        .collect();
    let teacher: Vec<(f64, f64)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.val_teacher.as_ref().map(|m| (i as f64, m.miou)))
        .collect();
    series_panel(&mut img, BOTTOM, &[(student, BLUE), (teacher, ORANGE)]);
    save(&img, path)
}

/// mIoU (blue) and oIoU (orange) per knob value on a 0..100 scale.
pub fn ablation_bars(report: &AblationReport, path: &Path) -> Result<()> {
    let mut img = canvas();
    let r = Rect { x0: 40, y0: 20, x1: 620, y1: 340 };
    frame(&mut img, r);
    let n = report.rows.len().max(1) as i64;
    let slot = (r.x1 - r.x0) / n;
    for (i, row) in report.rows.iter().enumerate() {
        let Some(m) = &row.report else { continue };
        let x = r.x0 + i as i64 * slot + slot / 6;
        let bw = slot / 3;
        for (j, (v, c)) in [(m.miou, BLUE), (m.oiou, ORANGE)].into_iter().enumerate() {
            let top = r.y1 - ((v / 100.0).clamp(0.0, 1.0) * (r.y1 - r.y0) as f64) as i64;
            let x0 = x + j as i64 * bw;
            fill(&mut img, Rect { x0, y0: top, x1: x0 + bw - 2, y1: r.y1 }, c);
        }
    }
    save(&img, path)
}

/// Top: mean epsilon against q. Bottom: mean risk gap against q.
pub fn probe_trend(report: &BoundProbeReport, path: &Path) -> Result<()> {
    let mut img = canvas();
    let Some(n) = report.summaries.iter().map(|s| s.n_weak).max() else {
        return save(&img, path);
    };
    let at_n: Vec<_> = report.summaries.iter().filter(|s| s.n_weak == n).collect();
    let eps = at_n.iter().map(|s| (s.q, s.mean_epsilon)).collect();
    let gap = at_n.iter().map(|s| (s.q, s.mean_gap)).collect();
    series_panel(&mut img, TOP, &[(eps, ORANGE)]);
    series_panel(&mut img, BOTTOM, &[(gap, BLUE)]);
    save(&img, path)
}
