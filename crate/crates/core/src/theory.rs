//! Empirical probe of the mixed-supervision risk bound.
//!
//! For each seed a scene set is generated once; corruption levels `q` only
//! change the weak text. Stage 1 runs once per seed on the accurate subset and
//! its encoder serves as the fixed embedding for the approximation error.
//! `theta*` continues with mixed training on the weak texts, `theta_a` with
//! the same samples carrying their accurate expressions. Both share every
//! seed, so at `q = 0` they are the same computation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, recorrupt, stratified_split, DatasetManifest, ReferringSample, Split, SplitSpec, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{seg_loss, LossConfig, Network, NetworkConfig, SegmentationModel};
use crate::pipeline::{build_vocabulary, fresh_state};
use crate::rng;
use crate::train::{NoObserver, TrainConfig, TrainData, Trainer, TrainerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundProbeConfig {
    pub q_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Weak-subset sizes; empty means the whole weak subset.
    pub n_weak_grid: Vec<usize>,
    /// Corruption level at which the gap is correlated against `1 / N_w`.
    pub n_weak_q: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub accurate_ratio: f64,
    /// Training schedule for both runs of a cell.
    pub train: TrainConfig,
}

impl Default for BoundProbeConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.stage1.epochs = 10;
        train.stage3.epochs = 10;
        Self {
            q_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: (0..5).collect(),
            n_weak_grid: Vec::new(),
            n_weak_q: 0.5,
            n_train: 200,
            n_heldout: 100,
            accurate_ratio: 0.3,
            train,
        }
    }
}

impl BoundProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("probe grids must be nonempty".into()));
        }
        if let Some(q) = self.q_grid.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::Config(format!("q must lie in [0, 1], got {q}")));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("probe seeds must be distinct".into()));
        }
        if self.n_weak_grid.contains(&0) {
            return Err(Error::Config("n_weak_grid entries must be >= 1".into()));
        }
        if self.n_train == 0 || self.n_heldout == 0 {
            return Err(Error::Config("n_train and n_heldout must be >= 1".into()));
        }
        SplitSpec::new(self.accurate_ratio, 0)?;
        self.train.validate()
    }
}

/// Mean squared embedding distance between weak and accurate expressions.
pub fn estimate_epsilon(phi: &Network, pairs: &[(&str, &str)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("epsilon over an empty set of pairs".into()));
    }
    let mut total = 0.0;
    for (accurate, weak) in pairs {
        let a = phi.referring_embedding(accurate)?;
        let w = phi.referring_embedding(weak)?;
        total += a.iter().zip(&w).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / pairs.len() as f64)
}

/// Mean held-out segmentation loss under each sample's stored expression.
pub fn empirical_risk(net: &Network, heldout: &[ReferringSample]) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::InvalidInput("risk over an empty held-out set".into()));
    }
    let mut total = 0.0;
    for s in heldout {
        let r = net.referring_embedding(&s.expression)?;
        total += seg_loss(&net.forward(&s.image, &r)?, &s.mask)?;
    }
    Ok(total / heldout.len() as f64)
}

/// Spearman rank correlation with average ranks for ties. `None` when fewer
/// than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub q: f64,
    pub n_weak: usize,
    pub seed: u64,
    pub epsilon: Option<f64>,
    pub risk_mixed: Option<f64>,
    pub risk_accurate: Option<f64>,
    pub gap: Option<f64>,
    /// Held-out mIoU (percent) of both runs, logged as a secondary gap.
    pub miou_mixed: Option<f64>,
    pub miou_accurate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub q: f64,
    pub n_weak: usize,
    pub cells: usize,
    pub mean_epsilon: f64,
    pub mean_gap: f64,
    pub std_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundProbeReport {
    pub cells: Vec<ProbeCell>,
    pub summaries: Vec<ProbeSummary>,
    /// Across q at the largest weak-subset size.
    pub spearman_gap_epsilon: Option<f64>,
    /// Across weak-subset sizes at `n_weak_q`.
    pub spearman_gap_inv_n_weak: Option<f64>,
    /// Whether mean epsilon strictly increases along the sorted q grid.
    pub epsilon_strictly_increasing: Option<bool>,
    /// Twice the cross-seed std of the gap at q = 0.
    pub noise_band: Option<f64>,
    pub q0_mean_gap: Option<f64>,
    pub q0_within_band: Option<bool>,
    /// True when the grid is too small for any correlation.
    pub degenerate: bool,
    pub failed_cells: usize,
}

impl BoundProbeReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("q,n_weak,seed,epsilon,gap\n");
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.17e}"));
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.q, c.n_weak, c.seed, f(c.epsilon), f(c.gap));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("bound_report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("bound_report.csv");
        std::fs::write(&csv, self.csv()).map_err(|e| Error::io(&csv, e))
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut out = format!("{:>5} | {:>7} | {:>5} | {:>12} | {:>12} | {:>12}\n", "q", "N_w", "cells", "epsilon", "mean gap", "std gap");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:>5.2} | {:>7} | {:>5} | {:>12.6} | {:>12.6} | {:>12.6}",
                s.q, s.n_weak, s.cells, s.mean_epsilon, s.mean_gap, s.std_gap
            );
        }
        out
    }
}

/// Data and stage-1 state shared by every cell of one seed.
struct SeedContext {
    scene: SyntheticSceneConfig,
    base: DatasetManifest,
    split: Split,
    heldout: Vec<ReferringSample>,
    warm: TrainerState,
    /// Weak ids in the order used to take weak subsets.
    weak_order: Vec<String>,
}

const HELDOUT_SEED_OFFSET: u64 = 1 << 40;

fn seed_context(config: &BoundProbeConfig, scene: &SyntheticSceneConfig, network: &NetworkConfig, loss: &LossConfig, seed: u64) -> Result<SeedContext> {
    let scene = SyntheticSceneConfig {
        seed,
        corruption: 1.0,
        ..scene.clone()
    };
    let base = generate_synthetic(&scene, config.n_train)?;
    let heldout = generate_synthetic(
        &SyntheticSceneConfig {
            seed: seed.wrapping_add(HELDOUT_SEED_OFFSET),
            ..scene.clone()
        },
        config.n_heldout,
    )?
    .samples;
    let split = stratified_split(&base, &SplitSpec::new(config.accurate_ratio, seed)?)?;
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let state = fresh_state(build_vocabulary(&base), network, &train)?;
    let data = TrainData {
        accurate: split.accurate.clone(),
        ..Default::default()
    };
    let mut warm = state;
    Trainer {
        config: &train,
        loss,
        data: &data,
        observer: &mut NoObserver,
    }
    .stage1(&mut warm)?;
    let mut weak_order: Vec<String> = split.weak.iter().map(|s| s.sample_id.clone()).collect();
    weak_order.shuffle(&mut rng::stream(seed, &[rng::tag("n_weak")]));
    Ok(SeedContext {
        scene,
        base,
        split,
        heldout,
        warm,
        weak_order,
    })
}

/// Mixed training from the shared warm-up state; returns the final student.
fn mixed_run(config: &BoundProbeConfig, loss: &LossConfig, ctx: &SeedContext, weak: Vec<ReferringSample>) -> Result<Network> {
    let train = TrainConfig {
        seed: ctx.scene.seed,
        ..config.train.clone()
    };
    let data = TrainData {
        accurate: ctx.split.accurate.clone(),
        weak,
        val: Vec::new(),
    };
    let mut state = ctx.warm.clone();
    Trainer {
        config: &train,
        loss,
        data: &data,
        observer: &mut NoObserver,
    }
    .stage3(&mut state)?;
    Ok(state.student)
}

fn pixel_digest(samples: &[ReferringSample]) -> String {
    let stripped: Vec<ReferringSample> = samples
        .iter()
        .map(|s| ReferringSample {
            expression: String::new(),
            weak_expression: Some(String::new()),
            ..s.clone()
        })
        .collect();
    DatasetManifest::new(stripped).digest()
}

fn run_cell(
    config: &BoundProbeConfig,
    loss: &LossConfig,
    ctx: &SeedContext,
    q: f64,
    n_weak: usize,
    accurate_cache: &mut BTreeMap<usize, (f64, f64)>,
) -> Result<ProbeCell> {
    let corrupted = recorrupt(&ctx.base, &ctx.scene, q)?;
    let split_q = Split::from_file(&corrupted, &ctx.split.to_file())?;
    let chosen: std::collections::BTreeSet<&str> = ctx.weak_order.iter().take(n_weak).map(String::as_str).collect();
    let weak_q: Vec<ReferringSample> = split_q
        .weak
        .iter()
        .filter(|s| chosen.contains(s.sample_id.as_str()))
        .cloned()
        .collect();
    // The accurate-expression twin of the weak subset: same pixels, masks, ids.
    let weak_a: Vec<ReferringSample> = weak_q
        .iter()
        .map(|s| {
            let orig = ctx.base.get(&s.sample_id).expect("weak id from base");
            ReferringSample {
                expression: orig.expression.clone(),
                ..s.clone()
            }
        })
        .collect();
    if pixel_digest(&weak_q) != pixel_digest(&weak_a) {
        return Err(Error::InvalidInput("probe runs differ in more than expression text".into()));
    }
    let pairs: Vec<(&str, &str)> = weak_a
        .iter()
        .zip(&weak_q)
        .map(|(a, w)| (a.expression.as_str(), w.expression.as_str()))
        .collect();
    let epsilon = estimate_epsilon(&ctx.warm.student, &pairs)?;

    let (risk_a, miou_a) = match accurate_cache.get(&n_weak) {
        Some(&v) => v,
        None => {
            let net = mixed_run(config, loss, ctx, weak_a)?;
            let v = (
                empirical_risk(&net, &ctx.heldout)?,
                evaluate(&net, &ctx.heldout, "heldout", loss.threshold)?.miou,
            );
            accurate_cache.insert(n_weak, v);
            v
        }
    };
    let net = mixed_run(config, loss, ctx, weak_q)?;
    let risk_mixed = empirical_risk(&net, &ctx.heldout)?;
    let miou_mixed = evaluate(&net, &ctx.heldout, "heldout", loss.threshold)?.miou;
    Ok(ProbeCell {
        q,
        n_weak,
        seed: ctx.scene.seed,
        epsilon: Some(epsilon),
        risk_mixed: Some(risk_mixed),
        risk_accurate: Some(risk_a),
        gap: Some(risk_mixed - risk_a),
        miou_mixed: Some(miou_mixed),
        miou_accurate: Some(miou_a),
        error: None,
    })
}

/// Runs the full `(q, N_w, seed)` grid. Cell failures are recorded in the
/// report rather than aborting the sweep.
pub fn sweep(
    config: &BoundProbeConfig,
    scene: &SyntheticSceneConfig,
    network: &NetworkConfig,
    loss: &LossConfig,
) -> Result<BoundProbeReport> {
    config.validate()?;
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        let ctx = match seed_context(config, scene, network, loss, seed) {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(seed, error = %e, "probe seed failed");
                for &q in &config.q_grid {
                    for &n in n_weak_values(config, None).iter() {
                        cells.push(failed(q, n, seed, &e));
                    }
                }
                continue;
            }
        };
        let mut accurate_cache = BTreeMap::new();
        for n_weak in n_weak_values(config, Some(ctx.weak_order.len())) {
            for &q in &config.q_grid {
                let cell = run_cell(config, loss, &ctx, q, n_weak, &mut accurate_cache).unwrap_or_else(|e| {
                    tracing::warn!(seed, q, n_weak, error = %e, "probe cell failed");
                    failed(q, n_weak, seed, &e)
                });
                tracing::info!(seed, q, n_weak, gap = ?cell.gap, epsilon = ?cell.epsilon, "probe cell");
                cells.push(cell);
            }
        }
    }
    Ok(summarize(config, cells))
}

fn n_weak_values(config: &BoundProbeConfig, available: Option<usize>) -> Vec<usize> {
    if config.n_weak_grid.is_empty() {
        return vec![available.unwrap_or(0)];
    }
    config
        .n_weak_grid
        .iter()
        .map(|&n| available.map_or(n, |a| n.min(a)))
        .collect()
}

fn failed(q: f64, n_weak: usize, seed: u64, e: &Error) -> ProbeCell {
    ProbeCell {
        q,
        n_weak,
        seed,
        epsilon: None,
        risk_mixed: None,
        risk_accurate: None,
        gap: None,
        miou_mixed: None,
        miou_accurate: None,
        error: Some(e.to_string()),
    }
}

/// Aggregates cells into per-(q, N_w) summaries and trend statistics.
pub fn summarize(config: &BoundProbeConfig, cells: Vec<ProbeCell>) -> BoundProbeReport {
    let mut groups: BTreeMap<(usize, u64), Vec<&ProbeCell>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.error.is_none()) {
        groups.entry((c.n_weak, c.q.to_bits())).or_default().push(c);
    }
    let mut summaries: Vec<ProbeSummary> = groups
        .values()
        .map(|g| {
            let eps: Vec<f64> = g.iter().filter_map(|c| c.epsilon).collect();
            let gaps: Vec<f64> = g.iter().filter_map(|c| c.gap).collect();
            let (mean_gap, std_gap) = mean_std(&gaps);
            ProbeSummary {
                q: g[0].q,
                n_weak: g[0].n_weak,
                cells: g.len(),
                mean_epsilon: mean_std(&eps).0,
                mean_gap,
                std_gap,
            }
        })
        .collect();
    summaries.sort_by(|a, b| a.n_weak.cmp(&b.n_weak).then(a.q.total_cmp(&b.q)));

    let max_nw = summaries.iter().map(|s| s.n_weak).max();
    let at_max: Vec<&ProbeSummary> = summaries.iter().filter(|s| Some(s.n_weak) == max_nw).collect();
    let spearman_gap_epsilon = spearman(
        &at_max.iter().map(|s| s.mean_gap).collect::<Vec<_>>(),
        &at_max.iter().map(|s| s.mean_epsilon).collect::<Vec<_>>(),
    );
    let epsilon_strictly_increasing = (at_max.len() >= 2).then(|| at_max.windows(2).all(|w| w[1].mean_epsilon > w[0].mean_epsilon));
    let at_q: Vec<&ProbeSummary> = summaries.iter().filter(|s| s.q == config.n_weak_q).collect();
    let spearman_gap_inv_n_weak = spearman(
        &at_q.iter().map(|s| s.mean_gap).collect::<Vec<_>>(),
        &at_q.iter().map(|s| 1.0 / s.n_weak as f64).collect::<Vec<_>>(),
    );
    let q0 = at_max.iter().find(|s| s.q == 0.0);
    let noise_band = q0.filter(|s| s.cells >= 2).map(|s| 2.0 * s.std_gap);
    let q0_mean_gap = q0.map(|s| s.mean_gap);
    let q0_within_band = match (q0_mean_gap, noise_band) {
        (Some(g), Some(b)) => Some(g.abs() <= b),
        _ => None,
    };
    let failed_cells = cells.iter().filter(|c| c.error.is_some()).count();
    BoundProbeReport {
        degenerate: spearman_gap_epsilon.is_none() && spearman_gap_inv_n_weak.is_none(),
        cells,
        summaries,
        spearman_gap_epsilon,
        spearman_gap_inv_n_weak,
        epsilon_strictly_increasing,
        noise_band,
        q0_mean_gap,
        q0_within_band,
        failed_cells,
    }
}
