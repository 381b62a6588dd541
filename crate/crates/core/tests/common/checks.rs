//! Property checks shared by the core integration tests and the CLI
//! acceptance suite. Each returns a short detail string on success and the
//! first violation on failure.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wrel_core::data::{generate_synthetic, stratified_split, Mask, SplitSpec, SyntheticSceneConfig};
use wrel_core::lrb::{fill, padding_set, sample_grad, PromptGrad};
use wrel_core::metrics::{miou, oiou, precision_at, PairCounts, THRESHOLDS};
use wrel_core::model::{seg_loss, LossConfig};
use wrel_core::params::ParamSet;
use wrel_core::text::TokenSequence;
use wrel_core::train::{
    CalibrationEvent, StepTrace, Trainer, TrainConfig, TrainData, TrainObserver, TrainerState,
};

use super::*;

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Randomized fill cases with `L <= 32` and `p <= 8`.
pub fn fill_invariants(cases: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut short = 0;
    for case in 0..cases {
        let len = r.gen_range(1..=32);
        let dim = r.gen_range(1..=6);
        let p = r.gen_range(0..=8);
        let attention: Vec<u8> = (0..len).map(|_| u8::from(r.gen_bool(0.5))).collect();
        let seq = TokenSequence {
            x: (0..len * dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
            attention: attention.clone(),
            dim,
        };
        let prompts: Vec<f64> = (0..p * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let out = fill(&seq, &prompts).map_err(|e| format!("case {case}: {e}"))?;
        let omega: Vec<usize> = (0..len).filter(|&l| attention[l] == 0).collect();
        let used = p.min(omega.len());
        short += usize::from(p > omega.len());
        ensure(out.filled_positions == omega[..used], || format!("case {case}: positions {:?}", out.filled_positions))?;
        for l in 0..len {
            let row = &out.seq.x[l * dim..(l + 1) * dim];
            match omega[..used].iter().position(|&o| o == l) {
                Some(k) => {
                    ensure(row == &prompts[k * dim..(k + 1) * dim], || format!("case {case}: slot {l} is not prompt row {k}"))?;
                    ensure(out.seq.attention[l] == 1, || format!("case {case}: slot {l} still masked"))?;
                }
                None => {
                    let same = row.iter().zip(seq.row(l)).all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure(same && out.seq.attention[l] == attention[l], || format!("case {case}: position {l} changed"))?;
                }
            }
        }
        ensure(padding_set(&out.seq.attention).len() == omega.len() - used, || format!("case {case}: mask count"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} cases ({short} with p > |padding|) in {:.2?}", elapsed))
}

/// Collects calibration events and stage-3 step traces.
#[derive(Default)]
pub struct Tracer {
    pub calibrations: Vec<CalibrationEvent>,
    pub steps: Vec<StepTrace>,
}

impl TrainObserver for Tracer {
    fn wants_trace(&self) -> bool {
        true
    }

    fn on_calibration(&mut self, event: &CalibrationEvent) {
        self.calibrations.push(event.clone());
    }

    fn on_step(&mut self, trace: &StepTrace) {
        self.steps.push(trace.clone());
    }
}

pub struct TracedRun {
    pub config: TrainConfig,
    pub stage2: Vec<CalibrationEvent>,
    pub stage3: Vec<CalibrationEvent>,
    pub steps: Vec<StepTrace>,
    /// Student parameters entering stage 3, the teacher's starting point.
    pub teacher_init: ParamSet,
    pub state: TrainerState,
}

pub const TRACE_STEPS: u64 = 20;

pub fn trace_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        prompt_len: 3,
        ..Default::default()
    };
    c.stage1.epochs = 2;
    c.stage1.lr = 1e-2;
    c.stage1.batch_size = 4;
    c.stage2.epochs = 4;
    c.stage2.prompt_lr = 10.0;
    c.stage2.batch_size = 4;
    c.stage3.epochs = 10;
    c.stage3.lr = 1e-2;
    c.stage3.prompt_lr = 10.0;
    c.stage3.batch_size = 4;
    c.stage3.max_steps = Some(TRACE_STEPS);
    c
}

pub fn trace_data(seed: u64) -> TrainData {
    let m = small_scene(seed, 24);
    let split = stratified_split(&m, &SplitSpec::new(0.25, seed).unwrap()).unwrap();
    TrainData {
        accurate: split.accurate,
        weak: split.weak,
        val: Vec::new(),
    }
}

/// Stages 1 to 3 on a tiny scene with tracing on; stage 3 stops after
/// [`TRACE_STEPS`] batches.
pub fn traced_run(seed: u64) -> TracedRun {
    let config = trace_config(seed);
    let data = trace_data(seed);
    let all = wrel_core::data::DatasetManifest::new(data.accurate.iter().chain(&data.weak).cloned().collect());
    let mut state = TrainerState::new(small_net(&all, seed), config.stage1.weight_decay);
    let loss = LossConfig::default();
    let mut tracer = Tracer::default();
    let mut trainer = Trainer {
        config: &config,
        loss: &loss,
        data: &data,
        observer: &mut tracer,
    };
    trainer.stage1(&mut state).unwrap();
    trainer.stage2(&mut state).unwrap();
    let teacher_init = state.student.params.clone();
    trainer.stage3(&mut state).unwrap();
    let (stage2, stage3) = tracer.calibrations.into_iter().partition(|e| e.stage == 2);
    TracedRun {
        config,
        stage2,
        stage3,
        steps: tracer.steps,
        teacher_init,
        state,
    }
}

/// Every bank gradient from the student loss is exactly zero and the student
/// step leaves the bank untouched.
pub fn stop_gradient(run: &TracedRun) -> Check {
    ensure(run.steps.len() as u64 == TRACE_STEPS, || format!("{} steps traced", run.steps.len()))?;
    let mut blocks = 0;
    for s in &run.steps {
        ensure(!s.prompt_grads.is_empty(), || format!("step {}: no weak sample measured", s.t))?;
        for (row, g) in &s.prompt_grads {
            ensure(g.iter().all(|&v| v == 0.0), || format!("step {}: bank row {row} got a nonzero gradient", s.t))?;
            blocks += 1;
        }
        ensure(s.bank_before_student == s.bank_after_student, || format!("step {}: student step moved the bank", s.t))?;
    }
    Ok(format!("{blocks} bank-row gradients over {} steps, all exactly 0", run.steps.len()))
}

/// The frozen network's checksum is unchanged across every calibration call.
pub fn frozen_contracts(run: &TracedRun) -> Check {
    ensure(run.stage2.len() >= 20, || format!("only {} stage-2 calibrations", run.stage2.len()))?;
    ensure(run.stage3.len() >= 1, || "no stage-3 calibrations".into())?;
    for (i, e) in run.stage2.iter().chain(&run.stage3).enumerate() {
        ensure(e.frozen_before == e.frozen_after, || format!("call {i} (stage {}) changed the frozen model", e.stage))?;
        ensure(e.bank_before != e.bank_after, || format!("call {i} (stage {}) did not move its rows", e.stage))?;
    }
    let calibrated: Vec<&StepTrace> = run.steps.iter().filter(|s| s.calibrated).collect();
    ensure(calibrated.len() == run.stage3.len(), || "trace and event counts differ".into())?;
    for (s, e) in calibrated.iter().zip(&run.stage3) {
        ensure(s.teacher_at_calibration == e.frozen_before, || format!("step {}: teacher differs from step (a) input", s.t))?;
    }
    Ok(format!("{} stage-2 and {} stage-3 calls, frozen checksums unchanged", run.stage2.len(), run.stage3.len()))
}

/// Independent replay of the teacher recursion over the recorded students.
pub fn ema_replay(run: &TracedRun) -> Check {
    let alpha_max = run.config.stage3.alpha_max;
    let mut teacher: Vec<Vec<f64>> = run.teacher_init.iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut worst = 0.0f64;
    for s in &run.steps {
        let alpha = (1.0 - 1.0 / (s.t as f64 + 1.0)).min(alpha_max);
        for (tv, (_, st)) in teacher.iter_mut().zip(s.student.iter()) {
            for (t, &x) in tv.iter_mut().zip(st.data()) {
                *t = alpha * *t + (1.0 - alpha) * x;
            }
        }
        for (tv, (name, rec)) in teacher.iter().zip(s.teacher.iter()) {
            for (a, b) in tv.iter().zip(rec.data()) {
                worst = worst.max((a - b).abs());
                ensure((a - b).abs() <= 1e-12, || format!("step {} `{name}`: |delta| = {:e}", s.t, (a - b).abs()))?;
            }
        }
    }
    let last = run.state.teacher.as_ref().ok_or("no teacher")?;
    ensure(last.params == run.steps.last().ok_or("no steps")?.teacher, || "final teacher differs from last trace".into())?;
    Ok(format!("max |delta| = {worst:e} over {} steps", run.steps.len()))
}

/// Worst relative error of every parameter group of the toy model.
pub fn model_grad_error(seed: u64) -> (f64, String) {
    let m = small_scene(seed, 2);
    let net = small_net(&m, seed);
    let s = &m.samples[0];
    let tokens = net.tokenize(&s.expression).unwrap();
    let mut grads = net.params.zeros_like();
    sample_grad(&net, &s.image, &s.mask, &tokens, None, 1.0, Some(&mut grads), PromptGrad::Skip).unwrap();
    let mut worst = (0.0, String::new());
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    for name in names {
        let base = net.params.get(&name).unwrap().data().to_vec();
        let analytic = grads.get(&name).unwrap().data();
        let idx = if name == "text.embed" {
            // rows of tokens that occur in the expression
            let d = net.encoder.dims.dim;
            tokens
                .ids
                .iter()
                .zip(&tokens.attention)
                .filter(|(_, &a)| a == 1)
                .flat_map(|(&id, _)| id * d..(id + 1) * d)
                .collect::<Vec<_>>()
        } else {
            probe_indices(base.len(), 24, seed)
        };
        let mut f = |v: &[f64]| {
            let mut n = net.clone();
            n.params.get_mut(&name).unwrap().data_mut().copy_from_slice(v);
            let r = n.referring_embedding(&s.expression).unwrap();
            seg_loss(&n.model.forward(&n.params, &s.image, &r).unwrap(), &s.mask).unwrap()
        };
        let numeric: Vec<f64> = idx.iter().map(|&i| central_diff(&mut f, &base, i, FD_STEP)).collect();
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let e = rel_err(&picked, &numeric);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}

/// Relative error of the encoder's gradient with respect to its input rows,
/// for the readout `||r||^2`. Masked rows must receive exactly zero.
pub fn encoder_grad_error(seed: u64) -> f64 {
    let m = small_scene(seed, 1);
    let net = small_net(&m, seed);
    let tokens = net.tokenize(&m.samples[0].expression).unwrap();
    let seq = net.embed(&tokens).unwrap();
    let (r, cache) = net.encode_with_cache(&seq).unwrap();
    let dr: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    let dx = net.encoder.encode_backward(&net.params, &cache, &dr, None).unwrap();
    let d = seq.dim;
    let valid: Vec<usize> = (0..seq.len()).filter(|&l| seq.attention[l] == 1).collect();
    let idx: Vec<usize> = valid.iter().flat_map(|&l| l * d..(l + 1) * d).collect();
    let mut f = |x: &[f64]| {
        let mut s2 = seq.clone();
        s2.x.copy_from_slice(x);
        net.encode(&s2).unwrap().iter().map(|v| v * v).sum::<f64>()
    };
    let numeric: Vec<f64> = idx.iter().map(|&i| central_diff(&mut f, &seq.x, i, FD_STEP)).collect();
    let analytic: Vec<f64> = idx.iter().map(|&i| dx[i]).collect();
    let masked_zero = (0..seq.len())
        .filter(|l| !valid.contains(l))
        .all(|l| dx[l * d..(l + 1) * d].iter().all(|&g| g == 0.0));
    if masked_zero {
        rel_err(&analytic, &numeric)
    } else {
        f64::INFINITY
    }
}

/// Relative error of the loss gradient with respect to the prompt rows,
/// taken through fill and the encoder without a stop-gradient.
pub fn enhance_grad_error(seed: u64) -> f64 {
    let m = small_scene(seed, 1);
    let net = small_net(&m, seed);
    let s = m.samples[0].to_weak();
    let tokens = net.tokenize(&s.expression).unwrap();
    let p = 3;
    let prompts = random_vec(p * net.encoder.dims.dim, 0.5, seed + 7);
    let g = sample_grad(&net, &s.image, &s.mask, &tokens, Some(&prompts), 1.0, None, PromptGrad::Through)
        .unwrap()
        .prompt_grad
        .unwrap();
    let seq = net.embed(&tokens).unwrap();
    let mut f = |pv: &[f64]| {
        let filled = fill(&seq, pv).unwrap();
        let r = net.encode(&filled.seq).unwrap();
        seg_loss(&net.model.forward(&net.params, &s.image, &r).unwrap(), &s.mask).unwrap()
    };
    let numeric: Vec<f64> = (0..prompts.len()).map(|i| central_diff(&mut f, &prompts, i, FD_STEP)).collect();
    rel_err(&g, &numeric)
}

pub const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn gradient_checks() -> Check {
    let start = Instant::now();
    let mut worst = [0.0f64; 3];
    for seed in GRAD_SEEDS {
        let (m, name) = model_grad_error(seed);
        let e = encoder_grad_error(seed);
        let p = enhance_grad_error(seed);
        ensure(e < FD_TOL, || format!("seed {seed}: encoder rel err {e:e}"))?;
        ensure(m < FD_TOL, || format!("seed {seed}: model `{name}` rel err {m:e}"))?;
        ensure(p < FD_TOL, || format!("seed {seed}: enhance rel err {p:e}"))?;
        for (w, v) in worst.iter_mut().zip([e, m, p]) {
            *w = w.max(v);
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max rel err encoder {:.1e}, model {:.1e}, enhance {:.1e} over {} seeds in {:.2?}",
        worst[0],
        worst[1],
        worst[2],
        GRAD_SEEDS.len(),
        elapsed
    ))
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, density: f64, nonempty: bool) -> Mask {
    let mut bits: Vec<u8> = (0..h * w).map(|_| u8::from(r.gen_bool(density))).collect();
    if nonempty && bits.iter().all(|&b| b == 0) {
        let i = r.gen_range(0..bits.len());
        bits[i] = 1;
    }
    Mask::new(h, w, bits).unwrap()
}

/// Integer pixel counts, computed independently of [`PairCounts`].
fn brute_counts(pred: &Mask, gt: &Mask) -> (u64, u64) {
    let (mut i, mut u) = (0u64, 0u64);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let (p, g) = (pred.get(y, x), gt.get(y, x));
            i += u64::from(p && g);
            u += u64::from(p || g);
        }
    }
    (i, u)
}

/// oIoU, mIoU and P@X against brute-force recomputation on random mask pairs,
/// plus the hand-built case where the two IoU aggregates disagree.
pub fn metrics_oracle(n: usize, seed: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut brute = Vec::new();
    for _ in 0..n {
        let (h, w) = (r.gen_range(1..=24), r.gen_range(1..=24));
        let (dg, dp) = (r.gen_range(0.05..0.9), r.gen_range(0.0..0.9));
        let gt = random_mask(&mut r, h, w, dg, true);
        let pred = random_mask(&mut r, h, w, dp, false);
        let pc = PairCounts::new(&pred, &gt).map_err(|e| e.to_string())?;
        let (i, u) = brute_counts(&pred, &gt);
        ensure((pc.intersection, pc.union) == (i, u), || format!("counts {:?} vs ({i}, {u})", (pc.intersection, pc.union)))?;
        pairs.push(pc);
        brute.push((i, u));
    }
    let (si, su) = brute.iter().fold((0u64, 0u64), |(a, b), &(i, u)| (a + i, b + u));
    let o = si as f64 / su as f64;
    let m = brute.iter().map(|&(i, u)| i as f64 / u as f64).sum::<f64>() / n as f64;
    ensure(oiou(&pairs).unwrap() == o, || "oIoU differs".into())?;
    ensure(miou(&pairs).unwrap() == m, || "mIoU differs".into())?;
    for x in THRESHOLDS {
        // X = k/10, so IoU >= X  <=>  10 I >= k U in integers.
        let k = (x * 10.0).round() as u64;
        let hits = brute.iter().filter(|&&(i, u)| 10 * i >= k * u).count();
        let expect = hits as f64 / n as f64;
        ensure(precision_at(&pairs, x).unwrap() == expect, || format!("P@{x} differs"))?;
    }
    // 90/100 and 0/10: cumulative 90/110 = 0.818..., mean (0.9 + 0) / 2 = 0.45.
    let mut gt_a = vec![0u8; 100];
    gt_a[..90].fill(1);
    let mut pred_a = gt_a.clone();
    pred_a[90..].fill(1);
    let a = PairCounts::new(&Mask::new(10, 10, pred_a).unwrap(), &Mask::new(10, 10, gt_a).unwrap()).unwrap();
    let b = PairCounts::new(&Mask::zeros(2, 5), &Mask::new(2, 5, vec![1; 10]).unwrap()).unwrap();
    let skew = [a, b];
    let (so, sm) = (oiou(&skew).unwrap(), miou(&skew).unwrap());
    ensure(so == 90.0 / 110.0 && sm == 0.45, || format!("constructed case gave oIoU {so}, mIoU {sm}"))?;
    Ok(format!("{n} random pairs exact; constructed case oIoU {so:.4} vs mIoU {sm:.2}"))
}

/// Partition, per-category coverage and per-category rounding of the
/// stratified split for each ratio and seed on a five-class scene.
pub fn split_properties(ratios: &[f64], seeds: std::ops::Range<u64>) -> Check {
    let m = generate_synthetic(
        &SyntheticSceneConfig {
            grid_size: 16,
            ..Default::default()
        },
        137,
    )
    .map_err(|e| e.to_string())?;
    let counts = m.category_counts();
    ensure(counts.len() == 5, || format!("{} categories", counts.len()))?;
    let all: BTreeSet<&str> = m.samples.iter().map(|s| s.sample_id.as_str()).collect();
    let mut runs = 0;
    for &ratio in ratios {
        for seed in seeds.clone() {
            let split = stratified_split(&m, &SplitSpec::new(ratio, seed).unwrap()).map_err(|e| e.to_string())?;
            let acc: BTreeSet<&str> = split.accurate.iter().map(|s| s.sample_id.as_str()).collect();
            let weak: BTreeSet<&str> = split.weak.iter().map(|s| s.sample_id.as_str()).collect();
            let tag = format!("ratio {ratio} seed {seed}");
            ensure(acc.len() == split.accurate.len() && weak.len() == split.weak.len(), || format!("{tag}: duplicates"))?;
            ensure(acc.is_disjoint(&weak), || format!("{tag}: subsets overlap"))?;
            ensure(acc.union(&weak).copied().collect::<BTreeSet<_>>() == all, || format!("{tag}: not a cover"))?;
            for (cat, &n_c) in &counts {
                let a = split.accurate.iter().filter(|s| s.category == *cat).count();
                ensure(a >= 1, || format!("{tag}: `{cat}` missing from the accurate subset"))?;
                let target = ratio * n_c as f64;
                ensure((a as f64 - target).abs() <= 1.0, || format!("{tag}: `{cat}` has {a} accurate of {n_c}"))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} splits of {} samples over {} categories", m.len(), counts.len()))
}
