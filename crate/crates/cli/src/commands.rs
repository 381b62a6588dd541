use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use wrel_core::ablation::{ablate as run_ablation, Experiment, Knob};
use wrel_core::config::RunConfig;
use wrel_core::data::{
    generate_synthetic, load_dataset, stratified_split, write_dataset, DatasetManifest, ReferringSample, Split,
    SplitFile, SplitSpec, SyntheticSceneConfig, BENCHMARK_RATIOS,
};
use wrel_core::metrics::{evaluate, format_table, MetricsReport, OracleSegmenter, Segmenter};
use wrel_core::pipeline::{
    build_vocabulary, fresh_state, plan_stages, prepare_data, prepare_output_dir, run_training, sha256_hex, Mode, RunDir,
    RunManifest, StageTarget, RUN_CONFIG,
};
use wrel_core::theory;
use wrel_core::train::TrainerState;
use wrel_core::Error as CoreError;

use crate::{AblateArgs, ConfigArgs, DataArgs, EvalArgs, ProbeArgs, SplitArgs, SynthArgs, TrainArgs};

/// Some cells of a sweep failed; the rest were written.
#[derive(Debug)]
pub struct PartialGrid(pub String);

impl std::fmt::Display for PartialGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "partial grid failure: {}", self.0)
    }
}

impl std::error::Error for PartialGrid {}

/// 1 for usage and configuration problems, 3 for partial sweeps, 2 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<PartialGrid>().is_some() {
        return 3;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_) | CoreError::InvalidInput(_) | CoreError::Parse { .. }) => 1,
        Some(CoreError::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    let config = SyntheticSceneConfig {
        grid_size: a.grid_size,
        max_instances: a.max_instances,
        corruption: a.q,
        seed: a.seed,
        ..Default::default()
    };
    config.validate()?;
    prepare_output_dir(&a.out, a.force)?;
    let manifest = generate_synthetic(&config, a.n)?;
    write_dataset(&a.out, &manifest)?;
    println!("wrote {} samples to {} (digest {})", manifest.len(), a.out.display(), manifest.digest());
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let ratio = f64::from(a.ratio) / 100.0;
    if !a.ratio_custom && !BENCHMARK_RATIOS.contains(&ratio) {
        return Err(usage(format!("--ratio {} is not one of 10, 30, 50 (pass --ratio-custom to allow it)", a.ratio)));
    }
    if !(1..=99).contains(&a.ratio) {
        return Err(usage(format!("--ratio must lie in 1..=99, got {}", a.ratio)));
    }
    let manifest = load_dataset(&a.dataset)?;
    let out = a.out.unwrap_or_else(|| a.dataset.join("split.json"));
    if out.exists() && !a.force {
        return Err(usage(format!("{} exists (use --force)", out.display())));
    }
    let spec = SplitSpec {
        accurate_ratio: ratio,
        seed: a.seed,
        stratify_by_category: !a.no_stratify,
    };
    let split = stratified_split(&manifest, &spec)?;
    split.write_json(&out)?;
    println!(
        "{} accurate / {} weak written to {}",
        split.accurate.len(),
        split.weak.len(),
        out.display()
    );
    Ok(())
}

fn load_config(args: &ConfigArgs, data: Option<&DataArgs>, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(p) = &args.config {
        if !p.exists() {
            return Err(usage(format!("config file {} not found", p.display())));
        }
    }
    let mut config = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(d) = data {
        if d.data.is_some() {
            config.data.train.clone_from(&d.data);
        }
        if d.split_file.is_some() {
            config.data.split.clone_from(&d.split_file);
        }
        if d.val.is_some() {
            config.data.val.clone_from(&d.val);
        }
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }
    Ok(config)
}

fn load_dir(path: &Path, what: &str) -> Result<DatasetManifest> {
    if !path.is_dir() {
        return Err(usage(format!("{what} dataset {} not found", path.display())));
    }
    load_dataset(path).with_context(|| format!("loading {what} dataset {}", path.display()))
}

struct Benchmark {
    train: DatasetManifest,
    split: Split,
    val: Vec<ReferringSample>,
    val_digest: Option<String>,
}

fn load_benchmark(config: &RunConfig) -> Result<Benchmark> {
    let train_dir = config
        .data
        .train
        .as_deref()
        .ok_or_else(|| usage("no training dataset (pass --data or set data.train)"))?;
    let train = load_dir(train_dir, "training")?;
    let split = match &config.data.split {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("reading {}: {e}", p.display())))?;
            let file: SplitFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Split::from_file(&train, &file)?
        }
        None => stratified_split(&train, &config.split.spec()?)?,
    };
    let (val, val_digest) = match &config.data.val {
        Some(p) => {
            let m = load_dir(p, "validation")?;
            let d = m.digest();
            (m.samples, Some(d))
        }
        None => (Vec::new(), None),
    };
    Ok(Benchmark {
        train,
        split,
        val,
        val_digest,
    })
}

#[derive(Serialize)]
struct FinalMetrics<'a> {
    student: &'a MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher: Option<&'a MetricsReport>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mode: Mode = a.mode.parse()?;
    let target: StageTarget = a.stage.parse()?;
    let config = load_config(&a.config, Some(&a.data), a.seed)?;
    let bench = load_benchmark(&config)?;
    let vocab = build_vocabulary(&bench.train);

    let state = match &a.resume {
        Some(ckpt) => {
            let state = TrainerState::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            if state.student.config() != config.model {
                return Err(usage("checkpoint network does not match the [model] section"));
            }
            state
        }
        None => fresh_state(vocab, &config.model, &config.train)?,
    };
    plan_stages(&config.train, mode, target, &state)?;
    let same_run = match (a.resume.as_ref().and_then(|c| c.parent()).map(fs::canonicalize), fs::canonicalize(&a.out)) {
        (Some(Ok(p)), Ok(o)) => p == o,
        _ => false,
    };
    let mut run_dir = if same_run {
        let upto = (state.progress.stage.number(), state.progress.epoch);
        RunDir::reopen(&a.out, upto, a.checkpoint_every)?
    } else {
        RunDir::create(&a.out, a.force, a.checkpoint_every)?
    };
    let init_checksum = state.student.checksum();
    let config_text = config.to_toml()?;
    let config_path = a.out.join(RUN_CONFIG);
    fs::write(&config_path, &config_text).with_context(|| format!("writing {}", config_path.display()))?;

    let data = prepare_data(&bench.split, bench.val.clone(), mode);
    let (state, stages) = run_training(&config.train, &config.loss, mode, target, &data, state, &mut run_dir)?;
    state.save(&a.out.join("final"))?;

    let manifest = RunManifest {
        mode,
        stage: target,
        seed: config.train.seed,
        config_digest: sha256_hex(config_text.as_bytes()),
        train_digest: bench.train.digest(),
        val_digest: bench.val_digest.clone(),
        n_accurate: data.accurate.len(),
        n_weak: data.weak.len(),
        n_val: data.val.len(),
        vocab_size: state.student.vocab.len(),
        init_checksum,
        resumed_from: a.resume.as_ref().map(|p| p.display().to_string()),
        stages,
    };
    manifest.write(&a.out)?;

    if !bench.val.is_empty() {
        let threshold = config.loss.threshold;
        let student = evaluate(&state.student, &bench.val, "val", threshold)?;
        let teacher = match &state.teacher {
            Some(t) => Some(evaluate(t, &bench.val, "val", threshold)?),
            None => None,
        };
        let report = FinalMetrics {
            student: &student,
            teacher: teacher.as_ref(),
        };
        let path = a.out.join("final_metrics.json");
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        let mut rows = vec![("student".to_string(), &student)];
        if let Some(t) = &teacher {
            rows.push(("teacher".to_string(), t));
        }
        print!("{}", format_table("Model", &rows));
    }
    if a.plot {
        crate::plot::training_curves(&run_dir.records, &a.out.join("curves.png"))?;
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

/// Finds `config.toml` in the checkpoint directory or one of its parents.
fn run_config_near(ckpt: &Path) -> Option<PathBuf> {
    ckpt.ancestors().take(3).map(|d| d.join(RUN_CONFIG)).find(|p| p.is_file())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    which: &'a str,
    report: &'a MetricsReport,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if !matches!(a.split.as_str(), "val" | "test") {
        return Err(usage(format!("--split must be val or test, got `{}`", a.split)));
    }
    if !matches!(a.which.as_str(), "student" | "teacher") {
        return Err(usage(format!("--which must be student or teacher, got `{}`", a.which)));
    }
    if let Some(ckpt) = &a.ckpt {
        if !ckpt.join(wrel_core::train::STATE_FILE).is_file() {
            return Err(usage(format!("no checkpoint at {}", ckpt.display())));
        }
    }
    let run_config = match &a.ckpt {
        Some(c) => match run_config_near(c) {
            Some(p) => Some(RunConfig::load(Some(&p), &[])?),
            None => None,
        },
        None => None,
    };
    let data_dir = match &a.data {
        Some(d) => d.clone(),
        None => {
            let paths = run_config.as_ref().map(|c| &c.data);
            let found = match a.split.as_str() {
                "val" => paths.and_then(|p| p.val.clone()),
                _ => paths.and_then(|p| p.test.clone()),
            };
            found.ok_or_else(|| usage(format!("no {} dataset (pass --data)", a.split)))?
        }
    };
    let samples = load_dir(&data_dir, &a.split)?.samples;
    let threshold = run_config.as_ref().map_or(0.0, |c| c.loss.threshold);

    let (label, report) = match &a.ckpt {
        None => {
            let oracle = OracleSegmenter { margin: 1.0 };
            ("oracle".to_string(), score(&oracle, &samples, &a.split, threshold)?)
        }
        Some(ckpt) => {
            let state = TrainerState::load(ckpt)?;
            let net = match a.which.as_str() {
                "student" => &state.student,
                _ => state
                    .teacher
                    .as_ref()
                    .ok_or_else(|| usage(format!("checkpoint {} has no teacher", ckpt.display())))?,
            };
            (ckpt.display().to_string(), score(net, &samples, &a.split, threshold)?)
        }
    };
    let which = if a.ckpt.is_some() { a.which.as_str() } else { "oracle" };
    print!("{}", format_table("Model", &[(which.to_string(), &report)]));
    let json = serde_json::to_string_pretty(&EvalReport {
        checkpoint: label,
        which,
        report: &report,
    })?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn score(model: &dyn Segmenter, samples: &[ReferringSample], split: &str, threshold: f64) -> Result<MetricsReport> {
    Ok(evaluate(model, samples, split, threshold)?)
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let knob: Knob = a.knob.parse()?;
    let config = load_config(&a.config, Some(&a.data), a.seed)?;
    let bench = load_benchmark(&config)?;
    if bench.val.is_empty() {
        return Err(usage("ablation needs a validation dataset (pass --val or set data.val)"));
    }
    match &a.out {
        Some(out) => prepare_output_dir(out, a.force)?,
        None if a.plot => return Err(usage("--plot needs --out")),
        None => {}
    }
    let vocab = build_vocabulary(&bench.train);
    let exp = Experiment {
        train: &config.train,
        loss: &config.loss,
        network: &config.model,
        vocab: &vocab,
        split: &bench.split,
        val: &bench.val,
    };
    let report = run_ablation(knob, &exp);
    let table = report.table();
    print!("{table}");
    if let Some(out) = &a.out {
        let stem = format!("ablation-{}", knob.name());
        fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)? + "\n")?;
        fs::write(out.join(format!("{stem}.txt")), &table)?;
        fs::write(out.join(RUN_CONFIG), config.to_toml()?)?;
        if a.plot {
            crate::plot::ablation_bars(&report, &out.join(format!("{stem}.png")))?;
        }
    }
    if report.failed() > 0 {
        return Err(PartialGrid(format!("{} of {} ablation rows failed", report.failed(), report.rows.len())).into());
    }
    Ok(())
}

pub fn bound_probe(a: ProbeArgs) -> Result<()> {
    let config = load_config(&a.config, None, None)?;
    prepare_output_dir(&a.out, a.force)?;
    fs::write(a.out.join(RUN_CONFIG), config.to_toml()?)?;
    let report = theory::sweep(&config.probe, &config.synthetic, &config.model, &config.loss)?;
    report.write(&a.out)?;
    print!("{}", report.table());
    println!(
        "epsilon strictly increasing: {:?}; spearman(gap, epsilon): {:?}; q=0 gap {:?} within band {:?}: {:?}",
        report.epsilon_strictly_increasing,
        report.spearman_gap_epsilon,
        report.q0_mean_gap,
        report.noise_band,
        report.q0_within_band
    );
    if report.degenerate {
        println!("report is degenerate: the grid is too small for trend statistics");
    }
    if a.plot {
        crate::plot::probe_trend(&report, &a.out.join("bound_report.png"))?;
    }
    if report.failed_cells > 0 {
        return Err(PartialGrid(format!("{} of {} probe cells failed", report.failed_cells, report.cells.len())).into());
    }
    Ok(())
}
