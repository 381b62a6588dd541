//! Training modes, stage selection and run directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, ReferringSample, Split};
use crate::error::{Error, Result};
use crate::model::{LossConfig, Network, NetworkConfig};
use crate::rng;
use crate::text::Vocabulary;
use crate::train::{EpochRecord, Stage, TrainConfig, TrainData, TrainObserver, Trainer, TrainerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Stage 1 on the accurate subset only.
    OnlyAccurate,
    /// Stage 1, then stage 3 on the mixed split without a bank.
    Wrel,
    /// All three stages.
    LrbWrel,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::OnlyAccurate => "only-accurate",
            Self::Wrel => "wrel",
            Self::LrbWrel => "lrb-wrel",
        }
    }

    /// Stages this mode runs under `config`.
    pub fn stages(self, config: &TrainConfig) -> Vec<Stage> {
        match self {
            Self::OnlyAccurate => vec![Stage::Stage1],
            Self::Wrel => vec![Stage::Stage1, Stage::Stage3],
            Self::LrbWrel if config.uses_bank() => vec![Stage::Stage1, Stage::Stage2, Stage::Stage3],
            Self::LrbWrel => vec![Stage::Stage1, Stage::Stage3],
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "only-accurate" => Ok(Self::OnlyAccurate),
            "wrel" => Ok(Self::Wrel),
            "lrb-wrel" => Ok(Self::LrbWrel),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTarget {
    Warmup,
    Lrb,
    Joint,
    All,
}

impl StageTarget {
    pub fn name(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Lrb => "lrb",
            Self::Joint => "joint",
            Self::All => "all",
        }
    }
}

impl FromStr for StageTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "lrb" => Ok(Self::Lrb),
            "joint" => Ok(Self::Joint),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

/// Vocabulary over every expression, weak expression and class name of the
/// training manifest. Built before the split so that runs on different splits
/// or corruption levels of the same scenes share one vocabulary.
pub fn build_vocabulary(manifest: &DatasetManifest) -> Vocabulary {
    let weak: Vec<String> = manifest.samples.iter().map(ReferringSample::weak_text).collect();
    Vocabulary::build(
        manifest
            .samples
            .iter()
            .flat_map(|s| [s.expression.as_str(), s.category.as_str()])
            .chain(weak.iter().map(String::as_str)),
    )
}

pub fn init_network(vocab: Vocabulary, config: &NetworkConfig, seed: u64) -> Result<Network> {
    Network::new(vocab, config, &mut rng::stream(seed, &[rng::tag("init")]))
}

/// Training data for `mode`; `only-accurate` drops the weak subset.
pub fn prepare_data(split: &Split, val: Vec<ReferringSample>, mode: Mode) -> TrainData {
    TrainData {
        accurate: split.accurate.clone(),
        weak: match mode {
            Mode::OnlyAccurate => Vec::new(),
            _ => split.weak.clone(),
        },
        val,
    }
}

/// Parameter and bank digests at the end of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBoundary {
    pub stage: u8,
    pub epochs: usize,
    pub t: u64,
    pub student_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank_checksum: Option<String>,
}

fn boundary(state: &TrainerState) -> StageBoundary {
    StageBoundary {
        stage: state.progress.stage.number(),
        epochs: state.progress.epoch,
        t: state.t,
        student_checksum: state.student.checksum(),
        teacher_checksum: state.teacher.as_ref().map(Network::checksum),
        bank_checksum: state.bank.as_ref().map(|b| b.checksum()),
    }
}

/// Stages of `mode` that `target` runs from `state`, or why it cannot.
///
/// `warmup` runs stage 1; `lrb` needs a stage-1 state and runs stage 2;
/// `joint` needs a stage-2 state with a bank (or a stage-1 state when the
/// mode has no bank) and runs stage 3; `all` runs whatever remains.
pub fn plan_stages(config: &TrainConfig, mode: Mode, target: StageTarget, state: &TrainerState) -> Result<Vec<Stage>> {
    let plan = mode.stages(config);
    let reached = state.progress.stage;
    Ok(match target {
        StageTarget::All => plan,
        StageTarget::Warmup => vec![Stage::Stage1],
        StageTarget::Lrb => {
            if !plan.contains(&Stage::Stage2) {
                return Err(Error::Config(format!(
                    "stage lrb is not part of mode {} with inner_steps {}",
                    mode.name(),
                    config.stage3.inner_steps
                )));
            }
            if reached < Stage::Stage1 {
                return Err(Error::Config("stage lrb requires a stage-1 checkpoint".into()));
            }
            vec![Stage::Stage2]
        }
        StageTarget::Joint => {
            if !plan.contains(&Stage::Stage3) {
                return Err(Error::Config(format!("mode {} has no joint stage", mode.name())));
            }
            if plan.contains(&Stage::Stage2) && (reached < Stage::Stage2 || state.bank.is_none()) {
                return Err(Error::Config(
                    "stage joint in lrb-wrel mode requires a stage-2 bank checkpoint".into(),
                ));
            }
            if reached < Stage::Stage1 {
                return Err(Error::Config("stage joint requires a stage-1 checkpoint".into()));
            }
            vec![Stage::Stage3]
        }
    })
}

/// Runs the stages of `mode` selected by `target` (see [`plan_stages`]),
/// continuing from `state`.
pub fn run_training(
    config: &TrainConfig,
    loss: &LossConfig,
    mode: Mode,
    target: StageTarget,
    data: &TrainData,
    mut state: TrainerState,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainerState, Vec<StageBoundary>)> {
    config.validate()?;
    loss.validate()?;
    let selected = plan_stages(config, mode, target, &state)?;
    let mut trainer = Trainer {
        config,
        loss,
        data,
        observer,
    };
    let mut boundaries = Vec::new();
    for stage in selected {
        match stage {
            Stage::Stage1 => trainer.stage1(&mut state)?,
            Stage::Stage2 => trainer.stage2(&mut state)?,
            Stage::Stage3 => trainer.stage3(&mut state)?,
            Stage::Init => {}
        }
        boundaries.push(boundary(&state));
    }
    Ok((state, boundaries))
}

/// Fresh training state for `vocab` and `network`.
pub fn fresh_state(vocab: Vocabulary, network: &NetworkConfig, config: &TrainConfig) -> Result<TrainerState> {
    let net = init_network(vocab, network, config.seed)?;
    Ok(TrainerState::new(net, config.stage1.weight_decay))
}

pub fn checkpoint_name(stage: u8, epoch: usize) -> String {
    format!("stage{stage}-epoch{epoch}")
}

/// Observer that appends `metrics.jsonl` and writes checkpoints into a run
/// directory.
pub struct RunDir {
    pub root: PathBuf,
    /// Checkpoint every this many epochs of each stage; 0 disables them.
    pub checkpoint_every: usize,
    pub records: Vec<EpochRecord>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUN_CONFIG: &str = "config.toml";

impl RunDir {
    /// Prepares `root`. A nonempty directory is rejected unless `force`, in
    /// which case its contents are removed.
    pub fn create(root: &Path, force: bool, checkpoint_every: usize) -> Result<Self> {
        prepare_output_dir(root, force)?;
        let metrics = root.join(METRICS_FILE);
        fs::write(&metrics, "").map_err(|e| Error::io(&metrics, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            checkpoint_every,
            records: Vec::new(),
        })
    }

    /// Reopens an existing run directory, truncating `metrics.jsonl` to the
    /// records up to and including the resumed checkpoint.
    pub fn reopen(root: &Path, upto: (u8, usize), checkpoint_every: usize) -> Result<Self> {
        let metrics = root.join(METRICS_FILE);
        let text = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
        // Kept lines are copied verbatim; reparsed floats may not round-trip.
        let mut records = Vec::new();
        let mut out = String::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: EpochRecord = serde_json::from_str(line)?;
            if (r.stage, r.epoch) <= upto {
                records.push(r);
                out += line;
                out.push('\n');
            }
        }
        fs::write(&metrics, out).map_err(|e| Error::io(&metrics, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            checkpoint_every,
            records,
        })
    }
}

impl TrainObserver for RunDir {
    fn on_epoch(&mut self, state: &TrainerState, record: &EpochRecord) -> Result<()> {
        let path = self.root.join(METRICS_FILE);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(&path, e))?;
        if self.checkpoint_every > 0 && record.epoch % self.checkpoint_every == 0 {
            state.save(&self.root.join(checkpoint_name(record.stage, record.epoch)))?;
        }
        self.records.push(record.clone());
        Ok(())
    }
}

/// Creates `dir`, refusing a nonempty one unless `force` (which clears it).
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if nonempty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --force)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Contents of the run directory's `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: Mode,
    pub stage: StageTarget,
    pub seed: u64,
    pub config_digest: String,
    pub train_digest: String,
    pub val_digest: Option<String>,
    pub n_accurate: usize,
    pub n_weak: usize,
    pub n_val: usize,
    pub vocab_size: usize,
    pub init_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<String>,
    pub stages: Vec<StageBoundary>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(RUN_MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_stage_plans() {
        let mut c = TrainConfig::default();
        assert_eq!(Mode::OnlyAccurate.stages(&c), vec![Stage::Stage1]);
        assert_eq!(Mode::Wrel.stages(&c), vec![Stage::Stage1, Stage::Stage3]);
        assert_eq!(Mode::LrbWrel.stages(&c).len(), 3);
        c.stage3.inner_steps = 0;
        assert_eq!(Mode::LrbWrel.stages(&c), Mode::Wrel.stages(&c));
        assert_eq!("lrb-wrel".parse::<Mode>().unwrap(), Mode::LrbWrel);
        assert!("both".parse::<Mode>().is_err());
        assert_eq!("joint".parse::<StageTarget>().unwrap(), StageTarget::Joint);
    }

    #[test]
    fn output_dir_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        prepare_output_dir(&out, false).unwrap();
        fs::write(out.join("x"), "1").unwrap();
        assert!(matches!(prepare_output_dir(&out, false), Err(Error::Config(_))));
        prepare_output_dir(&out, true).unwrap();
        assert!(fs::read_dir(&out).unwrap().next().is_none());
    }
}
