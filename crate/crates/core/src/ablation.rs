//! One-knob sweeps over the LRB-WREL pipeline.

use serde::{Deserialize, Serialize};

use crate::data::{ReferringSample, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, format_table, MetricsReport};
use crate::model::{LossConfig, NetworkConfig};
use crate::pipeline::{fresh_state, prepare_data, run_training, Mode, StageTarget};
use crate::text::Vocabulary;
use crate::train::{NoObserver, TrainConfig, TrainerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Knob {
    /// Inner calibration steps `K`.
    Steps,
    /// Calibration frequency `F` in batches.
    Freq,
    /// Stage-1 warm-up epochs.
    Warmup,
}

impl Knob {
    pub fn values(self) -> &'static [usize] {
        match self {
            Self::Steps => &[0, 1, 3, 5],
            Self::Freq => &[1, 3, 5],
            Self::Warmup => &[10, 15, 20],
        }
    }

    /// First column header of the knob's table.
    pub fn header(self) -> &'static str {
        match self {
            Self::Steps => "Step",
            Self::Freq => "Freq",
            Self::Warmup => "Epoch",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Steps => "steps",
            Self::Freq => "freq",
            Self::Warmup => "warmup",
        }
    }

    pub fn apply(self, config: &mut TrainConfig, value: usize) {
        match self {
            Self::Steps => config.stage3.inner_steps = value,
            Self::Freq => config.stage3.update_freq = value,
            Self::Warmup => config.stage1.epochs = value,
        }
    }
}

impl std::str::FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(Self::Steps),
            "freq" => Ok(Self::Freq),
            "warmup" => Ok(Self::Warmup),
            other => Err(Error::Config(format!("unknown knob `{other}` (expected steps, freq or warmup)"))),
        }
    }
}

/// Everything a single training run needs besides the mode.
pub struct Experiment<'a> {
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub network: &'a NetworkConfig,
    pub vocab: &'a Vocabulary,
    pub split: &'a Split,
    pub val: &'a [ReferringSample],
}

impl Experiment<'_> {
    /// Trains `mode` from scratch and evaluates the final student on `val`.
    pub fn run(&self, mode: Mode) -> Result<(TrainerState, MetricsReport)> {
        let data = prepare_data(self.split, Vec::new(), mode);
        let state = fresh_state(self.vocab.clone(), self.network, self.train)?;
        let (state, _) = run_training(self.train, self.loss, mode, StageTarget::All, &data, state, &mut NoObserver)?;
        let report = evaluate(&state.student, self.val, "val", self.loss.threshold)?;
        Ok((state, report))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub knob: Knob,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let rows: Vec<(String, &MetricsReport)> = self
            .rows
            .iter()
            .filter_map(|r| r.report.as_ref().map(|m| (r.value.to_string(), m)))
            .collect();
        format_table(self.knob.header(), &rows)
    }

    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Runs LRB-WREL once per knob value, all other settings from `base.train`.
/// Failed rows are recorded and the sweep continues.
pub fn ablate(knob: Knob, base: &Experiment<'_>) -> AblationReport {
    let rows = knob
        .values()
        .iter()
        .map(|&value| {
            let mut train = base.train.clone();
            knob.apply(&mut train, value);
            let exp = Experiment { train: &train, ..*base };
            match exp.run(Mode::LrbWrel) {
                Ok((_, report)) => AblationRow {
                    value,
                    report: Some(report),
                    error: None,
                },
                Err(e) => {
                    tracing::warn!(knob = knob.name(), value, error = %e, "ablation row failed");
                    AblationRow {
                        value,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    AblationReport { knob, rows }
}
