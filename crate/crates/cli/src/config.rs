//! Run configuration: one TOML file whose tables mirror the library configs,
//! with command-line flags applied on top.

use std::path::Path;

use anyhow::{bail, Context, Result};
use evdet::encoder::DecodeConfig;
use evdet::evaluator::DEFAULT_GRID_POINTS;
use evdet::postproc::PostprocConfig;
use evdet::protocol::{Approach, ProtocolConfig};
use evdet::simgen::SimConfig;
use evdet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Decoding scheme; when unset it follows the checkpoint's head
    /// (`event` for event models, `epoch-none` for epoch models).
    pub scheme: Option<Approach>,
    /// Probability threshold of the epoch schemes. The event scheme uses
    /// `decode.confidence_threshold`.
    pub epoch_threshold: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { scheme: None, epoch_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub iou_threshold: f64,
    pub recall_levels: Vec<f64>,
    pub grid_points: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            recall_levels: (1..=9).map(|i| i as f64 / 10.0).collect(),
            grid_points: DEFAULT_GRID_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Size of the test split; `sim.n_segments` sizes the training split.
    pub n_test_segments: usize,
    pub iou_thresholds: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { n_test_segments: 250, iou_thresholds: vec![0.25, 0.75] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub postproc: PostprocConfig,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
    pub sweep: SweepSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iou_threshold: Option<f64>,
    pub recall_levels: Option<Vec<f64>>,
    pub scheme: Option<Approach>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.sim.seed = seed;
            self.train.seed = seed;
        }
        if let Some(tau) = o.iou_threshold {
            if !(0.0..=1.0).contains(&tau) {
                bail!("--iou-threshold must lie in [0, 1], got {tau}");
            }
            self.evaluate.iou_threshold = tau;
            self.sweep.iou_thresholds = vec![tau];
        }
        if let Some(levels) = &o.recall_levels {
            if let Some(bad) = levels.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                bail!("recall levels must lie in [0, 1], got {bad}");
            }
            self.evaluate.recall_levels = levels.clone();
        }
        if let Some(scheme) = o.scheme {
            self.predict.scheme = Some(scheme);
        }
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            sim: self.sim.clone(),
            n_test_segments: self.sweep.n_test_segments,
            train: self.train.clone(),
            decode: self.decode,
            postproc: self.postproc,
            iou_thresholds: self.sweep.iou_thresholds.clone(),
            grid_points: self.evaluate.grid_points,
        }
    }
}

/// Comma-separated list given as a single flag value.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallLevels(pub Vec<f64>);

pub fn parse_recall_levels(s: &str) -> Result<RecallLevels, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad recall level '{v}': {e}")))
        .collect::<Result<_, _>>()
        .map(RecallLevels)
}
