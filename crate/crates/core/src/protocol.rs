//! End-to-end comparison on simulated data: train the event model and the
//! epoch baseline on one generated training split, then score the event
//! decoder and the three epoch post-processing schemes on the test split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, HeadKind};
use crate::encoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluator::{sweep, threshold_grid, Decoder, PrCurve, RecordOutput, DEFAULT_GRID_POINTS};
use crate::postproc::{PostprocConfig, Scheme};
use crate::signal::SignalRecord;
use crate::simgen::{generate, SimConfig, Source, Split};
use crate::trainer::{infer, make_windows, train_epoch_baseline, train_event, LossTrace, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Approach {
    #[serde(rename = "event")]
    Event,
    #[serde(rename = "epoch-none")]
    EpochNone,
    #[serde(rename = "epoch-median")]
    EpochMedian,
    #[serde(rename = "epoch-morph")]
    EpochMorph,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::Event, Approach::EpochNone, Approach::EpochMedian, Approach::EpochMorph];

    pub fn name(self) -> &'static str {
        match self {
            Approach::Event => "event",
            Approach::EpochNone => "epoch-none",
            Approach::EpochMedian => "epoch-median",
            Approach::EpochMorph => "epoch-morph",
        }
    }

    pub fn scheme(self) -> Option<Scheme> {
        match self {
            Approach::Event => None,
            Approach::EpochNone => Some(Scheme::None),
            Approach::EpochMedian => Some(Scheme::Median),
            Approach::EpochMorph => Some(Scheme::Morphology),
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Approach::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown scheme '{s}' (expected event, epoch-none, epoch-median or epoch-morph)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Generator settings; `n_segments` is the size of the training split.
    pub sim: SimConfig,
    pub n_test_segments: usize,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub postproc: PostprocConfig,
    pub iou_thresholds: Vec<f64>,
    pub grid_points: usize,
}

impl Default for ProtocolConfig {
    /// Easy-preset data with the tiny backbone. Both models get 40 epochs; the
    /// center head starts from a 1% prior, without which the event model is
    /// still far from converged at that budget on some seeds.
    fn default() -> Self {
        let backbone = BackboneConfig { center_prior: Some(0.01), ..BackboneConfig::tiny(HeadKind::Event) };
        Self {
            sim: SimConfig::easy(),
            n_test_segments: 500,
            train: TrainConfig { batch_size: 8, epochs: 40, lr: 2e-3, backbone, ..TrainConfig::default() },
            decode: DecodeConfig { nms_window_s: 2.0, ..DecodeConfig::default() },
            postproc: PostprocConfig::default(),
            iou_thresholds: vec![0.25, 0.75],
            grid_points: DEFAULT_GRID_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub approach: Approach,
    pub iou_threshold: f64,
    pub best_f1: f64,
    pub best_threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

pub struct ProtocolResult {
    pub rows: Vec<ProtocolRow>,
    pub curves: Vec<(Approach, PrCurve)>,
    pub event: TrainOutcome,
    pub epoch: TrainOutcome,
}

impl ProtocolResult {
    pub fn best_f1(&self, approach: Approach, iou_threshold: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.approach == approach && r.iou_threshold == iou_threshold).map(|r| r.best_f1)
    }

    pub fn traces(&self) -> (&LossTrace, &LossTrace) {
        (&self.event.trace, &self.epoch.trace)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Scores trained models on `test` records.
pub fn evaluate_models(
    event: &TrainOutcome,
    epoch: &TrainOutcome,
    test: &[SignalRecord],
    cfg: &ProtocolConfig,
) -> Result<(Vec<ProtocolRow>, Vec<(Approach, PrCurve)>)> {
    let outputs = |o: &TrainOutcome| -> Result<Vec<RecordOutput>> {
        test.iter().map(|r| Ok(infer(&o.model, r)?.with_truths(r.annotations().clone()))).collect()
    };
    let event_out = outputs(event)?;
    let epoch_out = outputs(epoch)?;
    let thresholds = threshold_grid(cfg.grid_points);
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &tau in &cfg.iou_thresholds {
        for approach in Approach::ALL {
            let (records, decoder) = match approach.scheme() {
                None => (&event_out, Decoder::Event(cfg.decode)),
                Some(s) => (&epoch_out, Decoder::Epoch(s, cfg.postproc)),
            };
            let curve = sweep(records, &decoder, tau, &thresholds)?;
            let best = curve.best().copied().ok_or_else(|| Error::InvalidArgument("empty threshold grid".into()))?;
            rows.push(ProtocolRow {
                approach,
                iou_threshold: tau,
                best_f1: best.f1,
                best_threshold: best.threshold,
                precision: best.precision,
                recall: best.recall,
            });
            curves.push((approach, curve));
        }
    }
    Ok((rows, curves))
}

pub fn run_protocol(cfg: &ProtocolConfig) -> Result<ProtocolResult> {
    cfg.decode.validate()?;
    let train_set = generate(&cfg.sim, Split::Train, &Source::Synthetic)?;
    let test_cfg = SimConfig { n_segments: cfg.n_test_segments, ..cfg.sim.clone() };
    let test_set = generate(&test_cfg, Split::Test, &Source::Synthetic)?;
    let windows =
        make_windows(&train_set.records, cfg.train.window_s, cfg.train.stride_s, cfg.train.backbone.output_stride())?;
    log::info!("training on {} windows, testing on {} segments", windows.len(), test_set.records.len());
    let event = train_event(&windows, &cfg.train)?;
    let epoch = train_epoch_baseline(&windows, &cfg.train)?;
    let (rows, curves) = evaluate_models(&event, &epoch, &test_set.records, cfg)?;
    Ok(ProtocolResult { rows, curves, event, epoch })
}
