//! Event-level scoring: IoU matching, precision/recall/F1, threshold sweeps,
//! recall-pinned precision and relative center/duration errors.

use serde::{Deserialize, Serialize};

use crate::encoder::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::postproc::{epoch_pipeline, PostprocConfig, Scheme};
use crate::signal::{interval_iou, EventList, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub prediction: usize,
    pub truth: usize,
    pub iou: f64,
}

/// Outcome of matching predictions to truths at one IoU threshold.
///
/// Every prediction that is not a true positive counts as a false positive,
/// including those matched to a truth with too little overlap; the latter are
/// also tallied in `sub_threshold_overlap`, and `fp_no_overlap` counts the
/// rest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Every matched pair, including those below the threshold.
    pub pairs: Vec<MatchedPair>,
    pub iou_threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sub_threshold_overlap: usize,
    pub fp_no_overlap: usize,
    pub n_predictions: usize,
    pub n_truths: usize,
}

impl MatchReport {
    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Greedy matching: predictions in descending confidence (ties by center,
/// then duration, then input position) each take the unmatched truth with the
/// highest positive IoU, the earlier truth on ties. Pairs with IoU ≥ `tau` are
/// true positives.
pub fn match_events(predictions: &EventList, truths: &EventList, tau: f64) -> Result<MatchReport> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("IoU threshold must lie in [0, 1], got {tau}")));
    }
    let preds = predictions.as_slice();
    let truths = truths.as_slice();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&preds[a], &preds[b]);
        q.confidence()
            .total_cmp(&p.confidence())
            .then(p.center().total_cmp(&q.center()))
            .then(p.duration().total_cmp(&q.duration()))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; truths.len()];
    let mut report = MatchReport {
        iou_threshold: tau,
        n_predictions: preds.len(),
        n_truths: truths.len(),
        ..MatchReport::default()
    };
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truths.iter().enumerate() {
            if taken[ti] {
                continue;
            }
            let iou = interval_iou(&preds[pi], t);
            if iou > 0.0 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((ti, iou));
            }
        }
        match best {
            Some((ti, iou)) => {
                taken[ti] = true;
                report.pairs.push(MatchedPair { prediction: pi, truth: ti, iou });
                if iou >= tau {
                    report.tp += 1;
                } else {
                    report.sub_threshold_overlap += 1;
                }
            }
            None => report.fp_no_overlap += 1,
        }
    }
    report.fp = preds.len() - report.tp;
    report.fn_ = truths.len() - report.tp;
    Ok(report)
}

/// Largest number of true positives over all one-to-one assignments
/// (exhaustive search; meant for small instances).
pub fn optimal_tp(predictions: &EventList, truths: &EventList, tau: f64) -> usize {
    fn go(p: usize, preds: &[crate::Event], truths: &[crate::Event], used: &mut Vec<bool>, tau: f64) -> usize {
        if p == preds.len() {
            return 0;
        }
        let mut best = go(p + 1, preds, truths, used, tau);
        for t in 0..truths.len() {
            if !used[t] {
                let iou = interval_iou(&preds[p], &truths[t]);
                if iou > 0.0 && iou >= tau {
                    used[t] = true;
                    best = best.max(1 + go(p + 1, preds, truths, used, tau));
                    used[t] = false;
                }
            }
        }
        best
    }
    go(0, predictions.as_slice(), truths.as_slice(), &mut vec![false; truths.len()], tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision is 0 without predictions, recall 0 without truths, F1 0 when
/// both are 0.
pub fn prf(c: Counts) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    // 2PR/(P+R) written over the counts, so it is a single rounded division
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Prf { precision, recall, f1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Operating points ordered by strictly decreasing threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub points: Vec<OperatingPoint>,
}

impl PrCurve {
    /// Highest-F1 point; the highest threshold wins ties.
    pub fn best(&self) -> Option<&OperatingPoint> {
        self.points.iter().fold(None, |best: Option<&OperatingPoint>, p| match best {
            Some(b) if b.f1 >= p.f1 => Some(b),
            _ => Some(p),
        })
    }

    pub fn best_f1(&self) -> f64 {
        self.best().map_or(0.0, |p| p.f1)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for p in &self.points {
            w.serialize(p).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &std::path::Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// `n` evenly spaced thresholds covering [0, 1].
pub fn threshold_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub const DEFAULT_GRID_POINTS: usize = 101;

/// Builds a curve from `predict(θ)`, which returns the predictions of every
/// record at threshold θ, paired with the record's truths. Counts are pooled
/// over records before computing the scores.
pub fn curve_from<F>(thresholds: &[f64], tau: f64, mut predict: F) -> Result<PrCurve>
where
    F: FnMut(f64) -> Result<Vec<(EventList, EventList)>>,
{
    let mut ths = thresholds.to_vec();
    if ths.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument("thresholds must lie in [0, 1]".into()));
    }
    ths.sort_by(|a, b| b.total_cmp(a));
    ths.dedup();
    let mut points = Vec::with_capacity(ths.len());
    for th in ths {
        let mut c = Counts::default();
        for (pred, truth) in predict(th)? {
            c += match_events(&pred, &truth, tau)?.counts();
        }
        let s = prf(c);
        points.push(OperatingPoint {
            threshold: th,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        });
    }
    Ok(PrCurve { iou_threshold: tau, points })
}

/// Network output of one record together with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordOutput {
    pub grid: TimeGrid,
    /// Center signal (event model) or per-sample probability (epoch model).
    pub confidence: Vec<f64>,
    /// Duration signal, event model only.
    pub duration: Option<Vec<f64>>,
    pub truths: EventList,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoder {
    Event(DecodeConfig),
    Epoch(Scheme, PostprocConfig),
}

/// Decodes every record at every threshold and scores the pooled matches.
///
/// For the event decoder the peaks are found once, since peak selection does
/// not depend on the threshold, and then filtered by confidence.
pub fn sweep(records: &[RecordOutput], decoder: &Decoder, tau: f64, thresholds: &[f64]) -> Result<PrCurve> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot sweep an empty dataset".into()));
    }
    match decoder {
        Decoder::Event(cfg) => {
            let all_peaks = records
                .iter()
                .map(|r| {
                    let dur = r.duration.as_ref().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "record with {} samples lacks a duration signal",
                            r.confidence.len()
                        ))
                    })?;
                    decode(&r.confidence, dur, &r.grid, &DecodeConfig { confidence_threshold: 0.0, ..*cfg })
                })
                .collect::<Result<Vec<_>>>()?;
            curve_from(thresholds, tau, |th| {
                Ok(all_peaks.iter().zip(records).map(|(p, r)| (p.above(th), r.truths.clone())).collect())
            })
        }
        Decoder::Epoch(scheme, cfg) => curve_from(thresholds, tau, |th| {
            records
                .iter()
                .map(|r| Ok((epoch_pipeline(&r.confidence, th, *scheme, &r.grid, cfg)?, r.truths.clone())))
                .collect()
        }),
    }
}

/// For each recall level, the best precision among points reaching it, or
/// `None` when no operating point does.
pub fn precision_at_recall(curve: &PrCurve, recall_levels: &[f64]) -> Vec<Option<f64>> {
    recall_levels
        .iter()
        .map(|&level| {
            curve
                .points
                .iter()
                .filter(|p| p.recall >= level && p.tp > 0)
                .map(|p| p.precision)
                .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))))
        })
        .collect()
}

/// Median and interquartile range (linear interpolation between order
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
    Some(Summary { median: quantile(&v, 0.5), q1, q3, iqr: q3 - q1 })
}

/// Relative errors over all matched pairs with positive overlap, normalized
/// by the truth duration. A positive center offset means the prediction lies
/// later in time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub center_offsets: Vec<f64>,
    pub duration_errors: Vec<f64>,
    pub center_summary: Option<Summary>,
    pub duration_summary: Option<Summary>,
}

pub fn center_duration_errors(report: &MatchReport, predictions: &EventList, truths: &EventList) -> Result<ErrorStats> {
    let mut center_offsets = Vec::with_capacity(report.pairs.len());
    let mut duration_errors = Vec::with_capacity(report.pairs.len());
    for pair in report.pairs.iter().filter(|p| p.iou > 0.0) {
        let (p, t) = match (predictions.get(pair.prediction), truths.get(pair.truth)) {
            (Some(p), Some(t)) => (p, t),
            _ => return Err(Error::InvalidArgument("match report does not belong to these event lists".into())),
        };
        center_offsets.push((p.center() - t.center()) / t.duration());
        duration_errors.push((p.duration() - t.duration()) / t.duration());
    }
    Ok(ErrorStats {
        center_summary: summarize(&center_offsets),
        duration_summary: summarize(&duration_errors),
        center_offsets,
        duration_errors,
    })
}
