//! Event encoding into center/duration target signals and decoding of
//! predicted signals back into events.
//!
//! Each event contributes a Gaussian bump `exp(-(t - t*)² / 2σ²)` to the center
//! target, with `σ = α·d / 6` (`α = 0.5`, `d` in output samples); bumps of
//! several events are combined with an elementwise maximum. The duration target
//! only carries meaning at event centers, where it holds the duration divided
//! by the maximum predictable duration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Event, EventList, TimeGrid};

/// Gaussian slack factor of the center target.
pub const CENTER_SLACK_ALPHA: f64 = 0.5;

/// Aligned center and duration targets on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair {
    pub center: Vec<f64>,
    pub duration: Vec<f64>,
    /// Indices where the center target is exactly 1, ascending.
    pub center_mask: Vec<usize>,
}

impl TargetPair {
    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.center_mask.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub confidence_threshold: f64,
    pub nms_window_s: f64,
    pub max_duration_s: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { confidence_threshold: 0.5, nms_window_s: 1.0, max_duration_s: 10.0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_duration_s > 0.0) {
            return Err(Error::Config("max_duration_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config("confidence_threshold must lie in [0, 1]".into()));
        }
        if !(self.nms_window_s >= 0.0) {
            return Err(Error::Config("nms_window_s must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Builds the training targets of `events` on `grid`.
///
/// Events centered outside the grid are skipped. Durations above
/// `max_duration_s` saturate the duration target at 1.
pub fn encode(events: &EventList, grid: &TimeGrid, max_duration_s: f64) -> Result<TargetPair> {
    if grid.length == 0 {
        return Err(Error::InvalidArgument("cannot encode onto an empty grid".into()));
    }
    if !(max_duration_s > 0.0) {
        return Err(Error::InvalidArgument("max_duration_s must be positive".into()));
    }
    let n = grid.length;
    let mut center = vec![0.0f64; n];
    let mut duration = vec![0.0; n];
    let mut mask = Vec::with_capacity(events.len());

    for e in events {
        let Ok(peak) = grid.seconds_to_index(e.center()) else {
            continue;
        };
        let pos = e.center() * grid.fs_out;
        let sigma = CENTER_SLACK_ALPHA * e.duration() * grid.fs_out / 6.0;
        let reach = (6.0 * sigma).ceil() as usize + 1;
        let lo = peak.saturating_sub(reach);
        let hi = (peak + reach + 1).min(n);
        for (i, c) in center.iter_mut().enumerate().take(hi).skip(lo) {
            if i == peak {
                continue;
            }
            let dt = i as f64 - pos;
            // only the designated peak may reach exactly 1
            let v = (-dt * dt / (2.0 * sigma * sigma)).exp().min(1.0 - f64::EPSILON);
            *c = c.max(v);
        }
        center[peak] = 1.0;

        let mut d = e.duration() / max_duration_s;
        if d > 1.0 {
            log::warn!(
                "event of {:.3} s exceeds the maximum duration of {max_duration_s} s; target clamped",
                e.duration()
            );
            d = 1.0;
        }
        duration[peak] = d;
        mask.push(peak);
    }
    mask.sort_unstable();
    mask.dedup();
    Ok(TargetPair { center, duration, center_mask: mask })
}

/// Indices kept by peak picking: above `threshold` and the maximum of the
/// `±half` neighborhood. Ties go to the earliest index.
pub fn find_peaks(signal: &[f64], half: usize, threshold: f64) -> Vec<usize> {
    let n = signal.len();
    let mut peaks = Vec::new();
    for (i, &v) in signal.iter().enumerate() {
        if !(v > threshold) {
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let earlier_lower = signal[lo..i].iter().all(|&u| u < v);
        let later_not_higher = signal[i + 1..=hi].iter().all(|&u| u <= v);
        if earlier_lower && later_not_higher {
            peaks.push(i);
        }
    }
    peaks
}

/// Half-width of the suppression window in output samples (at least 1).
pub fn nms_half_width(nms_window_s: f64, fs_out: f64) -> usize {
    ((0.5 * nms_window_s * fs_out).floor() as usize).max(1)
}

/// Decodes predicted center/duration signals into events.
pub fn decode(center_pred: &[f64], duration_pred: &[f64], grid: &TimeGrid, cfg: &DecodeConfig) -> Result<EventList> {
    if center_pred.len() != grid.length || duration_pred.len() != grid.length {
        return Err(Error::Shape(format!(
            "center ({}) and duration ({}) predictions must match the grid length {}",
            center_pred.len(),
            duration_pred.len(),
            grid.length
        )));
    }
    let half = nms_half_width(cfg.nms_window_s, grid.fs_out);
    let mut events = Vec::new();
    for i in find_peaks(center_pred, half, cfg.confidence_threshold) {
        let d = duration_pred[i] * cfg.max_duration_s;
        if d <= 0.0 {
            continue;
        }
        let confidence = center_pred[i].clamp(0.0, 1.0);
        events.push(Event::new(grid.index_to_seconds(i), d, confidence)?);
    }
    Ok(EventList::new(events))
}

/// Outcome of decoding the encoding of a known event list.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrip {
    /// Per input event: `(center offset, duration offset)` in seconds against
    /// the nearest decoded event, `None` when nothing was decoded.
    pub offsets: Vec<Option<(f64, f64)>>,
    pub n_decoded: usize,
}

impl RoundTrip {
    /// Whether every event came back as its own detection.
    pub fn is_exact(&self, center_tol: f64, duration_tol: f64) -> bool {
        self.n_decoded == self.offsets.len()
            && self
                .offsets
                .iter()
                .all(|o| matches!(o, Some((dc, dd)) if dc.abs() <= center_tol && dd.abs() <= duration_tol))
    }
}

pub fn roundtrip_check(events: &EventList, grid: &TimeGrid, cfg: &DecodeConfig) -> Result<RoundTrip> {
    let targets = encode(events, grid, cfg.max_duration_s)?;
    let decoded = decode(&targets.center, &targets.duration, grid, cfg)?;
    let offsets = events
        .iter()
        .map(|e| {
            decoded
                .iter()
                .min_by(|a, b| (a.center() - e.center()).abs().total_cmp(&(b.center() - e.center()).abs()))
                .map(|d| (d.center() - e.center(), d.duration() - e.duration()))
        })
        .collect();
    Ok(RoundTrip { offsets, n_decoded: decoded.len() })
}
