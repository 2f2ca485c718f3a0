//! Domain types shared by every stage of the pipeline: events, event lists,
//! annotated recordings and the output time grid.
//!
//! An [`Event`] is stored as `(center, duration)`; `(start, stop)` is derived.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that annotations fit inside a recording.
const BOUNDS_EPS: f64 = 1e-9;

/// One annotated or predicted interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    center: f64,
    duration: f64,
    confidence: f64,
}

impl Event {
    pub fn new(center: f64, duration: f64, confidence: f64) -> Result<Self> {
        if !center.is_finite() {
            return Err(Error::InvalidEvent(format!("center must be finite, got {center}")));
        }
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::InvalidEvent(format!("duration must be positive, got {duration}")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidEvent(format!("confidence must lie in [0, 1], got {confidence}")));
        }
        Ok(Self { center, duration, confidence })
    }

    /// Ground-truth event (confidence 1) from its bounds.
    pub fn from_bounds(start: f64, stop: f64) -> Result<Self> {
        if !(stop > start) || !start.is_finite() || !stop.is_finite() {
            return Err(Error::InvalidInterval { start, stop });
        }
        Self::new(0.5 * (start + stop), stop - start, 1.0)
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn start(&self) -> f64 {
        self.center - 0.5 * self.duration
    }

    pub fn stop(&self) -> f64 {
        self.center + 0.5 * self.duration
    }

    pub fn with_confidence(self, confidence: f64) -> Result<Self> {
        Self::new(self.center, self.duration, confidence)
    }

    /// The same event moved by `dt` seconds.
    pub fn shifted(self, dt: f64) -> Self {
        Self { center: self.center + dt, ..self }
    }

    /// Intersection-over-union of the two intervals on the real line.
    pub fn iou(&self, other: &Event) -> f64 {
        interval_iou(self, other)
    }
}

pub fn event_from_bounds(start: f64, stop: f64) -> Result<Event> {
    Event::from_bounds(start, stop)
}

/// `|a ∩ b| / |a ∪ b|`; intervals that only touch have IoU 0.
pub fn interval_iou(a: &Event, b: &Event) -> f64 {
    let inter = (a.stop().min(b.stop()) - a.start().max(b.start())).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    // overlapping intervals: the union is their hull
    let union = a.stop().max(b.stop()) - a.start().min(b.start());
    (inter / union).clamp(0.0, 1.0)
}

fn event_order(a: &Event, b: &Event) -> std::cmp::Ordering {
    a.center.total_cmp(&b.center).then(a.duration.total_cmp(&b.duration))
}

/// Events sorted by center, ties broken by duration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Event>", into = "Vec<Event>")]
pub struct EventList {
    events: Vec<Event>,
}

impl EventList {
    pub fn new(mut events: Vec<Event>) -> Self {
        events.sort_by(event_order);
        Self { events }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: Event) {
        let at = self.events.partition_point(|e| event_order(e, &event) != std::cmp::Ordering::Greater);
        self.events.insert(at, event);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Event> {
        self.events.iter()
    }

    pub fn as_slice(&self) -> &[Event] {
        &self.events
    }

    pub fn get(&self, i: usize) -> Option<&Event> {
        self.events.get(i)
    }

    /// Events whose confidence exceeds `threshold`.
    pub fn above(&self, threshold: f64) -> EventList {
        Self { events: self.events.iter().copied().filter(|e| e.confidence > threshold).collect() }
    }
}

impl From<Vec<Event>> for EventList {
    fn from(events: Vec<Event>) -> Self {
        Self::new(events)
    }
}

impl From<EventList> for Vec<Event> {
    fn from(list: EventList) -> Self {
        list.events
    }
}

impl<'a> IntoIterator for &'a EventList {
    type Item = &'a Event;
    type IntoIter = std::slice::Iter<'a, Event>;

    fn into_iter(self) -> Self::IntoIter {
        self.events.iter()
    }
}

impl FromIterator<Event> for EventList {
    fn from_iter<I: IntoIterator<Item = Event>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// A sampled recording with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    id: String,
    fs: f64,
    channels: Vec<Vec<f32>>,
    annotations: EventList,
}

impl SignalRecord {
    pub fn new(id: impl Into<String>, fs: f64, channels: Vec<Vec<f32>>, annotations: EventList) -> Result<Self> {
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(Error::InvalidArgument(format!("sampling rate must be positive, got {fs}")));
        }
        if channels.is_empty() {
            return Err(Error::InvalidArgument("a record needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("all channels must have equal length".into()));
        }
        let end = len as f64 / fs;
        for e in &annotations {
            if e.start() < -BOUNDS_EPS || e.stop() > end + BOUNDS_EPS {
                return Err(Error::InvalidEvent(format!(
                    "annotation [{}, {}] s lies outside the recording [0, {end}] s",
                    e.start(),
                    e.stop()
                )));
            }
        }
        Ok(Self { id: id.into(), fs, channels, annotations })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.fs
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.channels[i]
    }

    pub fn annotations(&self) -> &EventList {
        &self.annotations
    }
}

/// Sample grid at the model's output rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub fs_out: f64,
    pub length: usize,
}

impl TimeGrid {
    pub fn new(fs_out: f64, length: usize) -> Result<Self> {
        if !(fs_out > 0.0) || !fs_out.is_finite() {
            return Err(Error::InvalidArgument(format!("output rate must be positive, got {fs_out}")));
        }
        Ok(Self { fs_out, length })
    }

    /// Grid obtained by decimating `input_len` samples at `fs_in` by `stride_factor`.
    pub fn from_input(fs_in: f64, input_len: usize, stride_factor: usize) -> Result<Self> {
        if stride_factor == 0 {
            return Err(Error::InvalidArgument("stride factor must be positive".into()));
        }
        Self::new(fs_in / stride_factor as f64, input_len.div_ceil(stride_factor))
    }

    pub fn duration_s(&self) -> f64 {
        self.length as f64 / self.fs_out
    }

    pub fn index_to_seconds(&self, i: usize) -> f64 {
        i as f64 / self.fs_out
    }

    pub fn seconds_to_index(&self, t: f64) -> Result<usize> {
        seconds_to_index(t, self)
    }
}

/// Nearest grid index of time `t`, clamped to the last sample.
pub fn seconds_to_index(t: f64, grid: &TimeGrid) -> Result<usize> {
    let end = grid.duration_s();
    if grid.length == 0 || !(t >= 0.0 && t <= end) {
        return Err(Error::OutOfRange { t, end });
    }
    let i = (t * grid.fs_out).round() as usize;
    Ok(i.min(grid.length - 1))
}
