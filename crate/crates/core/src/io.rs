//! File formats: annotation JSON, raw `f32` records with a JSON sidecar, and
//! CSV ingestion.
//!
//! A record `id` stored in a directory occupies three files:
//! `id.f32` (little-endian samples, channel-major), `id.json` (sidecar) and
//! `id.events.json` (annotations).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Event, EventList, SignalRecord};

/// One entry of an annotation file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub onset_s: f64,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl AnnotationEntry {
    pub fn to_event(self) -> Result<Event> {
        let e = Event::from_bounds(self.onset_s, self.onset_s + self.duration_s)?;
        match self.confidence {
            Some(c) => e.with_confidence(c),
            None => Ok(e),
        }
    }
}

/// Sidecar metadata of a raw record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSidecar {
    pub fs: f64,
    pub channels: usize,
    pub length: usize,
    pub id: String,
}

pub fn events_to_entries(events: &EventList, with_confidence: bool) -> Vec<AnnotationEntry> {
    events
        .iter()
        .map(|e| AnnotationEntry {
            onset_s: e.start(),
            duration_s: e.duration(),
            confidence: with_confidence.then_some(e.confidence()),
        })
        .collect()
}

pub fn entries_to_events(entries: &[AnnotationEntry]) -> Result<EventList> {
    entries.iter().map(|a| a.to_event()).collect::<Result<Vec<_>>>().map(EventList::new)
}

pub fn write_annotations(path: &Path, events: &EventList, with_confidence: bool) -> Result<()> {
    let json = serde_json::to_vec_pretty(&events_to_entries(events, with_confidence))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<EventList> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<AnnotationEntry> =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    entries_to_events(&entries).map_err(|e| Error::format(path, e.to_string()))
}

fn record_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(format!("{id}.f32")), dir.join(format!("{id}.json")), dir.join(format!("{id}.events.json")))
}

pub fn write_record(dir: &Path, record: &SignalRecord) -> Result<()> {
    let (raw, sidecar, events) = record_paths(dir, record.id());
    let mut bytes = Vec::with_capacity(4 * record.len() * record.n_channels());
    for ch in record.channels() {
        for v in ch {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let meta = RecordSidecar {
        fs: record.fs(),
        channels: record.n_channels(),
        length: record.len(),
        id: record.id().to_string(),
    };
    fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))?;
    write_annotations(&events, record.annotations(), false)
}

/// Reads `id` from `dir`; a missing annotation file means no annotations.
pub fn read_record(dir: &Path, id: &str) -> Result<SignalRecord> {
    let (raw, sidecar, events) = record_paths(dir, id);
    let meta_bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: RecordSidecar =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != 4 * meta.channels * meta.length {
        return Err(Error::format(
            &raw,
            format!(
                "expected {} bytes for {} channels x {} samples, found {}",
                4 * meta.channels * meta.length,
                meta.channels,
                meta.length,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let channels = if meta.length == 0 {
        vec![Vec::new(); meta.channels]
    } else {
        values.chunks(meta.length).map(<[f32]>::to_vec).collect()
    };
    let annotations = if events.exists() { read_annotations(&events)? } else { EventList::empty() };
    SignalRecord::new(meta.id, meta.fs, channels, annotations).map_err(|e| Error::format(&sidecar, e.to_string()))
}

/// All record ids in `dir`, sorted, identified by their sidecar files.
pub fn list_records(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(id) = name.strip_suffix(".json") {
            if !id.ends_with(".events") && name != "manifest.json" && path.with_extension("f32").exists() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_records(dir: &Path) -> Result<Vec<SignalRecord>> {
    list_records(dir)?.iter().map(|id| read_record(dir, id)).collect()
}

/// CSV with a header row and one column per channel.
pub fn read_csv_record(path: &Path, fs: f64, id: &str, annotations: EventList) -> Result<SignalRecord> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let n_cols = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.len();
    if n_cols == 0 {
        return Err(Error::format(path, "CSV header has no columns"));
    }
    let mut channels = vec![Vec::new(); n_cols];
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if rec.len() != n_cols {
            return Err(Error::format(path, format!("row {} has {} columns, expected {n_cols}", row + 1, rec.len())));
        }
        for (ch, field) in channels.iter_mut().zip(rec.iter()) {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: cannot parse '{field}' as a number", row + 1)))?;
            ch.push(v);
        }
    }
    SignalRecord::new(id, fs, channels, annotations).map_err(|e| Error::format(path, e.to_string()))
}
