//! Windowing, training loops for the event model and the epoch baseline, and
//! inference on whole records.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Checkpoint, Mode, NodeId, Tensor};
use crate::backbone::{BackboneConfig, Forward, HeadKind, HeadNodes, Model, ModelOutput};
use crate::encoder::{decode, encode, DecodeConfig, TargetPair};
use crate::error::{Error, Result};
use crate::evaluator::RecordOutput;
use crate::losses::{combined_loss, epoch_bce, sigmoid, LossConfig};
use crate::postproc::{epoch_pipeline, rasterize, PostprocConfig, Scheme};
use crate::signal::{EventList, SignalRecord, TimeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub window_s: f64,
    /// Hop between consecutive training windows.
    pub stride_s: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_duration_s: f64,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window_s: 20.0,
            stride_s: 5.0,
            batch_size: 16,
            epochs: 10,
            lr: 1e-3,
            seed: 0,
            max_duration_s: 10.0,
            loss: LossConfig::default(),
            backbone: BackboneConfig::tiny(HeadKind::Event),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.window_s > 0.0) || !(self.stride_s > 0.0) {
            return bad("window_s and stride_s must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.max_duration_s > 0.0) {
            return bad("max_duration_s must be positive".into());
        }
        self.loss.validate()?;
        self.backbone.validate()?;
        let n = window_samples(self.window_s, fs);
        let total = self.backbone.total_stride();
        if n % total != 0 {
            return bad(format!("a window of {n} samples is not divisible by the total stride {total}"));
        }
        Ok(())
    }
}

fn window_samples(window_s: f64, fs: f64) -> usize {
    (window_s * fs).round() as usize
}

/// One training window with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub record: usize,
    /// First sample of the window in the record.
    pub offset: usize,
    /// `[channel][sample]`
    pub input: Vec<Vec<f32>>,
    /// Events whose center lies in the window, in window time.
    pub events: EventList,
    /// Output-rate labels covering the support of every overlapping event.
    pub epoch_labels: Vec<f64>,
    pub grid: TimeGrid,
}

/// Tiles every record with windows of `window_s` at a hop of `stride_s`.
pub fn make_windows(
    records: &[SignalRecord],
    window_s: f64,
    stride_s: f64,
    output_stride: usize,
) -> Result<Vec<Window>> {
    let mut windows = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        let fs = rec.fs();
        let n = window_samples(window_s, fs);
        let hop = window_samples(stride_s, fs).max(1);
        if n == 0 || n > rec.len() {
            return Err(Error::InvalidArgument(format!(
                "window of {window_s} s is longer than record {} ({} s)",
                rec.id(),
                rec.duration_s()
            )));
        }
        let grid = TimeGrid::from_input(fs, n, output_stride)?;
        let mut offset = 0;
        while offset + n <= rec.len() {
            let t0 = offset as f64 / fs;
            let t1 = (offset + n) as f64 / fs;
            let shift = |e: &crate::Event| e.shifted(-t0);
            let events: EventList =
                rec.annotations().iter().filter(|e| e.center() >= t0 && e.center() < t1).map(shift).collect();
            let overlapping: EventList =
                rec.annotations().iter().filter(|e| e.stop() > t0 && e.start() < t1).map(shift).collect();
            let epoch_labels = rasterize(&overlapping, &grid).into_iter().map(|b| b as u8 as f64).collect();
            windows.push(Window {
                record: ri,
                offset,
                input: rec.channels().iter().map(|c| c[offset..offset + n].to_vec()).collect(),
                events,
                epoch_labels,
                grid,
            });
            offset += hop;
        }
    }
    Ok(windows)
}

/// Per-step and per-epoch mean losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub steps: Vec<f64>,
    pub epochs: Vec<f64>,
}

impl LossTrace {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("epoch,step,loss\n");
        let per_epoch = if self.epochs.is_empty() { 0 } else { self.steps.len() / self.epochs.len() };
        for (i, l) in self.steps.iter().enumerate() {
            let epoch = if per_epoch == 0 { 0 } else { i / per_epoch };
            out.push_str(&format!("{epoch},{i},{l:?}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: LossTrace,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut train = serde_json::to_value(cfg)?;
        if let Some(obj) = train.as_object_mut() {
            obj.remove("backbone");
        }
        self.model.to_checkpoint(serde_json::json!({
            "train": train,
            "epochs_completed": self.trace.epochs.len(),
        }))
    }
}

fn batch_tensor(windows: &[&Window]) -> Result<Tensor> {
    let c = windows[0].input.len();
    let l = windows[0].input[0].len();
    let mut data = Vec::with_capacity(windows.len() * c * l);
    for w in windows {
        for ch in &w.input {
            if ch.len() != l || w.input.len() != c {
                return Err(Error::Shape("windows in a batch differ in shape".into()));
            }
            data.extend(ch.iter().map(|&v| v as f64));
        }
    }
    Tensor::new(vec![windows.len(), c, l], data)
}

enum Targets {
    Event(Vec<TargetPair>),
    Epoch(Vec<Vec<f64>>),
}

/// Trains the event model (center and duration heads) with the combined loss.
pub fn train_event(windows: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let backbone = BackboneConfig { head: HeadKind::Event, ..cfg.backbone.clone() };
    let targets = windows.iter().map(|w| encode(&w.events, &w.grid, cfg.max_duration_s)).collect::<Result<Vec<_>>>()?;
    train(windows, cfg, &backbone, Targets::Event(targets))
}

/// Trains the epoch baseline (single head) with label-smoothed cross-entropy.
pub fn train_epoch_baseline(windows: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let backbone = BackboneConfig { head: HeadKind::Epoch, ..cfg.backbone.clone() };
    let labels = windows.iter().map(|w| w.epoch_labels.clone()).collect();
    train(windows, cfg, &backbone, Targets::Epoch(labels))
}

fn param_grads(fwd: &mut Forward, model: &Model, value: f64, parts: Vec<(NodeId, Vec<f64>)>) -> Result<Vec<Tensor>> {
    let loss = fwd.graph.scalar_from_parts(value, parts)?;
    let grads = fwd.graph.backward(loss)?;
    Ok(fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(id, p)| grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

/// Mean combined loss over a batch and its gradient for every parameter.
pub fn event_batch_loss(
    model: &mut Model,
    batch: Tensor,
    targets: &[&TargetPair],
    cfg: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let mut fwd = model.forward(batch, Mode::Train, rng)?;
    let HeadNodes::Event { center_logits, duration } = fwd.heads else {
        return Err(Error::Config("event loss needs the event head".into()));
    };
    let logits = fwd.graph.value(center_logits).data();
    let dur = fwd.graph.value(duration).data();
    let l = logits.len() / targets.len();
    let scale = 1.0 / targets.len() as f64;
    let mut gc = vec![0.0; logits.len()];
    let mut gd = vec![0.0; dur.len()];
    let mut total = 0.0;
    for (k, t) in targets.iter().enumerate() {
        let r = k * l..(k + 1) * l;
        let loss = combined_loss(&logits[r.clone()], &dur[r.clone()], t, cfg)?;
        total += loss.value;
        for (g, v) in gc[r.clone()].iter_mut().zip(&loss.center_grad) {
            *g = v * scale;
        }
        for (g, v) in gd[r].iter_mut().zip(&loss.duration_grad) {
            *g = v * scale;
        }
    }
    let value = total * scale;
    let grads = param_grads(&mut fwd, model, value, vec![(center_logits, gc), (duration, gd)])?;
    Ok((value, grads))
}

/// Mean label-smoothed cross-entropy over a batch and its parameter gradients.
pub fn epoch_batch_loss(
    model: &mut Model,
    batch: Tensor,
    labels: &[&[f64]],
    smoothing: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let mut fwd = model.forward(batch, Mode::Train, rng)?;
    let HeadNodes::Epoch { logits } = fwd.heads else {
        return Err(Error::Config("epoch loss needs the epoch head".into()));
    };
    let z = fwd.graph.value(logits).data();
    let l = z.len() / labels.len();
    let scale = 1.0 / labels.len() as f64;
    let mut gz = vec![0.0; z.len()];
    let mut total = 0.0;
    for (k, y) in labels.iter().enumerate() {
        let r = k * l..(k + 1) * l;
        let loss = epoch_bce(&z[r.clone()], y, smoothing)?;
        total += loss.value;
        for (g, v) in gz[r].iter_mut().zip(&loss.grad) {
            *g = v * scale;
        }
    }
    let value = total * scale;
    let grads = param_grads(&mut fwd, model, value, vec![(logits, gz)])?;
    Ok((value, grads))
}

fn train(windows: &[Window], cfg: &TrainConfig, backbone: &BackboneConfig, targets: Targets) -> Result<TrainOutcome> {
    let first = windows.first().ok_or_else(|| Error::InvalidArgument("no training windows".into()))?;
    let fs = first.grid.fs_out * backbone.output_stride() as f64;
    TrainConfig { backbone: backbone.clone(), ..cfg.clone() }.validate(fs)?;
    let total = backbone.total_stride();
    if let Some(w) = windows.iter().find(|w| w.input[0].len() % total != 0) {
        return Err(Error::Config(format!(
            "train: a window of {} samples is not divisible by the total stride {total}",
            w.input[0].len()
        )));
    }
    let mut model = Model::build(backbone, cfg.seed)?;
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut state = AdamState::new(model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let mut trace = LossTrace::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        let mut n_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let step = trace.steps.len();
            let ws: Vec<&Window> = batch.iter().map(|&i| &windows[i]).collect();
            let x = batch_tensor(&ws)?;
            let (value, grads) = match &targets {
                Targets::Event(t) => {
                    let t: Vec<&TargetPair> = batch.iter().map(|&i| &t[i]).collect();
                    event_batch_loss(&mut model, x, &t, &cfg.loss, &mut dropout_rng)?
                }
                Targets::Epoch(t) => {
                    let y: Vec<&[f64]> = batch.iter().map(|&i| t[i].as_slice()).collect();
                    epoch_batch_loss(&mut model, x, &y, cfg.loss.label_smoothing, &mut dropout_rng)?
                }
            };
            if !value.is_finite() || grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam)?;
            log::debug!("epoch {epoch} step {step}: loss {value:.6}");
            trace.steps.push(value);
            epoch_sum += value;
            n_steps += 1;
        }
        let mean = epoch_sum / n_steps.max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        trace.epochs.push(mean);
    }
    Ok(TrainOutcome { model, trace })
}

/// Output signals of a model on one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSignals {
    pub grid: TimeGrid,
    /// Center signal (event model) or probability (epoch model).
    pub confidence: Vec<f64>,
    pub duration: Option<Vec<f64>>,
}

impl RecordSignals {
    pub fn with_truths(self, truths: EventList) -> RecordOutput {
        RecordOutput { grid: self.grid, confidence: self.confidence, duration: self.duration, truths }
    }
}

/// Eval-mode forward pass over a whole record. The input is zero-padded to a
/// multiple of the total stride and outputs over the padding are dropped.
pub fn infer(model: &Model, record: &SignalRecord) -> Result<RecordSignals> {
    let cfg = model.config();
    if record.n_channels() != cfg.input_channels {
        return Err(Error::Shape(format!(
            "record {} has {} channels, the model expects {}",
            record.id(),
            record.n_channels(),
            cfg.input_channels
        )));
    }
    let total = cfg.total_stride();
    let padded = record.len().div_ceil(total) * total;
    let mut data = Vec::with_capacity(record.n_channels() * padded);
    for ch in record.channels() {
        data.extend(ch.iter().map(|&v| v as f64));
        data.resize(data.len() + padded - ch.len(), 0.0);
    }
    let x = Tensor::new(vec![1, record.n_channels(), padded], data)?;
    let grid = TimeGrid::from_input(record.fs(), record.len(), cfg.output_stride())?;
    let keep = grid.length;
    Ok(match model.predict(x)? {
        ModelOutput::Event { center, duration } => {
            RecordSignals { grid, confidence: center[0][..keep].to_vec(), duration: Some(duration[0][..keep].to_vec()) }
        }
        ModelOutput::Epoch { logits } => {
            RecordSignals { grid, confidence: logits[0][..keep].iter().map(|&z| sigmoid(z)).collect(), duration: None }
        }
    })
}

/// How model outputs become events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictConfig {
    Event(DecodeConfig),
    Epoch { scheme: Scheme, threshold: f64, postproc: PostprocConfig },
}

/// Events predicted for each record.
pub fn predict(model: &Model, records: &[SignalRecord], cfg: &PredictConfig) -> Result<Vec<EventList>> {
    records
        .iter()
        .map(|rec| {
            let s = infer(model, rec)?;
            match (cfg, &s.duration) {
                (PredictConfig::Event(d), Some(dur)) => decode(&s.confidence, dur, &s.grid, d),
                (PredictConfig::Epoch { scheme, threshold, postproc }, None) => {
                    epoch_pipeline(&s.confidence, *threshold, *scheme, &s.grid, postproc)
                }
                _ => Err(Error::Config("decoding configuration does not match the model head".into())),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::event_from_bounds;

    fn record(len_s: f64, events: Vec<(f64, f64)>) -> SignalRecord {
        let fs = 64.0;
        let n = (len_s * fs) as usize;
        let ch: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.37).sin()).collect();
        let ann = EventList::new(events.into_iter().map(|(a, b)| event_from_bounds(a, b).unwrap()).collect());
        SignalRecord::new("r", fs, vec![ch], ann).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            window_s: 8.0,
            stride_s: 4.0,
            batch_size: 2,
            epochs: 1,
            backbone: BackboneConfig::tiny(HeadKind::Event),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&[record(20.0, vec![])], 20.0, 5.0, 16).unwrap().len(), 1);
        assert_eq!(make_windows(&[record(30.0, vec![])], 20.0, 5.0, 16).unwrap().len(), 3);
        assert!(make_windows(&[record(10.0, vec![])], 20.0, 5.0, 16).is_err());
    }

    #[test]
    fn events_assigned_by_center() {
        // event [18, 24) has its center at 21 s, outside the first window [0, 20)
        let ws = make_windows(&[record(30.0, vec![(18.0, 24.0)])], 20.0, 10.0, 16).unwrap();
        assert_eq!(ws.len(), 2);
        assert!(ws[0].events.is_empty());
        let labels = &ws[0].epoch_labels;
        // fs_out = 4 Hz: samples whose midpoint lies in [18, 20) are 72..80
        assert!(labels[..72].iter().all(|&v| v == 0.0));
        assert!(labels[72..].iter().all(|&v| v == 1.0));
        assert_eq!(ws[1].events.len(), 1);
        assert!((ws[1].events.get(0).unwrap().center() - 11.0).abs() < 1e-12);
    }

    #[test]
    fn epoch_runs_match_event_support() {
        let rec = record(40.0, vec![(2.0, 5.0), (12.5, 19.0), (27.0, 31.25)]);
        for w in make_windows(&[rec.clone()], 20.0, 5.0, 16).unwrap() {
            let t0 = w.offset as f64 / rec.fs();
            let mut expect = vec![0.0; w.grid.length];
            for e in rec.annotations() {
                let (a, b) = ((e.start() - t0).max(0.0), (e.stop() - t0).min(20.0));
                for (i, v) in expect.iter_mut().enumerate() {
                    let mid = (i as f64 + 0.5) / w.grid.fs_out;
                    if mid >= a && mid < b {
                        *v = 1.0;
                    }
                }
            }
            assert_eq!(w.epoch_labels, expect);
        }
    }

    #[test]
    fn one_epoch_runs_and_is_reproducible() {
        let rec = record(16.0, vec![(3.0, 5.0)]);
        let ws = make_windows(&[rec], 8.0, 8.0, 16).unwrap();
        assert_eq!(ws.len(), 2);
        let cfg = small_cfg();
        let a = train_event(&ws, &cfg).unwrap();
        assert!(a.trace.steps.iter().all(|v| v.is_finite()));
        let b = train_event(&ws, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint(&cfg).unwrap().to_bytes().unwrap(), b.checkpoint(&cfg).unwrap().to_bytes().unwrap());

        let e = train_epoch_baseline(&ws, &cfg).unwrap();
        assert!(e.trace.steps.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_indivisible_windows() {
        let rec = record(16.0, vec![]);
        let ws = make_windows(&[rec], 7.5, 7.5, 16).unwrap();
        let cfg = TrainConfig { window_s: 7.5, ..small_cfg() };
        assert!(matches!(train_event(&ws, &cfg), Err(Error::Config(_))));
        assert!(matches!(train_event(&ws, &small_cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn untrained_model_on_zeros() {
        let model = Model::build(&BackboneConfig::tiny(HeadKind::Event), 0).unwrap();
        let rec = SignalRecord::new("z", 64.0, vec![vec![0.0; 64 * 20]], EventList::empty()).unwrap();
        let s = infer(&model, &rec).unwrap();
        assert!(s.confidence.iter().all(|&c| (c - 0.5).abs() < 0.1), "{:?}", &s.confidence[..4]);
        let cfg = PredictConfig::Event(DecodeConfig { confidence_threshold: 0.9, ..DecodeConfig::default() });
        assert!(predict(&model, &[rec.clone()], &cfg).unwrap()[0].is_empty());
        assert_eq!(infer(&model, &rec).unwrap(), s);
    }

    #[test]
    fn padding_preserves_unpadded_region() {
        let model = Model::build(&BackboneConfig::tiny(HeadKind::Event), 2).unwrap();
        // 100 s at 64 Hz is a multiple of the total stride (256) and several
        // receptive fields long; dropping the last 10 samples forces padding
        let full = record(100.0, vec![]);
        let short: Vec<f32> = full.channel(0)[..full.len() - 10].to_vec();
        let short = SignalRecord::new("s", 64.0, vec![short], EventList::empty()).unwrap();
        let a = infer(&model, &full).unwrap();
        let b = infer(&model, &short).unwrap();
        assert_eq!(b.grid.length, a.grid.length);
        // far from the end the receptive field never reaches the changed samples
        for i in 0..a.grid.length * 2 / 5 {
            assert!((a.confidence[i] - b.confidence[i]).abs() < 1e-9, "sample {i}");
        }
        let epoch = Model::build(&BackboneConfig::tiny(HeadKind::Epoch), 2).unwrap();
        let bad = PredictConfig::Event(DecodeConfig::default());
        assert!(predict(&epoch, &[full], &bad).is_err());
    }

    #[test]
    fn combined_loss_gradient_on_probe_network() {
        use rand::Rng;
        let cfg = BackboneConfig::gradient_probe(HeadKind::Event);
        let loss_cfg = LossConfig::default();
        for seed in 0..3 {
            let mut model = Model::build(&cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::new(vec![2, 1, 256], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let grid = TimeGrid::new(64.0, 64).unwrap();
            let targets = [
                encode(&EventList::new(vec![event_from_bounds(0.1, 0.6).unwrap()]), &grid, 1.0).unwrap(),
                encode(&EventList::empty(), &grid, 1.0).unwrap(),
            ];
            let refs: Vec<&TargetPair> = targets.iter().collect();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
            let (_, grads) = event_batch_loss(&mut model, x.clone(), &refs, &loss_cfg, &mut drop_rng).unwrap();
            for i in 0..model.params()[0].numel() {
                let w0 = model.params()[0].data()[i];
                let h = 1e-5;
                let mut at = |w: f64| {
                    model.params_mut()[0].data_mut()[i] = w;
                    event_batch_loss(&mut model, x.clone(), &refs, &loss_cfg, &mut drop_rng).unwrap().0
                };
                let numeric = (at(w0 + h) - at(w0 - h)) / (2.0 * h);
                model.params_mut()[0].data_mut()[i] = w0;
                let analytic = grads[0].data()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-2, "seed {seed} weight {i}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn training_lowers_the_loss_on_easy_data() {
        use crate::simgen::{generate, SimConfig, Source, Split};
        let sim = SimConfig { n_segments: 24, event_prob: 0.8, seed: 5, ..SimConfig::easy() };
        let data = generate(&sim, Split::Train, &Source::Synthetic).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 8, lr: 2e-3, ..TrainConfig::default() };
        let windows = make_windows(&data.records, cfg.window_s, cfg.stride_s, cfg.backbone.output_stride()).unwrap();
        let trace = train_event(&windows, &cfg).unwrap().trace;
        assert!(trace.epochs.last().unwrap() < trace.epochs.first().unwrap(), "{:?}", trace.epochs);
    }
}
