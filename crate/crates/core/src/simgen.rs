//! Simulated artefact-detection data.
//!
//! Each segment is a quasi-periodic, ECG-like background into which target
//! artefact bursts (annotated) and shorter distractor bursts (not annotated)
//! are mixed at a drawn SNR, after shaping them with a Tukey window. Background
//! can also come from ingested recordings, cut into overlapping segments.
//!
//! Every segment draws from its own ChaCha stream derived from
//! `(seed, split, segment index)`, so train and test data never share
//! artefact waveforms and segments can be generated independently.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Event, EventList, SignalRecord};

const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub fs: f64,
    pub segment_s: f64,
    /// Hop between segments cut from ingested recordings.
    pub stride_s: f64,
    pub event_prob: f64,
    pub n_events_choices: Vec<usize>,
    pub dur_range_s: [f64; 2],
    pub snr_db_range: [f64; 2],
    pub distractor_prob: f64,
    pub n_distractor_choices: Vec<usize>,
    pub distractor_dur_range_s: [f64; 2],
    /// Tukey taper fraction applied to every inserted burst.
    pub taper: f64,
    /// Number of synthetic segments per split.
    pub n_segments: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            fs: 256.0,
            segment_s: 20.0,
            stride_s: 5.0,
            event_prob: 0.2,
            n_events_choices: vec![1, 2],
            dur_range_s: [1.0, 6.7],
            snr_db_range: [-6.0, 6.0],
            distractor_prob: 0.3,
            n_distractor_choices: vec![1, 2],
            distractor_dur_range_s: [0.5, 1.0],
            taper: 0.5,
            n_segments: 1000,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Default config with the SNR pinned at +6 dB.
    pub fn easy() -> Self {
        Self { snr_db_range: [6.0, 6.0], ..Self::default() }
    }

    pub fn segment_len(&self) -> usize {
        (self.segment_s * self.fs).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.fs > 0.0) || !(self.segment_s > 0.0) || !(self.stride_s > 0.0) {
            return bad("fs, segment_s and stride_s must be positive".into());
        }
        for (name, p) in [("event_prob", self.event_prob), ("distractor_prob", self.distractor_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let [lo, hi] = self.dur_range_s;
        if !(lo > 0.0 && lo <= hi && hi < self.segment_s) {
            return bad(format!("dur_range_s {:?} must lie within (0, segment_s)", self.dur_range_s));
        }
        let [dlo, dhi] = self.distractor_dur_range_s;
        if !(dlo > 0.0 && dlo <= dhi && dhi < self.segment_s) {
            return bad(format!(
                "distractor_dur_range_s {:?} must lie within (0, segment_s)",
                self.distractor_dur_range_s
            ));
        }
        if self.snr_db_range[0] > self.snr_db_range[1] {
            return bad("snr_db_range must be ordered".into());
        }
        if !(0.0..=1.0).contains(&self.taper) {
            return bad("taper must lie in [0, 1]".into());
        }
        for (name, choices) in
            [("n_events_choices", &self.n_events_choices), ("n_distractor_choices", &self.n_distractor_choices)]
        {
            if choices.is_empty() || choices.contains(&0) {
                return bad(format!("{name} must be a nonempty list of positive counts"));
            }
        }
        let max_targets = *self.n_events_choices.iter().max().unwrap();
        let max_distractors = *self.n_distractor_choices.iter().max().unwrap();
        if max_targets as f64 * hi > self.segment_s {
            return bad(format!(
                "{max_targets} events of {hi} s cannot fit without overlap in a {} s segment",
                self.segment_s
            ));
        }
        if max_targets as f64 * hi + max_distractors as f64 * dhi > self.segment_s {
            return bad("targets and distractors at maximum duration cannot fit in one segment".into());
        }
        if self.segment_len() < 2 {
            return bad("segment must span at least two samples".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 40,
        }
    }
}

/// Where background segments come from.
#[derive(Debug, Clone)]
pub enum Source<'a> {
    Synthetic,
    Files(&'a [SignalRecord]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub records: Vec<SignalRecord>,
}

impl SimDataset {
    pub fn n_annotations(&self) -> usize {
        self.records.iter().map(|r| r.annotations().len()).sum()
    }
}

/// One burst mixed into a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Insertion {
    pub start: usize,
    pub len: usize,
    pub snr_db: f64,
    pub target: bool,
    /// Artefact after SNR scaling, before windowing.
    pub scaled_artefact: Vec<f64>,
}

/// Components of one generated segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentParts {
    pub background: Vec<f64>,
    pub mixed: Vec<f64>,
    pub insertions: Vec<Insertion>,
}

impl SegmentParts {
    pub fn annotations(&self, fs: f64) -> Result<EventList> {
        self.insertions
            .iter()
            .filter(|i| i.target)
            .map(|i| Event::from_bounds(i.start as f64 / fs, (i.start + i.len) as f64 / fs))
            .collect::<Result<Vec<_>>>()
            .map(EventList::new)
    }
}

pub fn segment_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream_base() + index as u64);
    rng
}

fn normalize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// ECG-like pulse train with jittered beat intervals plus weak broadband noise,
/// normalized to zero mean and unit variance.
pub fn synth_background(n: usize, fs: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("background length must be positive".into()));
    }
    if !(fs > 0.0) {
        return Err(Error::InvalidArgument("sampling rate must be positive".into()));
    }
    // (amplitude, offset from R peak in s, width in s)
    const WAVES: [(f64, f64, f64); 5] =
        [(0.15, -0.20, 0.025), (-0.12, -0.025, 0.008), (1.0, 0.0, 0.010), (-0.25, 0.025, 0.008), (0.30, 0.30, 0.060)];
    let f0 = rng.gen_range(0.8..=1.5);
    let period = 1.0 / f0;
    let duration = n as f64 / fs;
    let mut x = vec![0.0; n];
    let mut t = rng.gen_range(-period..0.0);
    while t < duration + period {
        let gain = 1.0 + 0.05 * normal(rng);
        for (amp, offset, width) in WAVES {
            let c = t + offset;
            let lo = (((c - 4.0 * width) * fs).floor().max(0.0)) as usize;
            let hi = (((c + 4.0 * width) * fs).ceil().max(0.0) as usize).min(n);
            for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
                let dt = i as f64 / fs - c;
                *v += gain * amp * (-0.5 * (dt / width).powi(2)).exp();
            }
        }
        t += (period * (1.0 + 0.05 * normal(rng))).max(0.3 * period);
    }
    for v in x.iter_mut() {
        *v += 0.03 * normal(rng);
    }
    normalize(&mut x);
    Ok(x)
}

/// Detrended random walk blended with low-passed noise, zero mean and unit
/// variance. Filter constants are per sample.
pub fn synth_artefact(n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("artefact length must be positive".into()));
    }
    let mut walk = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        acc += normal(rng);
        walk.push(acc);
    }
    // remove the least-squares line so the burst does not end on an offset
    let nf = n as f64;
    let tm = (nf - 1.0) / 2.0;
    let wm = walk.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, w) in walk.iter().enumerate() {
        let dt = i as f64 - tm;
        sxy += dt * (w - wm);
        sxx += dt * dt;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    for (i, w) in walk.iter_mut().enumerate() {
        *w -= wm + slope * (i as f64 - tm);
    }
    normalize(&mut walk);

    let mut lp = Vec::with_capacity(n);
    let mut y = 0.0;
    for _ in 0..n {
        y = 0.7 * y + 0.3 * normal(rng);
        lp.push(y);
    }
    normalize(&mut lp);

    let mut out: Vec<f64> = walk.iter().zip(&lp).map(|(w, l)| 0.8 * w + 0.6 * l).collect();
    normalize(&mut out);
    Ok(out)
}

/// Tukey (tapered cosine) window: cosine tapers covering `taper` of the
/// support in total, flat in between.
pub fn tukey_window(n: usize, taper: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("Tukey window needs at least 2 points, got {n}")));
    }
    if !(0.0..=1.0).contains(&taper) {
        return Err(Error::InvalidArgument(format!("taper must lie in [0, 1], got {taper}")));
    }
    if taper == 0.0 {
        return Ok(vec![1.0; n]);
    }
    let last = (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            let x = i as f64 / last;
            let edge = x.min(1.0 - x);
            if edge < taper / 2.0 {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * edge / taper).cos())
            } else {
                1.0
            }
        })
        .collect())
}

/// Gain applied to an artefact so that `background_power / scaled_power`
/// equals `snr_db`.
pub fn snr_scale(background_power: f64, artefact_power: f64, snr_db: f64) -> Result<f64> {
    if !(background_power > 0.0) || !(artefact_power > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "powers must be positive (background {background_power}, artefact {artefact_power})"
        )));
    }
    Ok((background_power / (artefact_power * 10f64.powf(snr_db / 10.0))).sqrt())
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn choose(choices: &[usize], rng: &mut impl Rng) -> usize {
    choices[rng.gen_range(0..choices.len())]
}

fn uniform(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

fn length_in_samples(range: [f64; 2], fs: f64, rng: &mut impl Rng) -> usize {
    let lo = (range[0] * fs).ceil() as usize;
    let hi = ((range[1] * fs).floor() as usize).max(lo);
    ((uniform(range, rng) * fs).round() as usize).clamp(lo.max(2), hi.max(2))
}

/// Generates one segment. `background` replaces the synthetic source when given.
pub fn generate_segment(
    config: &SimConfig,
    split: Split,
    index: usize,
    background: Option<&[f64]>,
) -> Result<SegmentParts> {
    let n = config.segment_len();
    let mut rng = segment_rng(config.seed, split, index);
    let background = match background {
        Some(bg) if bg.len() == n => bg.to_vec(),
        Some(bg) => {
            return Err(Error::Shape(format!("background has {} samples, expected {n}", bg.len())));
        }
        None => synth_background(n, config.fs, &mut rng)?,
    };

    // (length, snr, target)
    let mut plan = Vec::new();
    if rng.gen_bool(config.event_prob) {
        for _ in 0..choose(&config.n_events_choices, &mut rng) {
            let len = length_in_samples(config.dur_range_s, config.fs, &mut rng);
            plan.push((len, uniform(config.snr_db_range, &mut rng), true));
        }
    }
    if rng.gen_bool(config.distractor_prob) {
        for _ in 0..choose(&config.n_distractor_choices, &mut rng) {
            let len = length_in_samples(config.distractor_dur_range_s, config.fs, &mut rng);
            plan.push((len, uniform(config.snr_db_range, &mut rng), false));
        }
    }

    let starts = place(&plan.iter().map(|p| p.0).collect::<Vec<_>>(), n, &mut rng)?;

    let mut mixed = background.clone();
    let mut insertions = Vec::with_capacity(plan.len());
    for ((len, snr_db, target), start) in plan.into_iter().zip(starts) {
        let artefact = synth_artefact(len, &mut rng)?;
        let window = tukey_window(len, config.taper)?;
        let scale = snr_scale(power(&background[start..start + len]), power(&artefact), snr_db)?;
        let scaled: Vec<f64> = artefact.iter().map(|a| a * scale).collect();
        for ((m, a), w) in mixed[start..start + len].iter_mut().zip(&scaled).zip(&window) {
            *m += a * w;
        }
        insertions.push(Insertion { start, len, snr_db, target, scaled_artefact: scaled });
    }
    Ok(SegmentParts { background, mixed, insertions })
}

/// Uniform non-overlapping placement by joint rejection sampling. When every
/// attempt collides (crowded segments), falls back to drawing the free space
/// between the bursts in a random order, which always succeeds if they fit.
fn place(lens: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if lens.is_empty() {
        return Ok(Vec::new());
    }
    let total: usize = lens.iter().sum();
    if total > n {
        return Err(Error::Config(format!("{} bursts of {total} samples do not fit in a segment of {n}", lens.len())));
    }
    'attempt: for _ in 0..PLACEMENT_ATTEMPTS {
        let starts: Vec<usize> = lens.iter().map(|&l| rng.gen_range(0..=n - l)).collect();
        for i in 0..lens.len() {
            for j in 0..i {
                let (a, b) = (starts[i], starts[j]);
                if a < b + lens[j] && b < a + lens[i] {
                    continue 'attempt;
                }
            }
        }
        return Ok(starts);
    }
    let free = n - total;
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let mut cuts: Vec<usize> = (0..lens.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut starts = vec![0; lens.len()];
    let mut used = 0;
    for (&k, &cut) in order.iter().zip(&cuts) {
        starts[k] = cut + used;
        used += lens[k];
    }
    Ok(starts)
}

fn segment_record(config: &SimConfig, id: String, parts: &SegmentParts, n_channels: usize) -> Result<SignalRecord> {
    let ch: Vec<f32> = parts.mixed.iter().map(|&v| v as f32).collect();
    SignalRecord::new(id, config.fs, vec![ch; n_channels], parts.annotations(config.fs)?)
}

/// Builds one split of the simulated dataset.
pub fn generate(config: &SimConfig, split: Split, source: &Source<'_>) -> Result<SimDataset> {
    config.validate()?;
    let mut records = Vec::new();
    match source {
        Source::Synthetic => {
            for i in 0..config.n_segments {
                let parts = generate_segment(config, split, i, None)?;
                records.push(segment_record(config, format!("{}_{i:05}", split.name()), &parts, 1)?);
            }
        }
        Source::Files(inputs) => {
            let n = config.segment_len();
            let hop = ((config.stride_s * config.fs).round() as usize).max(1);
            let mut index = 0;
            for rec in inputs.iter() {
                if (rec.fs() - config.fs).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "record {} is sampled at {} Hz, expected {} Hz",
                        rec.id(),
                        rec.fs(),
                        config.fs
                    )));
                }
                let mut offset = 0;
                while offset + n <= rec.len() {
                    let bg: Vec<f64> = rec.channel(0)[offset..offset + n].iter().map(|&v| v as f64).collect();
                    let parts = generate_segment(config, split, index, Some(&bg))?;
                    let id = format!("{}_{}_{offset:08}", split.name(), rec.id());
                    records.push(segment_record(config, id, &parts, 1)?);
                    offset += hop;
                    index += 1;
                }
            }
        }
    }
    Ok(SimDataset { records })
}
