//! Epoch-based decoding: thresholding, median filtering, binary morphology and
//! conversion of runs of positive samples into events.
//!
//! Morphology treats the sequence as zero outside its support and evaluates
//! dilation/erosion on the whole integer line before cropping, so closing is
//! extensive and opening anti-extensive right up to the edges. The median
//! filter instead replicates the edge samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Event, EventList, TimeGrid};

/// `p > θ` per sample.
pub fn threshold(probabilities: &[f64], theta: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {theta}")));
    }
    Ok(probabilities.iter().map(|&p| p > theta).collect())
}

/// Odd sample count covering `width_s`, rounded up.
pub fn median_width_samples(width_s: f64, fs_out: f64) -> usize {
    let n = ((width_s * fs_out) - 1e-9).ceil().max(1.0) as usize;
    n | 1
}

/// Sliding majority over an odd `width` with edge replication.
pub fn median_filter_samples(x: &[bool], width: usize) -> Result<Vec<bool>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("median filter input is empty".into()));
    }
    let width = width.max(1) | 1;
    let r = (width / 2) as isize;
    let last = x.len() as isize - 1;
    Ok((0..x.len() as isize)
        .map(|i| {
            let ones = (i - r..=i + r).filter(|&j| x[j.clamp(0, last) as usize]).count();
            2 * ones > width
        })
        .collect())
}

pub fn median_filter(x: &[bool], width_s: f64, fs_out: f64) -> Result<Vec<bool>> {
    median_filter_samples(x, median_width_samples(width_s, fs_out))
}

/// Offsets of a flat structuring element of `size` samples; always contains 0.
fn element_offsets(size: usize) -> std::ops::RangeInclusive<isize> {
    let lo = -((size / 2) as isize);
    lo..=lo + size as isize - 1
}

fn dilate(x: &[bool], size: usize) -> Vec<bool> {
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            element_offsets(size).any(|b| {
                let j = i - b;
                j >= 0 && j < n && x[j as usize]
            })
        })
        .collect()
}

fn erode(x: &[bool], size: usize) -> Vec<bool> {
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            element_offsets(size).all(|b| {
                let j = i + b;
                j >= 0 && j < n && x[j as usize]
            })
        })
        .collect()
}

fn with_zero_margin(x: &[bool], size: usize, f: impl FnOnce(&[bool]) -> Vec<bool>) -> Vec<bool> {
    let pad = size + 1;
    let mut padded = vec![false; pad];
    padded.extend_from_slice(x);
    padded.extend(std::iter::repeat(false).take(pad));
    f(&padded)[pad..pad + x.len()].to_vec()
}

/// Dilation then erosion; fills holes shorter than the element.
pub fn binary_closing(x: &[bool], element_samples: usize) -> Vec<bool> {
    let size = element_samples.max(1);
    with_zero_margin(x, size, |p| erode(&dilate(p, size), size))
}

/// Erosion then dilation; removes runs shorter than the element.
pub fn binary_opening(x: &[bool], element_samples: usize) -> Vec<bool> {
    let size = element_samples.max(1);
    with_zero_margin(x, size, |p| dilate(&erode(p, size), size))
}

/// Each maximal run `[i, j]` becomes `[i/fs, (j+1)/fs)` with the mean
/// probability over the run as confidence.
pub fn runs_to_events(binary: &[bool], grid: &TimeGrid, probabilities: &[f64]) -> Result<EventList> {
    if binary.len() != probabilities.len() || binary.len() != grid.length {
        return Err(Error::Shape(format!(
            "binary ({}), probabilities ({}) and grid ({}) lengths differ",
            binary.len(),
            probabilities.len(),
            grid.length
        )));
    }
    let mut events = Vec::new();
    let mut i = 0;
    while i < binary.len() {
        if !binary[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < binary.len() && binary[i] {
            i += 1;
        }
        let mean = probabilities[start..i].iter().sum::<f64>() / (i - start) as f64;
        let e = Event::from_bounds(grid.index_to_seconds(start), grid.index_to_seconds(i))?;
        events.push(e.with_confidence(mean.clamp(0.0, 1.0))?);
    }
    Ok(EventList::new(events))
}

/// Marks samples whose midpoint falls inside an event.
pub fn rasterize(events: &EventList, grid: &TimeGrid) -> Vec<bool> {
    let mut out = vec![false; grid.length];
    for e in events {
        let first = ((e.start() * grid.fs_out - 0.5).ceil().max(0.0)) as usize;
        for (i, v) in out.iter_mut().enumerate().skip(first) {
            let mid = (i as f64 + 0.5) / grid.fs_out;
            if mid >= e.stop() {
                break;
            }
            if mid >= e.start() {
                *v = true;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    None,
    Median,
    Morphology,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::None, Scheme::Median, Scheme::Morphology];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::None => "none",
            Scheme::Median => "median",
            Scheme::Morphology => "morphology",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Scheme::None),
            "median" => Ok(Scheme::Median),
            "morphology" | "morph" => Ok(Scheme::Morphology),
            other => Err(Error::InvalidArgument(format!("unknown post-processing scheme '{other}'"))),
        }
    }
}

/// Filter sizes, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub median_width_s: f64,
    pub morph_element_s: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self { median_width_s: 1.0, morph_element_s: 1.0 }
    }
}

impl PostprocConfig {
    pub fn element_samples(&self, fs_out: f64) -> usize {
        ((self.morph_element_s * fs_out).round() as usize).max(1)
    }
}

pub fn epoch_pipeline(
    probabilities: &[f64],
    theta: f64,
    scheme: Scheme,
    grid: &TimeGrid,
    cfg: &PostprocConfig,
) -> Result<EventList> {
    let binary = threshold(probabilities, theta)?;
    let binary = match scheme {
        Scheme::None => binary,
        Scheme::Median => median_filter(&binary, cfg.median_width_s, grid.fs_out)?,
        Scheme::Morphology => {
            let k = cfg.element_samples(grid.fs_out);
            binary_opening(&binary_closing(&binary, k), k)
        }
    };
    runs_to_events(&binary, grid, probabilities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold(&[0.2, 0.6], 0.5).unwrap(), b(&[0, 1]));
        assert_eq!(threshold(&[0.1, 0.9], 0.0).unwrap(), b(&[1, 1]));
        assert_eq!(threshold(&[0.1, 1.0], 1.0).unwrap(), b(&[0, 0]));
        assert!(threshold(&[0.1], 1.5).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_filter_samples(&b(&[0, 1, 0, 1, 1]), 3).unwrap(), b(&[0, 0, 1, 1, 1]));
        assert_eq!(median_filter_samples(&b(&[1; 6]), 3).unwrap(), b(&[1; 6]));
        assert_eq!(median_filter_samples(&b(&[0, 0, 1, 0, 0]), 3).unwrap(), b(&[0; 5]));
        assert!(median_filter_samples(&[], 3).is_err());
        assert_eq!(median_width_samples(1.0, 16.0), 17);
        assert_eq!(median_width_samples(0.1, 16.0), 3);
        assert_eq!(median_width_samples(3.0 / 16.0, 16.0), 3);
    }

    #[test]
    fn morphology_examples() {
        assert_eq!(binary_closing(&b(&[1, 1, 0, 1, 1]), 3), b(&[1, 1, 1, 1, 1]));
        assert_eq!(binary_opening(&b(&[0, 1, 0, 0, 0]), 3), b(&[0; 5]));
        assert_eq!(binary_opening(&binary_closing(&b(&[0; 7]), 3), 3), b(&[0; 7]));
    }

    #[test]
    fn runs_examples() {
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let ev = runs_to_events(&b(&[0, 1, 1, 1, 0]), &grid, &[0.0, 0.6, 0.9, 0.6, 0.0]).unwrap();
        assert_eq!(ev.len(), 1);
        let e = ev.get(0).unwrap();
        assert_eq!((e.start(), e.stop()), (1.0, 4.0));
        assert!((e.confidence() - 0.7).abs() < 1e-12);

        let grid3 = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(runs_to_events(&b(&[1, 0, 1]), &grid3, &[1.0; 3]).unwrap().len(), 2);
        assert!(runs_to_events(&b(&[0; 5]), &grid, &[0.0; 5]).unwrap().is_empty());
        assert!(runs_to_events(&b(&[0; 4]), &grid, &[0.0; 5]).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("median".parse::<Scheme>().unwrap(), Scheme::Median);
        assert_eq!("morph".parse::<Scheme>().unwrap(), Scheme::Morphology);
        assert!("gaussian".parse::<Scheme>().is_err());
    }

    #[test]
    fn pipeline_schemes() {
        let grid = TimeGrid::new(16.0, 96).unwrap();
        let cfg = PostprocConfig::default();
        // one long event plus a 3-sample blip
        let mut p = vec![0.1; 96];
        for v in &mut p[10..50] {
            *v = 0.9;
        }
        for v in &mut p[70..73] {
            *v = 0.9;
        }
        let none = epoch_pipeline(&p, 0.5, Scheme::None, &grid, &cfg).unwrap();
        let expect = runs_to_events(&threshold(&p, 0.5).unwrap(), &grid, &p).unwrap();
        assert_eq!(none, expect);
        assert_eq!(none.len(), 2);
        let median = epoch_pipeline(&p, 0.5, Scheme::Median, &grid, &cfg).unwrap();
        assert_eq!(median.len(), 1);
    }

    #[test]
    fn morphology_bridges_hole_near_edge() {
        // a 4-sample hole 2 samples after the event onset: the 17-wide median
        // window there is dominated by background, so the hole survives, while
        // closing with a 16-sample element fills it
        let grid = TimeGrid::new(16.0, 96).unwrap();
        let cfg = PostprocConfig::default();
        let mut p = vec![0.1; 96];
        for v in &mut p[20..60] {
            *v = 0.9;
        }
        for v in &mut p[22..26] {
            *v = 0.1;
        }
        let median = epoch_pipeline(&p, 0.5, Scheme::Median, &grid, &cfg).unwrap();
        let morph = epoch_pipeline(&p, 0.5, Scheme::Morphology, &grid, &cfg).unwrap();
        assert_eq!(morph.len(), 1);
        let e = morph.get(0).unwrap();
        assert_eq!((e.start(), e.stop()), (20.0 / 16.0, 60.0 / 16.0));
        assert!(median.iter().all(|e| e.start() > 20.0 / 16.0));
    }

    /// Set-definition reference: dilation `X ⊕ B = {x + b}`, erosion
    /// `X ⊖ B = {z : z + B ⊆ X}` on the integer line, cropped to the domain.
    fn set_morph(x: &[bool], size: usize, closing: bool) -> Vec<bool> {
        let offs: Vec<isize> = element_offsets(size).collect();
        let set: std::collections::BTreeSet<isize> =
            x.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i as isize).collect();
        let dil = |s: &std::collections::BTreeSet<isize>| {
            s.iter().flat_map(|&p| offs.iter().map(move |&o| p + o)).collect::<std::collections::BTreeSet<_>>()
        };
        let ero = |s: &std::collections::BTreeSet<isize>| {
            let lo = s.iter().next().copied().unwrap_or(0) - size as isize;
            let hi = s.iter().last().copied().unwrap_or(0) + size as isize;
            (lo..=hi).filter(|z| offs.iter().all(|o| s.contains(&(z + o)))).collect::<std::collections::BTreeSet<_>>()
        };
        let out = if closing { ero(&dil(&set)) } else { dil(&ero(&set)) };
        (0..x.len() as isize).map(|i| out.contains(&i)).collect()
    }

    fn brute_median(x: &[bool], width: usize) -> Vec<bool> {
        let r = (width / 2) as isize;
        (0..x.len() as isize)
            .map(|i| {
                let mut w: Vec<u8> =
                    (i - r..=i + r).map(|j| x[j.clamp(0, x.len() as isize - 1) as usize] as u8).collect();
                w.sort();
                w[w.len() / 2] == 1
            })
            .collect()
    }

    proptest! {
        #[test]
        fn morphology_matches_set_definition(x in prop::collection::vec(any::<bool>(), 1..64), k in 1usize..10) {
            prop_assert_eq!(binary_closing(&x, k), set_morph(&x, k, true));
            prop_assert_eq!(binary_opening(&x, k), set_morph(&x, k, false));
        }

        #[test]
        fn morphology_laws(x in prop::collection::vec(any::<bool>(), 1..64), k in 1usize..10) {
            let c = binary_closing(&x, k);
            let o = binary_opening(&x, k);
            prop_assert_eq!(binary_closing(&c, k), c.clone());
            prop_assert_eq!(binary_opening(&o, k), o.clone());
            prop_assert!(x.iter().zip(&c).all(|(a, b)| !a || *b));
            prop_assert!(x.iter().zip(&o).all(|(a, b)| !b || *a));
        }

        #[test]
        fn median_matches_sorting(x in prop::collection::vec(any::<bool>(), 1..64), w in 0usize..8) {
            let width = 2 * w + 1;
            prop_assert_eq!(median_filter_samples(&x, width).unwrap(), brute_median(&x, width));
            prop_assert_eq!(median_filter_samples(&x, 1).unwrap(), x.clone());
        }

        #[test]
        fn runs_invert_rasterization(x in prop::collection::vec(any::<bool>(), 1..64)) {
            let grid = TimeGrid::new(16.0, x.len()).unwrap();
            let probs = vec![0.5; x.len()];
            let events = runs_to_events(&x, &grid, &probs).unwrap();
            prop_assert_eq!(rasterize(&events, &grid), x);
        }
    }
}
