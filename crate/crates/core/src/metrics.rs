//! Statistics of a tone sequence: polyphony, scale consistency, 3-tone
//! repetitions, tone span, unique tones and intensity span.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::features::ToneEvent;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("lengths must be positive, got l_r = {l_r}, l_g = {l_g}")]
    NonpositiveLength { l_r: f64, l_g: f64 },
}

/// Pitch classes of the C major scale; the other 11 major scales are rotations.
pub const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];

/// CSV column names for [`MetricsReport`], in order.
pub const METRIC_COLUMNS: [&str; 6] =
    ["polyphony", "scale_consistency", "repetitions_3", "tone_span", "unique_tones", "intensity_span"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub polyphony: f64,
    pub scale_consistency: f64,
    pub repetitions_3: f64,
    pub tone_span: u32,
    pub unique_tones: u32,
    pub intensity_span: f64,
}

impl MetricsReport {
    pub fn evaluate(seq: &[ToneEvent]) -> Self {
        Self {
            polyphony: polyphony(seq),
            scale_consistency: scale_consistency(seq),
            repetitions_3: repetitions_3(seq) as f64,
            tone_span: tone_span(seq),
            unique_tones: unique_tones(seq),
            intensity_span: intensity_span(seq),
        }
    }

    pub fn csv_fields(&self) -> [String; 6] {
        [
            format!("{}", self.polyphony),
            format!("{}", self.scale_consistency),
            format!("{}", self.repetitions_3),
            self.tone_span.to_string(),
            self.unique_tones.to_string(),
            format!("{}", self.intensity_span),
        ]
    }

    /// Field-wise mean, as reals.
    pub fn mean(reports: &[MetricsReport]) -> [f64; 6] {
        let n = reports.len().max(1) as f64;
        let mut acc = [0.0; 6];
        for r in reports {
            let v = [
                r.polyphony,
                r.scale_consistency,
                r.repetitions_3,
                f64::from(r.tone_span),
                f64::from(r.unique_tones),
                r.intensity_span,
            ];
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        acc.map(|a| a / n)
    }
}

fn semitones(seq: &[ToneEvent]) -> impl Iterator<Item = u8> + '_ {
    seq.iter().map(ToneEvent::semitone)
}

/// Fraction of distinct onset times at which at least two tones start.
pub fn polyphony(seq: &[ToneEvent]) -> f64 {
    let mut groups: Vec<(f64, usize)> = Vec::new();
    let mut onset = 0.0;
    for e in seq {
        onset += e.delta_ticks;
        match groups.iter_mut().find(|(t, _)| *t == onset) {
            Some((_, n)) => *n += 1,
            None => groups.push((onset, 1)),
        }
    }
    if groups.is_empty() {
        return 0.0;
    }
    groups.iter().filter(|(_, n)| *n >= 2).count() as f64 / groups.len() as f64
}

/// Largest fraction of tones inside any of the 12 major scales.
pub fn scale_consistency(seq: &[ToneEvent]) -> f64 {
    if seq.is_empty() {
        return 1.0;
    }
    let mut histogram = [0usize; 12];
    for n in semitones(seq) {
        histogram[(n % 12) as usize] += 1;
    }
    let best = (0..12)
        .map(|root| MAJOR_SCALE.iter().map(|&pc| histogram[(pc as usize + root) % 12]).sum::<usize>())
        .max()
        .unwrap_or(0);
    best as f64 / seq.len() as f64
}

/// Σ over distinct consecutive 3-note grams of (occurrences − 1).
pub fn repetitions_3(seq: &[ToneEvent]) -> u32 {
    let notes: Vec<u8> = semitones(seq).collect();
    let mut counts: HashMap<[u8; 3], u32> = HashMap::new();
    for w in notes.windows(3) {
        *counts.entry([w[0], w[1], w[2]]).or_default() += 1;
    }
    counts.values().map(|c| c - 1).sum()
}

/// `count / (l_r / l_g)`: repetition count rescaled to the generated length.
pub fn normalized_repetitions(count: u32, l_r: f64, l_g: f64) -> Result<f64, MetricsError> {
    if !(l_r > 0.0 && l_g > 0.0) {
        return Err(MetricsError::NonpositiveLength { l_r, l_g });
    }
    Ok(f64::from(count) / (l_r / l_g))
}

/// Semitones between the lowest and highest tone.
pub fn tone_span(seq: &[ToneEvent]) -> u32 {
    let (lo, hi) = semitones(seq).fold((u8::MAX, u8::MIN), |(lo, hi), n| (lo.min(n), hi.max(n)));
    if seq.is_empty() {
        0
    } else {
        u32::from(hi - lo)
    }
}

pub fn unique_tones(seq: &[ToneEvent]) -> u32 {
    semitones(seq).collect::<HashSet<_>>().len() as u32
}

pub fn intensity_span(seq: &[ToneEvent]) -> f64 {
    let (lo, hi) = seq
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.intensity), hi.max(e.intensity)));
    if seq.is_empty() {
        0.0
    } else {
        hi - lo
    }
}
