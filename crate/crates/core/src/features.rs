//! Continuous tone quadruplets, their normalization into `[0, 1]`, the song
//! corpus, batch sampling and the sequence-length curriculum.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use log::{info, warn};
use thiserror::Error;

use crate::midi::{self, MidiSong};
use crate::nn::RngState;

/// Number of features describing one tone.
pub const TONE_FEATURES: usize = 4;

/// Normalized intensity below which a generated tone counts as absent.
pub const ABSENCE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no usable MIDI files found in {0}")]
    NoFilesFound(PathBuf),
    #[error("normalized component {index} = {value} is outside [0, 1]")]
    ComponentOutOfRange { index: usize, value: f64 },
    #[error("no song has at least {0} steps")]
    SequenceTooLong(usize),
    #[error("tones per step must be 1 or 3, got {0}")]
    UnsupportedTonesPerStep(usize),
    #[error("corpus cache: {0}")]
    BadCache(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One tone: duration, frequency, intensity and onset delta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneEvent {
    /// Ticks at 384 per quarter note.
    pub duration_ticks: f64,
    pub freq_hz: f64,
    /// MIDI velocity scale, 0 meaning "no tone".
    pub intensity: f64,
    /// Ticks since the onset of the previous tone.
    pub delta_ticks: f64,
}

impl ToneEvent {
    pub fn is_valid(&self) -> bool {
        self.duration_ticks >= 0.0
            && self.delta_ticks >= 0.0
            && self.freq_hz > 0.0
            && self.freq_hz.is_finite()
            && (0.0..=127.0).contains(&self.intensity)
    }

    pub fn is_silent(&self) -> bool {
        self.intensity == 0.0
    }

    /// Nearest MIDI note.
    pub fn semitone(&self) -> u8 {
        midi::freq_to_midi_note(self.freq_hz).unwrap_or(0)
    }
}

/// Fixed normalization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureBounds {
    pub max_ticks: f64,
    pub min_freq_hz: f64,
    pub max_freq_hz: f64,
    pub max_intensity: f64,
}

impl Default for FeatureBounds {
    fn default() -> Self {
        // piano range A0..C8; two whole notes of time
        Self { max_ticks: 3072.0, min_freq_hz: 27.5, max_freq_hz: 4186.009, max_intensity: 127.0 }
    }
}

impl FeatureBounds {
    pub fn normalize(&self, e: &ToneEvent) -> [f64; 4] {
        let log_lo = self.min_freq_hz.log2();
        let log_hi = self.max_freq_hz.log2();
        [
            e.duration_ticks.min(self.max_ticks) / self.max_ticks,
            ((e.freq_hz.log2() - log_lo) / (log_hi - log_lo)).clamp(0.0, 1.0),
            e.intensity / self.max_intensity,
            e.delta_ticks.min(self.max_ticks) / self.max_ticks,
        ]
    }

    pub fn denormalize(&self, v: &[f64; 4]) -> Result<ToneEvent, FeatureError> {
        for (index, &value) in v.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(FeatureError::ComponentOutOfRange { index, value });
            }
        }
        let log_lo = self.min_freq_hz.log2();
        let log_hi = self.max_freq_hz.log2();
        Ok(ToneEvent {
            duration_ticks: v[0] * self.max_ticks,
            freq_hz: (log_lo + v[1] * (log_hi - log_lo)).exp2(),
            intensity: v[2] * self.max_intensity,
            delta_ticks: v[3] * self.max_ticks,
        })
    }
}

pub fn normalize_event(e: &ToneEvent) -> [f64; 4] {
    FeatureBounds::default().normalize(e)
}

pub fn denormalize_event(v: &[f64; 4]) -> Result<ToneEvent, FeatureError> {
    FeatureBounds::default().denormalize(v)
}

/// Tone events of a parsed song in onset order.
pub fn song_to_events(song: &MidiSong) -> Vec<ToneEvent> {
    let mut prev = 0u64;
    song.notes
        .iter()
        .map(|n| {
            let delta = n.start_tick - prev;
            prev = n.start_tick;
            ToneEvent {
                duration_ticks: n.duration_ticks as f64,
                freq_hz: midi::midi_note_to_freq(n.note_number),
                intensity: f64::from(n.velocity),
                delta_ticks: delta as f64,
            }
        })
        .collect()
}

/// Tones the networks consume and emit: `len` steps, each holding
/// `tones_per_step` normalized quadruplets, stored flat in step-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSequence {
    pub tones_per_step: usize,
    pub data: Vec<f64>,
}

impl NormalizedSequence {
    pub fn new(tones_per_step: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len() % (tones_per_step * TONE_FEATURES), 0);
        Self { tones_per_step, data }
    }

    pub fn step_width(&self) -> usize {
        self.tones_per_step * TONE_FEATURES
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.step_width()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        let w = self.step_width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn steps(&self) -> impl DoubleEndedIterator<Item = &[f64]> {
        self.data.chunks(self.step_width())
    }

    pub fn tone(&self, t: usize, j: usize) -> [f64; 4] {
        let s = &self.step(t)[j * TONE_FEATURES..(j + 1) * TONE_FEATURES];
        [s[0], s[1], s[2], s[3]]
    }

    /// Decode into tone events. Tones whose normalized intensity is below
    /// [`ABSENCE_THRESHOLD`] are absent; tones sharing a step share its onset,
    /// carried by the first present tone's delta.
    pub fn to_events(&self, bounds: &FeatureBounds) -> Vec<ToneEvent> {
        let mut out = Vec::new();
        for t in 0..self.len() {
            let mut first = true;
            for j in 0..self.tones_per_step {
                let v = self.tone(t, j).map(|x| x.clamp(0.0, 1.0));
                if v[2] < ABSENCE_THRESHOLD {
                    continue;
                }
                let mut e = bounds.denormalize(&v).expect("clamped components");
                if !first {
                    e.delta_ticks = 0.0;
                }
                first = false;
                out.push(e);
            }
        }
        out
    }
}

/// Snap events to what a MIDI file can hold and order them the way the
/// parser does: whole ticks (durations at least one), semitone frequencies,
/// velocities in 1..=127, simultaneous onsets sorted by note number.
pub fn canonicalize_events(events: &[ToneEvent]) -> Vec<ToneEvent> {
    let mut onset = 0u64;
    let mut notes: Vec<(u64, u8, u64, u8)> = events
        .iter()
        .filter_map(|e| {
            onset += midi::quantize_ticks(e.delta_ticks);
            let velocity = e.intensity.round().clamp(0.0, 127.0) as u8;
            (velocity > 0).then(|| (onset, e.semitone(), midi::quantize_ticks(e.duration_ticks).max(1), velocity))
        })
        .collect();
    notes.sort_by_key(|&(start, note, _, _)| (start, note));
    let mut prev = 0;
    notes
        .into_iter()
        .map(|(start, note, duration, velocity)| {
            let delta = start - prev;
            prev = start;
            ToneEvent {
                duration_ticks: duration as f64,
                freq_hz: midi::midi_note_to_freq(note),
                intensity: f64::from(velocity),
                delta_ticks: delta as f64,
            }
        })
        .collect()
}

/// Encode a song as flat normalized steps of `tones_per_step` tones.
///
/// With one tone per step every event is its own step. With several, tones
/// sharing an onset are packed together (overflowing chords continue in the
/// next step with zero delta) and unused positions stay all-zero.
pub fn encode_steps(events: &[ToneEvent], tones_per_step: usize, bounds: &FeatureBounds) -> Vec<f64> {
    let width = tones_per_step * TONE_FEATURES;
    let mut out: Vec<f64> = Vec::with_capacity(events.len() * TONE_FEATURES);
    let mut filled = tones_per_step;
    for e in events {
        let joins_step = e.delta_ticks == 0.0 && filled < tones_per_step && !out.is_empty();
        if !joins_step {
            out.resize(out.len() + width, 0.0);
            filled = 0;
        }
        let mut v = bounds.normalize(e);
        if filled > 0 {
            v[3] = 0.0;
        }
        let base = out.len() - width + filled * TONE_FEATURES;
        out[base..base + TONE_FEATURES].copy_from_slice(&v);
        filled += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub songs: usize,
    pub tones: usize,
    pub skipped: usize,
}

/// Songs as tone-event lists, immutable once built.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sequences: Vec<Vec<ToneEvent>>,
    pub feature_bounds: FeatureBounds,
    pub stats: CorpusStats,
    encoded: [OnceLock<Vec<Vec<f64>>>; 2],
}

impl Corpus {
    pub fn from_sequences(sequences: Vec<Vec<ToneEvent>>, skipped: usize) -> Self {
        let tones = sequences.iter().map(Vec::len).sum();
        Self {
            stats: CorpusStats { songs: sequences.len(), tones, skipped },
            sequences,
            feature_bounds: FeatureBounds::default(),
            encoded: Default::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn encoded(&self, tones_per_step: usize) -> Result<&[Vec<f64>], FeatureError> {
        let slot = match tones_per_step {
            1 => 0,
            3 => 1,
            other => return Err(FeatureError::UnsupportedTonesPerStep(other)),
        };
        Ok(self.encoded[slot].get_or_init(|| {
            self.sequences.iter().map(|s| encode_steps(s, tones_per_step, &self.feature_bounds)).collect()
        }))
    }

    /// Number of steps per song once encoded with `tones_per_step`.
    pub fn step_counts(&self, tones_per_step: usize) -> Result<Vec<usize>, FeatureError> {
        let width = tones_per_step * TONE_FEATURES;
        Ok(self.encoded(tones_per_step)?.iter().map(|s| s.len() / width).collect())
    }

    pub fn total_steps(&self, tones_per_step: usize) -> Result<usize, FeatureError> {
        Ok(self.step_counts(tones_per_step)?.iter().sum())
    }

    /// Cache layout (little-endian): `CRGC`, u32 version, u32 song count, then
    /// per song u32 tone count followed by that many quadruplets of f64
    /// (duration, frequency, intensity, delta).
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u32).to_le_bytes());
        for song in &self.sequences {
            out.extend_from_slice(&(song.len() as u32).to_le_bytes());
            for e in song {
                for x in [e.duration_ticks, e.freq_hz, e.intensity, e.delta_ticks] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], FeatureError> {
            let s = bytes.get(pos..pos + n).ok_or(FeatureError::BadCache("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CACHE_MAGIC {
            return Err(FeatureError::BadCache("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
        if u32_at(take(4)?) != CACHE_VERSION {
            return Err(FeatureError::BadCache("unsupported version"));
        }
        let songs = u32_at(take(4)?) as usize;
        let mut sequences = Vec::with_capacity(songs.min(1 << 16));
        for _ in 0..songs {
            let n = u32_at(take(4)?) as usize;
            let mut song = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let mut q = [0.0; 4];
                for x in &mut q {
                    let b = take(8)?;
                    *x = f64::from_le_bytes(b.try_into().expect("8 bytes"));
                }
                let e = ToneEvent { duration_ticks: q[0], freq_hz: q[1], intensity: q[2], delta_ticks: q[3] };
                if !e.is_valid() {
                    return Err(FeatureError::BadCache("invalid tone event"));
                }
                song.push(e);
            }
            sequences.push(song);
        }
        Ok(Self::from_sequences(sequences, 0))
    }

    pub fn write_cache(&self, path: &Path) -> Result<(), FeatureError> {
        fs::write(path, self.to_cache_bytes())?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self, FeatureError> {
        Self::from_cache_bytes(&fs::read(path)?)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"CRGC";
const CACHE_VERSION: u32 = 1;

fn is_midi_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        .unwrap_or(false)
}

/// Sorted `*.mid` / `*.midi` files directly inside `dir`.
pub fn midi_files(dir: &Path) -> Result<Vec<PathBuf>, FeatureError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_midi_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Parse every MIDI file in `dir`. Unreadable or note-less files are skipped.
pub fn ingest_corpus(dir: &Path) -> Result<Corpus, FeatureError> {
    let mut sequences = Vec::new();
    let mut skipped = 0;
    for path in midi_files(dir)? {
        let label = path.display().to_string();
        let parsed = fs::read(&path)
            .map_err(|e| e.to_string())
            .and_then(|bytes| midi::parse_midi_named(&bytes, &label).map_err(|e| e.to_string()));
        match parsed {
            Ok(song) if !song.notes.is_empty() => sequences.push(song_to_events(&song)),
            Ok(_) => {
                warn!("{label}: no notes, skipped");
                skipped += 1;
            }
            Err(err) => {
                warn!("{label}: {err}, skipped");
                skipped += 1;
            }
        }
    }
    if sequences.is_empty() {
        return Err(FeatureError::NoFilesFound(dir.to_path_buf()));
    }
    let corpus = Corpus::from_sequences(sequences, skipped);
    info!("ingested {} songs, {} tones, {} skipped", corpus.stats.songs, corpus.stats.tones, skipped);
    Ok(corpus)
}

/// `batch_size` random windows of `seq_len` steps, each from a uniformly
/// chosen song long enough to hold it, at a uniformly chosen offset.
pub fn sample_batch(
    corpus: &Corpus,
    tones_per_step: usize,
    seq_len: usize,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Vec<NormalizedSequence>, FeatureError> {
    let width = tones_per_step * TONE_FEATURES;
    let encoded = corpus.encoded(tones_per_step)?;
    let eligible: Vec<&Vec<f64>> = encoded.iter().filter(|s| s.len() / width >= seq_len).collect();
    if eligible.is_empty() || seq_len == 0 {
        return Err(FeatureError::SequenceTooLong(seq_len));
    }
    Ok((0..batch_size)
        .map(|_| {
            let song = eligible[rng.below(eligible.len())];
            let offset = rng.below(song.len() / width - seq_len + 1);
            NormalizedSequence::new(tones_per_step, song[offset * width..(offset + seq_len) * width].to_vec())
        })
        .collect())
}

/// Sequence length schedule: doubles every `doubling_period_epochs`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumSchedule {
    pub base_length: usize,
    pub doubling_period_epochs: usize,
    pub max_length: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self { base_length: 8, doubling_period_epochs: 2, max_length: 64 }
    }
}

pub fn curriculum_length(schedule: &CurriculumSchedule, epoch: usize) -> usize {
    let doublings = epoch / schedule.doubling_period_epochs.max(1);
    let mut len = schedule.base_length;
    for _ in 0..doublings {
        if len >= schedule.max_length {
            break;
        }
        len = len.saturating_mul(2);
    }
    len.min(schedule.max_length)
}
