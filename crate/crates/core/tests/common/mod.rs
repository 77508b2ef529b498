#![allow(dead_code)]

use crnn_gan::features::{Corpus, ToneEvent};
use crnn_gan::metrics::MAJOR_SCALE;
use crnn_gan::midi::midi_note_to_freq;
use crnn_gan::nn::RngState;

pub const BEAT: f64 = 192.0;

fn tone(note: u8, delta: f64) -> ToneEvent {
    ToneEvent { duration_ticks: BEAT, freq_hz: midi_note_to_freq(note), intensity: 100.0, delta_ticks: delta }
}

fn scale_note(root: u8, degree: usize) -> u8 {
    root + 12 * (degree / 7) as u8 + MAJOR_SCALE[degree % 7]
}

/// Random walks on a major scale, one tone per beat.
pub fn scale_walks(songs: usize, len: usize, seed: u64) -> Corpus {
    let mut rng = RngState::new(seed);
    let sequences = (0..songs)
        .map(|_| {
            let root = 55 + rng.below(12) as u8;
            let mut degree = 7usize;
            (0..len)
                .map(|i| {
                    if i > 0 {
                        degree = match rng.below(4) {
                            0 => degree.saturating_sub(2),
                            1 => degree.saturating_sub(1),
                            2 => (degree + 1).min(14),
                            _ => (degree + 2).min(14),
                        };
                    }
                    tone(scale_note(root, degree), if i == 0 { 0.0 } else { BEAT })
                })
                .collect()
        })
        .collect();
    Corpus::from_sequences(sequences, 0)
}

/// Three-tone chords (root, third, fifth of a scale degree), one per beat.
pub fn chord_walks(songs: usize, chords: usize, seed: u64) -> Corpus {
    let mut rng = RngState::new(seed);
    let sequences = (0..songs)
        .map(|_| {
            let root = 48 + rng.below(12) as u8;
            let mut events = Vec::with_capacity(chords * 3);
            for c in 0..chords {
                let degree = rng.below(7);
                for (k, step) in [0, 2, 4].into_iter().enumerate() {
                    let delta = if k == 0 && c > 0 { BEAT } else { 0.0 };
                    events.push(tone(scale_note(root, degree + step), delta));
                }
            }
            events
        })
        .collect();
    Corpus::from_sequences(sequences, 0)
}

/// A monophonic song with one tone per beat.
pub fn melody(notes: &[u8]) -> Vec<ToneEvent> {
    notes.iter().enumerate().map(|(i, &n)| tone(n, if i == 0 { 0.0 } else { BEAT })).collect()
}

pub fn write_midi(path: &std::path::Path, events: &[ToneEvent]) {
    std::fs::write(path, crnn_gan::midi::events_to_midi(events).unwrap()).unwrap();
}

/// `songs` scale-walk MIDI files in `dir`.
pub fn write_walk_fixture(dir: &std::path::Path, songs: usize, len: usize, seed: u64) {
    for (i, song) in scale_walks(songs, len, seed).sequences.iter().enumerate() {
        write_midi(&dir.join(format!("song-{i:02}.mid")), song);
    }
}
