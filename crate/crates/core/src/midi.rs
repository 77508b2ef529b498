//! Standard MIDI File reading and writing.
//!
//! Parsing merges every track and channel (except percussion on channel 10)
//! into one list of completed notes, with all timing rescaled to
//! [`NORMALIZED_TPQ`] ticks per quarter note. Writing produces a single-track
//! format-0 file at the same resolution.

use log::warn;
use thiserror::Error;

use crate::features::ToneEvent;

/// Tick resolution every parsed song is rescaled to.
pub const NORMALIZED_TPQ: u32 = 384;

/// Tempo written into exported files, in beats per minute.
pub const EXPORT_BPM: u32 = 120;

const PERCUSSION_CHANNEL: u8 = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported MIDI file: {0}")]
    UnsupportedFormat(&'static str),
    #[error("unexpected end of file")]
    TruncatedFile,
    #[error("malformed track data: {0}")]
    MalformedTrack(&'static str),
    #[error("cannot export an empty sequence")]
    EmptySequence,
    #[error("frequency {0} Hz cannot be written as a MIDI note")]
    OutOfRangeFrequency(f64),
    #[error("frequency must be positive, got {0}")]
    NonpositiveFrequency(f64),
}

/// One completed note at [`NORMALIZED_TPQ`] resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TickNote {
    pub note_number: u8,
    pub velocity: u8,
    pub start_tick: u64,
    pub duration_ticks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidiSong {
    /// Division field of the source header. Note timing is already rescaled
    /// to [`NORMALIZED_TPQ`].
    pub ticks_per_quarter: u16,
    /// Sorted by `start_tick`, then `note_number`.
    pub notes: Vec<TickNote>,
    pub source_path: String,
    /// Notes still sounding at the end of their track; they were closed there.
    pub dangling_notes: usize,
}

/// Equal-temperament frequency of a MIDI note, A4 (69) = 440 Hz.
pub fn midi_note_to_freq(note_number: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(note_number) - 69.0) / 12.0)
}

/// Nearest MIDI note to `freq`, clamped to 0..=127.
pub fn freq_to_midi_note(freq: f64) -> Result<u8, MidiError> {
    if !(freq > 0.0) || !freq.is_finite() {
        return Err(MidiError::NonpositiveFrequency(freq));
    }
    let n = (69.0 + 12.0 * (freq / 440.0).log2()).round();
    Ok(n.clamp(0.0, 127.0) as u8)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        let end = self.pos.checked_add(n).ok_or(MidiError::TruncatedFile)?;
        if end > self.bytes.len() {
            return Err(MidiError::TruncatedFile);
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity: at most four bytes, seven bits each.
    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::MalformedTrack("variable-length quantity longer than 4 bytes"))
    }
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = (value & 0x7f) as u8 | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// A note-on or note-off observed in a track, in source ticks.
struct RawNote {
    channel: u8,
    note: u8,
    velocity: u8,
    start: u64,
    end: u64,
}

fn rescale(tick: u64, division: u16) -> u64 {
    let d = u64::from(division);
    (tick * u64::from(NORMALIZED_TPQ) + d / 2) / d
}

fn parse_track(data: &[u8], out: &mut Vec<RawNote>) -> Result<usize, MidiError> {
    let mut cur = Cursor::new(data);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    // sounding[channel][note] = (start tick, velocity)
    let mut sounding = vec![[None::<(u64, u8)>; 128]; 16];

    let mut close = |channel: u8, note: u8, at: u64, sounding: &mut Vec<[Option<(u64, u8)>; 128]>| {
        if let Some((start, velocity)) = sounding[channel as usize][note as usize].take() {
            out.push(RawNote { channel, note, velocity, start, end: at });
        }
    };

    while !cur.is_empty() {
        tick += u64::from(cur.vlq()?);
        let first = cur.u8()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            let status = running.ok_or(MidiError::MalformedTrack("running status without a prior status byte"))?;
            (status, Some(first))
        };

        match status {
            0xff => {
                running = None;
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
                if kind == 0x2f {
                    break;
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
            }
            0xf1..=0xfe => {
                return Err(MidiError::MalformedTrack("system message inside a track"));
            }
            _ => {
                running = Some(status);
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let d0 = match first_data {
                    Some(b) => b,
                    None => cur.u8()?,
                };
                let d1 = match kind {
                    0xc0 | 0xd0 => 0,
                    _ => cur.u8()?,
                };
                if d0 & 0x80 != 0 || d1 & 0x80 != 0 {
                    return Err(MidiError::MalformedTrack("data byte with the high bit set"));
                }
                match kind {
                    0x90 if d1 > 0 => {
                        // a repeated note-on closes the sounding note at the new
                        // onset; one started on this very tick is replaced
                        if sounding[channel as usize][d0 as usize].is_some_and(|(start, _)| start < tick) {
                            close(channel, d0, tick, &mut sounding);
                        }
                        sounding[channel as usize][d0 as usize] = Some((tick, d1));
                    }
                    0x80 | 0x90 => close(channel, d0, tick, &mut sounding),
                    _ => {}
                }
            }
        }
    }

    let mut dangling = 0;
    for channel in 0..16u8 {
        for note in 0..128u8 {
            if sounding[channel as usize][note as usize].is_some() {
                dangling += 1;
                close(channel, note, tick, &mut sounding);
            }
        }
    }
    Ok(dangling)
}

/// Parse a format 0 or 1 Standard MIDI File into completed notes.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiSong, MidiError> {
    parse_midi_named(bytes, "")
}

pub fn parse_midi_named(bytes: &[u8], source_path: &str) -> Result<MidiSong, MidiError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4).map_err(|_| MidiError::MalformedHeader("file shorter than a header"))?;
    if magic != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd magic"));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader("header chunk shorter than 6 bytes"));
    }
    let header = cur.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat("format 2")),
        _ => return Err(MidiError::MalformedHeader("unknown format")),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedFormat("SMPTE time division"));
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter"));
    }

    let mut raw = Vec::new();
    let mut dangling = 0;
    while !cur.is_empty() {
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        let chunk = cur.take(len)?;
        if id == b"MTrk" {
            dangling += parse_track(chunk, &mut raw)?;
        }
    }
    if dangling > 0 {
        warn!("{source_path}: {dangling} note(s) never released, closed at track end");
    }

    let mut notes: Vec<TickNote> = raw
        .into_iter()
        .filter(|r| r.channel != PERCUSSION_CHANNEL)
        .map(|r| {
            let start = rescale(r.start, division);
            let end = rescale(r.end, division);
            TickNote {
                note_number: r.note,
                velocity: r.velocity,
                start_tick: start,
                duration_ticks: end.saturating_sub(start).max(1),
            }
        })
        .collect();
    notes.sort_by_key(|n| (n.start_tick, n.note_number));

    Ok(MidiSong { ticks_per_quarter: division, notes, source_path: source_path.to_string(), dangling_notes: dangling })
}

/// Round a non-negative real tick count to an integer tick.
pub fn quantize_ticks(ticks: f64) -> u64 {
    if ticks.is_finite() && ticks > 0.0 {
        ticks.round() as u64
    } else {
        0
    }
}

/// Write tone events as a format-0 file at [`NORMALIZED_TPQ`] and [`EXPORT_BPM`].
///
/// Durations and deltas are rounded to whole ticks (durations to at least one),
/// frequencies to the nearest semitone and intensities to a velocity in 1..=127.
/// Events with zero intensity are silent: they advance time but emit no note.
pub fn events_to_midi(events: &[ToneEvent]) -> Result<Vec<u8>, MidiError> {
    if events.is_empty() {
        return Err(MidiError::EmptySequence);
    }

    // (tick, order, bytes); order puts note-offs before note-ons at equal ticks
    let mut messages: Vec<(u64, u8, [u8; 3])> = Vec::with_capacity(events.len() * 2);
    let mut onset: u64 = 0;
    for e in events {
        if !(e.freq_hz > 0.0) || !e.freq_hz.is_finite() {
            return Err(MidiError::OutOfRangeFrequency(e.freq_hz));
        }
        let exact = 69.0 + 12.0 * (e.freq_hz / 440.0).log2();
        if !(-0.5..127.5).contains(&exact) {
            return Err(MidiError::OutOfRangeFrequency(e.freq_hz));
        }
        onset += quantize_ticks(e.delta_ticks);
        let velocity = e.intensity.round().clamp(0.0, 127.0) as u8;
        if velocity == 0 {
            continue;
        }
        let note = freq_to_midi_note(e.freq_hz)?;
        let duration = quantize_ticks(e.duration_ticks).max(1);
        messages.push((onset, 1, [0x90, note, velocity]));
        messages.push((onset + duration, 0, [0x80, note, 0]));
    }
    messages.sort_by_key(|&(tick, order, _)| (tick, order));

    let mut track = Vec::new();
    // tempo meta event
    let usec_per_quarter = 60_000_000 / EXPORT_BPM;
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&usec_per_quarter.to_be_bytes()[1..]);

    let mut last = 0u64;
    for (tick, _, msg) in messages {
        let delta = u32::try_from(tick - last).map_err(|_| MidiError::MalformedTrack("delta time overflow"))?;
        write_vlq(&mut track, delta);
        track.extend_from_slice(&msg);
        last = tick;
    }
    write_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(NORMALIZED_TPQ as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
