//! Octuple note encoding: one 8-field tuple per note.
//!
//! Fields, in order: bar, position in bar, program, pitch, duration,
//! velocity bin, tempo bin, time-signature index. Time is quantized to a
//! grid of [`SLOTS_PER_QUARTER`] slots per quarter note, which covers
//! straight sixteenths and eighth/sixteenth triplets.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::midi::{Note, Sequence};

pub const SLOTS_PER_QUARTER: u32 = 12;
pub const DEFAULT_MAX_LEN: usize = 512;

pub const BAR_VOCAB: usize = 256;
pub const POSITION_VOCAB: usize = 48;
pub const PROGRAM_VOCAB: usize = 128;
/// Pitch ids 0..=127 plus the reserved mask id.
pub const PITCH_VOCAB: usize = 129;
pub const PITCH_MASK_ID: u8 = 128;
/// Duration ids 1..=96; id 0 is never produced.
pub const DURATION_VOCAB: usize = 97;
pub const MAX_DURATION: u32 = 96;
pub const VELOCITY_VOCAB: usize = 32;
pub const TEMPO_VOCAB: usize = 16;
pub const TIME_SIGNATURES: [(u8, u8); 5] = [(4, 4), (3, 4), (6, 8), (2, 4), (12, 8)];

/// Vocabulary size of each tuple field, in field order.
pub const FIELD_VOCABS: [usize; 8] = [
    BAR_VOCAB,
    POSITION_VOCAB,
    PROGRAM_VOCAB,
    PITCH_VOCAB,
    DURATION_VOCAB,
    VELOCITY_VOCAB,
    TEMPO_VOCAB,
    TIME_SIGNATURES.len(),
];

const TEMPO_MIN: f64 = 30.0;
const TEMPO_MAX: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenTuple {
    pub bar: u8,
    pub position: u8,
    pub program: u8,
    pub pitch: u8,
    pub duration: u8,
    pub velocity_bin: u8,
    pub tempo_bin: u8,
    pub timesig_idx: u8,
}

impl TokenTuple {
    pub fn fields(&self) -> [usize; 8] {
        [
            self.bar as usize,
            self.position as usize,
            self.program as usize,
            self.pitch as usize,
            self.duration as usize,
            self.velocity_bin as usize,
            self.tempo_bin as usize,
            self.timesig_idx as usize,
        ]
    }

    pub fn from_fields(f: [usize; 8]) -> Result<Self> {
        for (i, (&v, &vocab)) in f.iter().zip(FIELD_VOCABS.iter()).enumerate() {
            if v >= vocab {
                return Err(Error::Invalid(format!("token field {i} value {v} out of range")));
            }
        }
        if f[4] == 0 {
            return Err(Error::Invalid("token duration must be >= 1".into()));
        }
        Ok(TokenTuple {
            bar: f[0] as u8,
            position: f[1] as u8,
            program: f[2] as u8,
            pitch: f[3] as u8,
            duration: f[4] as u8,
            velocity_bin: f[5] as u8,
            tempo_bin: f[6] as u8,
            timesig_idx: f[7] as u8,
        })
    }

    pub fn is_valid(&self) -> bool {
        Self::from_fields(self.fields()).is_ok() && self.position < 48 && self.pitch < 128
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tuples: Vec<TokenTuple>,
    pub max_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// One tuple per line, eight space-separated integers.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        for t in &self.tuples {
            let f = t.fields();
            let _ = writeln!(s, "{} {} {} {} {} {} {} {}", f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]);
        }
        s
    }

    pub fn from_dump(text: &str, max_len: usize) -> Result<Self> {
        let mut tuples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Invalid(format!("token dump line {}: {e}", i + 1)))?;
            let f: [usize; 8] = nums.try_into().map_err(|v: Vec<usize>| {
                Error::Invalid(format!("token dump line {}: {} fields, expected 8", i + 1, v.len()))
            })?;
            tuples.push(TokenTuple::from_fields(f)?);
        }
        Ok(TokenSequence { tuples, max_len })
    }
}

/// Counts of lossy adjustments made while encoding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncodeReport {
    pub dropped_past_last_bar: usize,
    pub truncated_to_max_len: usize,
    pub durations_clipped: usize,
    pub positions_capped: usize,
    pub meter_remapped: bool,
}

pub fn tempo_bin(bpm: f64) -> u8 {
    let b = bpm.clamp(TEMPO_MIN, TEMPO_MAX);
    let x = 15.0 * (b.ln() - TEMPO_MIN.ln()) / (TEMPO_MAX.ln() - TEMPO_MIN.ln());
    x.floor().clamp(0.0, 15.0) as u8
}

/// Representative tempo for a bin: the log-space midpoint (300 for the top bin).
pub fn tempo_from_bin(bin: u8) -> f64 {
    if bin >= 15 {
        return TEMPO_MAX;
    }
    let span = TEMPO_MAX.ln() - TEMPO_MIN.ln();
    (TEMPO_MIN.ln() + (bin as f64 + 0.5) / 15.0 * span).exp()
}

/// Registry index for a meter; unregistered meters map to the entry with the
/// closest bar length in quarters (second field `true` when remapped).
pub fn timesig_index(time_sig: (u8, u8)) -> (u8, bool) {
    if let Some(i) = TIME_SIGNATURES.iter().position(|&t| t == time_sig) {
        return (i as u8, false);
    }
    let quarters = |(n, d): (u8, u8)| n as f64 * 4.0 / d as f64;
    let target = quarters(time_sig);
    let mut best = 0;
    for (i, &t) in TIME_SIGNATURES.iter().enumerate() {
        if (quarters(t) - target).abs() < (quarters(TIME_SIGNATURES[best]) - target).abs() {
            best = i;
        }
    }
    (best as u8, true)
}

fn bar_slots((num, den): (u8, u8)) -> u64 {
    (num as u64 * 4 * SLOTS_PER_QUARTER as u64 / den as u64).max(1)
}

fn ticks_to_slots(ticks: u64, ppq: u16) -> u64 {
    let ppq = ppq as u64;
    (ticks * SLOTS_PER_QUARTER as u64 * 2 + ppq) / (2 * ppq)
}

fn slots_to_ticks(slots: u64, ppq: u16) -> u64 {
    let s = SLOTS_PER_QUARTER as u64;
    (slots * ppq as u64 * 2 + s) / (2 * s)
}

pub fn encode(seq: &Sequence) -> TokenSequence {
    encode_with_report(seq, DEFAULT_MAX_LEN).0
}

/// Encodes each note as one tuple, sorted by (bar, position, pitch) and
/// truncated to the earliest `max_len` tuples.
pub fn encode_with_report(seq: &Sequence, max_len: usize) -> (TokenSequence, EncodeReport) {
    let mut report = EncodeReport::default();
    let (ts_idx, remapped) = timesig_index(seq.time_sig);
    report.meter_remapped = remapped && !seq.notes.is_empty();
    let bar_len = bar_slots(TIME_SIGNATURES[ts_idx as usize]);
    let tbin = tempo_bin(seq.tempo_bpm);

    let mut tuples = Vec::with_capacity(seq.notes.len());
    for n in &seq.notes {
        let slot = ticks_to_slots(n.onset_tick as u64, seq.ppq);
        let bar = slot / bar_len;
        if bar >= BAR_VOCAB as u64 {
            report.dropped_past_last_bar += 1;
            continue;
        }
        let mut position = slot % bar_len;
        if position > 47 {
            position = 47;
            report.positions_capped += 1;
        }
        let mut duration = ticks_to_slots(n.duration_tick as u64, seq.ppq).max(1);
        if duration > MAX_DURATION as u64 {
            duration = MAX_DURATION as u64;
            report.durations_clipped += 1;
        }
        tuples.push(TokenTuple {
            bar: bar as u8,
            position: position as u8,
            program: n.program,
            pitch: n.pitch,
            duration: duration as u8,
            velocity_bin: n.velocity / 4,
            tempo_bin: tbin,
            timesig_idx: ts_idx,
        });
    }
    tuples.sort();
    if tuples.len() > max_len {
        report.truncated_to_max_len = tuples.len() - max_len;
        tuples.truncate(max_len);
    }
    (TokenSequence { tuples, max_len }, report)
}

/// Inverse mapping up to quantization. Exact on re-encoding when `ppq`
/// is at least [`SLOTS_PER_QUARTER`].
pub fn decode(tokens: &TokenSequence, ppq: u16) -> Sequence {
    let mut seq = Sequence::new(ppq.max(1));
    let Some(first) = tokens.tuples.first() else {
        return seq;
    };
    seq.tempo_bpm = tempo_from_bin(first.tempo_bin);
    seq.time_sig = TIME_SIGNATURES[(first.timesig_idx as usize).min(TIME_SIGNATURES.len() - 1)];
    let bar_len = bar_slots(seq.time_sig);
    for t in &tokens.tuples {
        let slot = t.bar as u64 * bar_len + t.position as u64;
        seq.notes.push(Note {
            pitch: t.pitch.min(127),
            velocity: (t.velocity_bin * 4).max(1),
            onset_tick: slots_to_ticks(slot, seq.ppq) as u32,
            duration_tick: slots_to_ticks(t.duration.max(1) as u64, seq.ppq).max(1) as u32,
            program: t.program,
        });
    }
    seq.sort_notes();
    seq
}
