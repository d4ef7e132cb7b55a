//! Symbolic note content, Standard MIDI File I/O and labeled-corpus ingestion.

mod labeled;
mod smf;

pub use labeled::{load_labeled_dataset, write_metadata_csv, ColumnMap, LabeledSet};
pub use smf::{parse_smf, parse_smf_with_report, parse_varint, write_smf, write_varint, ParseReport};

use crate::error::{Error, Result};
use crate::role::TrackRole;

pub const DEFAULT_TEMPO_BPM: f64 = 120.0;
pub const DEFAULT_TIME_SIG: (u8, u8) = (4, 4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Note {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_tick: u32,
    pub duration_tick: u32,
    pub program: u8,
}

impl Note {
    pub fn end_tick(&self) -> u32 {
        self.onset_tick + self.duration_tick
    }

    pub fn validate(&self) -> Result<()> {
        if self.pitch > 127 || self.program > 127 {
            return Err(Error::Invalid(format!("note out of range: {self:?}")));
        }
        if self.velocity == 0 || self.velocity > 127 {
            return Err(Error::Invalid(format!("velocity must be in 1..=127: {self:?}")));
        }
        if self.duration_tick == 0 {
            return Err(Error::Invalid(format!("zero-length note: {self:?}")));
        }
        Ok(())
    }
}

/// One single-instrument clip: notes at a single tempo and meter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub notes: Vec<Note>,
    pub ppq: u16,
    pub tempo_bpm: f64,
    pub time_sig: (u8, u8),
    pub role: Option<TrackRole>,
}

impl Sequence {
    pub fn new(ppq: u16) -> Self {
        Sequence {
            notes: Vec::new(),
            ppq,
            tempo_bpm: DEFAULT_TEMPO_BPM,
            time_sig: DEFAULT_TIME_SIG,
            role: None,
        }
    }

    /// Sorts by (onset, pitch), then duration and velocity so equal keys are deterministic.
    pub fn sort_notes(&mut self) {
        self.notes.sort_by_key(|n| (n.onset_tick, n.pitch, n.duration_tick, n.velocity));
    }

    pub fn is_sorted(&self) -> bool {
        self.notes
            .windows(2)
            .all(|w| (w[0].onset_tick, w[0].pitch) <= (w[1].onset_tick, w[1].pitch))
    }

    /// Program shared by all notes, 0 for an empty sequence.
    pub fn program(&self) -> u8 {
        self.notes.first().map_or(0, |n| n.program)
    }

    pub fn end_tick(&self) -> u32 {
        self.notes.iter().map(Note::end_tick).max().unwrap_or(0)
    }

    pub fn ticks_to_seconds(&self, ticks: u32) -> f64 {
        ticks as f64 * 60.0 / (self.tempo_bpm * self.ppq as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ppq == 0 || self.ppq > 0x7fff {
            return Err(Error::Invalid(format!("ppq {} out of range", self.ppq)));
        }
        if !(self.tempo_bpm.is_finite() && self.tempo_bpm > 0.0) {
            return Err(Error::Invalid(format!("tempo {} must be positive", self.tempo_bpm)));
        }
        let (num, den) = self.time_sig;
        if num == 0 || !matches!(den, 1 | 2 | 4 | 8 | 16) {
            return Err(Error::Invalid(format!("bad time signature {num}/{den}")));
        }
        let program = self.program();
        for n in &self.notes {
            n.validate()?;
            if n.program != program {
                return Err(Error::Invalid(format!(
                    "sequence mixes programs {program} and {}",
                    n.program
                )));
            }
        }
        if !self.is_sorted() {
            return Err(Error::Invalid("notes not sorted by (onset, pitch)".into()));
        }
        Ok(())
    }
}
