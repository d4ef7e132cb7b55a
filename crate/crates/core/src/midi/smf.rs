use std::collections::{HashMap, VecDeque};

use super::{Note, Sequence, DEFAULT_TEMPO_BPM, DEFAULT_TIME_SIG};
use crate::error::{Error, Result};

/// Decodes a MIDI variable-length quantity. Returns `(value, bytes consumed)`.
pub fn parse_varint(bytes: &[u8]) -> Result<(u32, usize)> {
    let mut value: u32 = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if i == 4 {
            return Err(Error::Varint("quantity longer than 4 bytes".into()));
        }
        value = (value << 7) | u32::from(b & 0x7f);
        if b & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    if bytes.len() >= 4 {
        Err(Error::Varint("quantity longer than 4 bytes".into()))
    } else {
        Err(Error::Varint("stream ended inside quantity".into()))
    }
}

pub fn write_varint(buf: &mut Vec<u8>, value: u32) {
    debug_assert!(value < 1 << 28);
    for shift in [21u32, 14, 7] {
        if value >> shift != 0 {
            buf.push(((value >> shift) & 0x7f) as u8 | 0x80);
        }
    }
    buf.push((value & 0x7f) as u8);
}

/// Non-fatal irregularities seen while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// Note-ons without a note-off, closed at end of track.
    pub unclosed_notes: usize,
    /// Notes whose on and off fell on the same tick, stretched to one tick.
    pub zero_length_notes: usize,
    /// Note-offs with no sounding note.
    pub orphan_note_offs: usize,
}

pub fn parse_smf(bytes: &[u8]) -> Result<Sequence> {
    parse_smf_with_report(bytes).map(|(seq, _)| seq)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Smf(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varint(&mut self) -> Result<u32> {
        let (v, n) = parse_varint(&self.data[self.pos..]).map_err(|e| match e {
            Error::Varint(m) => Error::Smf(format!("bad varint at offset {}: {m}", self.pos)),
            e => e,
        })?;
        self.pos += n;
        Ok(v)
    }

    fn data_byte(&mut self) -> Result<u8> {
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(Error::Smf(format!("status byte {b:#04x} where data expected")));
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy)]
enum Event {
    On { channel: u8, pitch: u8, velocity: u8 },
    Off { channel: u8, pitch: u8 },
    Program(u8),
    Tempo(u32),
    TimeSig(u8, u8),
}

/// Reads one track body; returns the end-of-track tick.
fn read_track(track: &[u8], out: &mut Vec<(u64, Event)>) -> Result<u64> {
    let mut cur = Cursor::new(track);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    while cur.remaining() > 0 {
        tick += u64::from(cur.varint()?);
        let first = cur.u8()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            let s = running.ok_or_else(|| {
                Error::Smf("data byte without running status".into())
            })?;
            (s, Some(first))
        };
        match status {
            0xff => {
                running = None;
                let kind = cur.u8()?;
                let len = cur.varint()? as usize;
                let payload = cur.take(len)?;
                match kind {
                    0x2f => return Ok(tick),
                    0x51 if len >= 3 => {
                        let uspq = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if uspq == 0 {
                            return Err(Error::Smf("zero tempo".into()));
                        }
                        out.push((tick, Event::Tempo(uspq)));
                    }
                    0x58 if len >= 2 => {
                        let (num, pow) = (payload[0], payload[1]);
                        if num == 0 || pow > 4 {
                            return Err(Error::Smf(format!(
                                "unsupported time signature {num}/2^{pow}"
                            )));
                        }
                        out.push((tick, Event::TimeSig(num, 1 << pow)));
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.varint()? as usize;
                cur.take(len)?;
            }
            0xf1..=0xfe => {
                return Err(Error::Smf(format!("system message {status:#04x} in track")));
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let next = |cur: &mut Cursor, pending: &mut Option<u8>| -> Result<u8> {
                    match pending.take() {
                        Some(b) => Ok(b),
                        None => cur.data_byte(),
                    }
                };
                let mut pending = first_data;
                match status & 0xf0 {
                    0x80 => {
                        let pitch = next(&mut cur, &mut pending)?;
                        next(&mut cur, &mut pending)?;
                        out.push((tick, Event::Off { channel, pitch }));
                    }
                    0x90 => {
                        let pitch = next(&mut cur, &mut pending)?;
                        let velocity = next(&mut cur, &mut pending)?;
                        let ev = if velocity == 0 {
                            Event::Off { channel, pitch }
                        } else {
                            Event::On { channel, pitch, velocity }
                        };
                        out.push((tick, ev));
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        next(&mut cur, &mut pending)?;
                        next(&mut cur, &mut pending)?;
                    }
                    0xc0 => {
                        let program = next(&mut cur, &mut pending)?;
                        out.push((tick, Event::Program(program)));
                    }
                    0xd0 => {
                        next(&mut cur, &mut pending)?;
                    }
                    _ => unreachable!("status has high bit set"),
                }
            }
        }
    }
    // Track ran out without an end-of-track meta; accept what was read.
    Ok(tick)
}

/// Parses a format 0 or 1 Standard MIDI File into a single [`Sequence`].
///
/// All tracks are merged. Notes are paired per (channel, pitch) in FIFO
/// order; a note-on with velocity 0 counts as a note-off and notes still
/// sounding at the end are closed at the end-of-track tick. A file whose
/// program changes disagree is rejected.
pub fn parse_smf_with_report(bytes: &[u8]) -> Result<(Sequence, ParseReport)> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4).map_err(|_| Error::Smf("bad magic".into()))? != b"MThd" {
        return Err(Error::Smf("bad magic".into()));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(Error::Smf(format!("header chunk too short ({header_len})")));
    }
    let header = cur.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(Error::Smf(format!("unsupported format {format}")));
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(Error::Smf(format!("unsupported division {division:#06x}")));
    }

    // (tick, track, index-in-track, event) gives a stable global order.
    let mut events: Vec<(u64, usize, usize, Event)> = Vec::new();
    let mut tracks_seen = 0usize;
    let mut last_tick = 0u64;
    while cur.remaining() > 0 && tracks_seen < ntracks as usize {
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        let body = cur.take(len)?;
        if id != b"MTrk" {
            continue;
        }
        let mut track_events = Vec::new();
        last_tick = last_tick.max(read_track(body, &mut track_events)?);
        events.extend(
            track_events
                .into_iter()
                .enumerate()
                .map(|(i, (t, e))| (t, tracks_seen, i, e)),
        );
        tracks_seen += 1;
    }
    events.sort_by_key(|&(t, track, i, _)| (t, track, i));

    let mut tempo_uspq: Option<u32> = None;
    let mut time_sig: Option<(u8, u8)> = None;
    let mut program: Option<u8> = None;
    let mut report = ParseReport::default();
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut raw_notes: Vec<(u64, u64, u8, u8)> = Vec::new();

    for &(tick, _, _, ev) in &events {
        match ev {
            Event::Tempo(t) => {
                tempo_uspq.get_or_insert(t);
            }
            Event::TimeSig(n, d) => {
                time_sig.get_or_insert((n, d));
            }
            Event::Program(p) => match program {
                None => program = Some(p),
                Some(q) if q != p => {
                    return Err(Error::Smf(format!(
                        "multiple programs ({q} and {p}); expected a single instrument"
                    )))
                }
                _ => {}
            },
            Event::On { channel, pitch, velocity } => {
                open.entry((channel, pitch)).or_default().push_back((tick, velocity));
            }
            Event::Off { channel, pitch } => {
                match open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front) {
                    Some((start, velocity)) => raw_notes.push((start, tick, pitch, velocity)),
                    None => report.orphan_note_offs += 1,
                }
            }
        }
    }
    let mut keys: Vec<_> = open.keys().copied().collect();
    keys.sort_unstable();
    for key in keys {
        for (start, velocity) in open.remove(&key).unwrap_or_default() {
            report.unclosed_notes += 1;
            raw_notes.push((start, last_tick, key.1, velocity));
        }
    }

    let program = program.unwrap_or(0);
    let mut notes = Vec::with_capacity(raw_notes.len());
    for (start, end, pitch, velocity) in raw_notes {
        let mut dur = end.saturating_sub(start);
        if dur == 0 {
            report.zero_length_notes += 1;
            dur = 1;
        }
        let onset_tick = u32::try_from(start)
            .map_err(|_| Error::Smf(format!("note onset {start} overflows")))?;
        let duration_tick = u32::try_from(dur)
            .map_err(|_| Error::Smf(format!("note duration {dur} overflows")))?;
        notes.push(Note { pitch, velocity, onset_tick, duration_tick, program });
    }

    let tempo_bpm = tempo_uspq.map_or(DEFAULT_TEMPO_BPM, |us| {
        // SMF stores whole microseconds; keep 0.01 bpm resolution so written tempos read back exactly.
        (60_000_000.0 / us as f64 * 100.0).round() / 100.0
    });
    let mut seq = Sequence {
        notes,
        ppq: division,
        tempo_bpm,
        time_sig: time_sig.unwrap_or(DEFAULT_TIME_SIG),
        role: None,
    };
    seq.sort_notes();
    Ok((seq, report))
}

/// Serializes a sequence as a single-track format-0 file.
///
/// Tempo and meter meta events are written only when they differ from the
/// 120 bpm 4/4 defaults. Same-pitch notes that nest are spread over extra
/// channels so FIFO pairing on read reconstructs them exactly.
pub fn write_smf(seq: &Sequence) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"MThd");
    buf.extend_from_slice(&6u32.to_be_bytes());
    buf.extend_from_slice(&0u16.to_be_bytes());
    buf.extend_from_slice(&1u16.to_be_bytes());
    buf.extend_from_slice(&seq.ppq.to_be_bytes());

    let mut track = Vec::new();
    if seq.time_sig != DEFAULT_TIME_SIG {
        let (num, den) = seq.time_sig;
        write_varint(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x58, 0x04, num, den.trailing_zeros() as u8, 24, 8]);
    }
    if seq.tempo_bpm != DEFAULT_TEMPO_BPM {
        let uspq = (60_000_000.0 / seq.tempo_bpm).round().clamp(1.0, 0xff_ffff as f64) as u32;
        write_varint(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x51, 0x03]);
        track.extend_from_slice(&uspq.to_be_bytes()[1..]);
    }

    let mut notes = seq.notes.clone();
    notes.sort_by_key(|n| (n.onset_tick, n.pitch, n.duration_tick, n.velocity));
    let channels = assign_channels(&notes);
    let mut used: Vec<u8> = channels.clone();
    used.sort_unstable();
    used.dedup();
    if !notes.is_empty() {
        for &ch in &used {
            write_varint(&mut track, 0);
            track.extend_from_slice(&[0xc0 | ch, seq.program()]);
        }
    }

    // (tick, 0 = off / 1 = on, note index)
    let mut events: Vec<(u32, u8, usize)> = Vec::with_capacity(notes.len() * 2);
    for (i, n) in notes.iter().enumerate() {
        events.push((n.onset_tick, 1, i));
        events.push((n.end_tick(), 0, i));
    }
    events.sort_unstable();
    let mut now = 0u32;
    for (tick, kind, i) in events {
        write_varint(&mut track, tick - now);
        now = tick;
        let n = &notes[i];
        let ch = channels[i];
        if kind == 1 {
            track.extend_from_slice(&[0x90 | ch, n.pitch, n.velocity]);
        } else {
            track.extend_from_slice(&[0x80 | ch, n.pitch, 0x40]);
        }
    }
    write_varint(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    buf.extend_from_slice(b"MTrk");
    buf.extend_from_slice(&(track.len() as u32).to_be_bytes());
    buf.extend_from_slice(&track);
    buf
}

/// Lowest channel (skipping 9) on which FIFO pairing keeps every
/// overlapping same-pitch note intact: a note may share a channel with a
/// still-sounding note of equal pitch only if it ends no earlier.
fn assign_channels(sorted: &[Note]) -> Vec<u8> {
    const CHANNELS: [u8; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 14, 15];
    let mut sounding: Vec<(usize, u8)> = Vec::new();
    let mut out = Vec::with_capacity(sorted.len());
    for (i, n) in sorted.iter().enumerate() {
        sounding.retain(|&(j, _)| sorted[j].end_tick() > n.onset_tick);
        let ch = CHANNELS
            .iter()
            .copied()
            .find(|&ch| {
                sounding.iter().all(|&(j, c)| {
                    c != ch || sorted[j].pitch != n.pitch || sorted[j].end_tick() <= n.end_tick()
                })
            })
            .unwrap_or(0);
        sounding.push((i, ch));
        out.push(ch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_examples() {
        assert_eq!(parse_varint(&[0x00]).unwrap(), (0, 1));
        assert_eq!(parse_varint(&[0x81, 0x48]).unwrap(), (200, 2));
        assert_eq!(parse_varint(&[0xff, 0xff, 0xff, 0x7f]).unwrap(), (268_435_455, 4));
        assert!(parse_varint(&[0x81]).is_err());
        assert!(parse_varint(&[]).is_err());
        assert!(parse_varint(&[0x81, 0x81, 0x81, 0x81, 0x01]).is_err());
        assert!(parse_varint(&[0x81, 0x81, 0x81, 0x81]).is_err());
    }

    #[test]
    fn varint_write_roundtrip() {
        for v in [0u32, 1, 127, 128, 200, 16383, 16384, 2_097_151, 268_435_455] {
            let mut b = Vec::new();
            write_varint(&mut b, v);
            assert_eq!(parse_varint(&b).unwrap(), (v, b.len()));
        }
    }

    fn smf(ppq: u16, track: &[u8]) -> Vec<u8> {
        let mut b = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01".to_vec();
        b.extend_from_slice(&ppq.to_be_bytes());
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(track);
        b
    }

    #[test]
    fn empty_file_uses_defaults() {
        let seq = parse_smf(&smf(480, &[0x00, 0xff, 0x2f, 0x00])).unwrap();
        assert!(seq.notes.is_empty());
        assert_eq!(seq.tempo_bpm, 120.0);
        assert_eq!(seq.time_sig, (4, 4));
        assert_eq!(seq.ppq, 480);
    }

    #[test]
    fn single_note_hand_assembled() {
        // delta 0: 90 3C 40; delta 480 (0x83 0x60): 80 3C 40; EOT
        let track = [0x00, 0x90, 0x3c, 0x40, 0x83, 0x60, 0x80, 0x3c, 0x40, 0x00, 0xff, 0x2f, 0x00];
        let seq = parse_smf(&smf(480, &track)).unwrap();
        assert_eq!(
            seq.notes,
            vec![Note { pitch: 60, velocity: 64, onset_tick: 0, duration_tick: 480, program: 0 }]
        );
    }

    #[test]
    fn velocity_zero_is_note_off_with_running_status() {
        // 90 3C 40, then running-status 3C 00 at delta 240 (0x81 0x70)
        let track = [0x00, 0x90, 0x3c, 0x40, 0x81, 0x70, 0x3c, 0x00, 0x00, 0xff, 0x2f, 0x00];
        let seq = parse_smf(&smf(480, &track)).unwrap();
        assert_eq!(seq.notes.len(), 1);
        assert_eq!(seq.notes[0].duration_tick, 240);
        assert_eq!(seq.notes[0].velocity, 64);
    }

    #[test]
    fn unclosed_note_closed_at_end() {
        let track = [0x00, 0x90, 0x3c, 0x40, 0x83, 0x60, 0xff, 0x2f, 0x00];
        let (seq, report) = parse_smf_with_report(&smf(480, &track)).unwrap();
        assert_eq!(report.unclosed_notes, 1);
        assert_eq!(seq.notes[0].duration_tick, 480);
    }

    #[test]
    fn meta_events_populate_fields() {
        let track = [
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // 500000 us = 120 bpm
            0x00, 0xff, 0x58, 0x04, 0x03, 0x02, 0x18, 0x08, // 3/4
            0x00, 0xc0, 0x21, // program 33
            0x00, 0x90, 0x28, 0x50, 0x60, 0x80, 0x28, 0x00, 0x00, 0xff, 0x2f, 0x00,
        ];
        let seq = parse_smf(&smf(96, &track)).unwrap();
        assert_eq!(seq.tempo_bpm, 120.0);
        assert_eq!(seq.time_sig, (3, 4));
        assert_eq!(seq.notes[0].program, 33);
        assert_eq!(seq.notes[0].duration_tick, 96);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_smf(b"RIFF\x00\x00").is_err());
        assert!(parse_smf(b"MThd\x00\x00").is_err());
        let mut truncated = smf(480, &[0x00, 0x90, 0x3c, 0x40, 0x00, 0xff, 0x2f, 0x00]);
        truncated.truncate(truncated.len() - 3);
        assert!(parse_smf(&truncated).is_err());
        // two programs
        let track = [0x00, 0xc0, 0x01, 0x00, 0xc1, 0x02, 0x00, 0xff, 0x2f, 0x00];
        assert!(parse_smf(&smf(480, &track)).is_err());
    }

    #[test]
    fn empty_sequence_writes_only_end_of_track() {
        let bytes = write_smf(&Sequence::new(480));
        assert_eq!(&bytes[22..], &[0x00, 0xff, 0x2f, 0x00]);
        assert_eq!(parse_smf(&bytes).unwrap(), Sequence::new(480));
    }

    #[test]
    fn nested_same_pitch_notes_survive() {
        let mut seq = Sequence::new(480);
        let n = |on, dur| Note { pitch: 60, velocity: 90, onset_tick: on, duration_tick: dur, program: 5 };
        seq.notes = vec![n(0, 960), n(240, 240), n(240, 480)];
        seq.sort_notes();
        let back = parse_smf(&write_smf(&seq)).unwrap();
        assert_eq!(back.notes, seq.notes);
    }
}
