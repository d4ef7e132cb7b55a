//! Rule-based generators, one per role. Each example is 8 bars of 4/4 at
//! an integer tempo in [70, 160] bpm, seeded from `(seed, id)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{LabeledExample, Origin};
use crate::error::Result;
use crate::midi::{write_metadata_csv, write_smf, Note, Sequence};
use crate::role::TrackRole;
use crate::seed;

pub const SYNTH_PPQ: u16 = 480;
const BARS: u32 = 8;
const BEAT: u32 = SYNTH_PPQ as u32;
const BAR: u32 = 4 * BEAT;
const EIGHTH: u32 = BEAT / 2;
const SIXTEENTH: u32 = BEAT / 4;

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
/// Scale degrees of I, IV, V and vi.
const PROGRESSION_DEGREES: [usize; 4] = [0, 3, 4, 5];
const PROGRAMS: [u8; 8] = [0, 4, 24, 33, 48, 56, 73, 81];

/// Four programs per role from a shared pool; neighbouring roles overlap.
fn program_pool(role: TrackRole) -> [u8; 4] {
    let r = role.index();
    [0, 1, 2, 3].map(|j| PROGRAMS[(r + j) % PROGRAMS.len()])
}

struct Ctx<R: Rng> {
    rng: R,
    key: u8,
    program: u8,
    chords: Vec<usize>,
    notes: Vec<Note>,
}

impl<R: Rng> Ctx<R> {
    /// Scale pitches in `lo..=hi`.
    fn scale(&self, lo: u8, hi: u8) -> Vec<u8> {
        (lo..=hi).filter(|p| MAJOR.contains(&((p + 12 - self.key) % 12))).collect()
    }

    /// Pitch classes of the triad on a scale degree.
    fn triad(&self, degree: usize) -> [u8; 3] {
        [0, 2, 4].map(|k| (self.key + MAJOR[(degree + k) % 7]) % 12)
    }

    fn note(&mut self, pitch: u8, onset: u32, duration: u32, velocity: i32) {
        self.notes.push(Note {
            pitch,
            velocity: velocity.clamp(1, 127) as u8,
            onset_tick: onset,
            duration_tick: duration,
            program: self.program,
        });
    }

    /// Durations from `choices` filling one bar exactly.
    fn bar_rhythm(&mut self, choices: &[(u32, f64)]) -> Vec<u32> {
        let mut out = Vec::new();
        let mut left = BAR;
        while left > 0 {
            let fits: Vec<_> = choices.iter().filter(|(d, _)| *d <= left).collect();
            let d = if fits.is_empty() {
                left
            } else {
                fits.choose_weighted(&mut self.rng, |(_, w)| *w).map(|(d, _)| *d).unwrap_or(left)
            };
            out.push(d);
            left -= d;
        }
        out
    }

    /// Mostly stepwise walk over `scale` indices, reflecting at the ends.
    fn walk(&mut self, idx: &mut i32, len: usize, step_prob: f64) {
        let step = if self.rng.gen_bool(step_prob) {
            *[-2, -1, -1, 1, 1, 2].choose(&mut self.rng).unwrap()
        } else {
            *[-5, -4, -3, 3, 4, 5].choose(&mut self.rng).unwrap()
        };
        let mut next = *idx + step;
        if next < 0 || next >= len as i32 {
            next = *idx - step;
        }
        *idx = next.clamp(0, len as i32 - 1);
    }
}

fn melody<R: Rng>(c: &mut Ctx<R>, lo: u8, hi: u8, rhythm: &[(u32, f64)], velocity: i32) {
    let scale = c.scale(lo, hi);
    let mut idx = c.rng.gen_range(scale.len() / 4..3 * scale.len() / 4) as i32;
    for bar in 0..BARS {
        let mut t = bar * BAR;
        for d in c.bar_rhythm(rhythm) {
            let v = velocity + c.rng.gen_range(-5..=5);
            c.note(scale[idx as usize], t, d, v);
            c.walk(&mut idx, scale.len(), 0.8);
            t += d;
        }
    }
}

fn main_melody<R: Rng>(c: &mut Ctx<R>) {
    let v = c.rng.gen_range(85..=110);
    melody(c, 60, 84, &[(SIXTEENTH, 0.5), (EIGHTH, 0.5)], v);
}

fn sub_melody<R: Rng>(c: &mut Ctx<R>) {
    let v = c.rng.gen_range(85..=110) - 20;
    melody(c, 55, 79, &[(2 * BEAT, 0.45), (BEAT, 0.45), (EIGHTH, 0.1)], v);
}

fn pad<R: Rng>(c: &mut Ctx<R>) {
    let v = c.rng.gen_range(55..=80);
    for bar in 0..BARS {
        let split = c.rng.gen_bool(0.5);
        let chords = if split { vec![(0, 2 * BEAT), (2 * BEAT, 2 * BEAT)] } else { vec![(0, BAR)] };
        for (k, (off, dur)) in chords.into_iter().enumerate() {
            let degree = if k == 0 { c.chords[bar as usize] } else { *PROGRESSION_DEGREES.choose(&mut c.rng).unwrap() };
            let [r, third, fifth] = c.triad(degree);
            let root = 48 + r;
            let mut voices = vec![root, root + (third + 12 - r) % 12, root + (fifth + 12 - r) % 12];
            if c.rng.gen_bool(0.5) {
                voices.push(root + 12);
            }
            for p in voices {
                c.note(p, bar * BAR + off, dur, v);
            }
        }
    }
}

fn riff<R: Rng>(c: &mut Ctx<R>) {
    let mut pool = c.scale(50, 74);
    pool.shuffle(&mut c.rng);
    pool.truncate(5);
    let v = c.rng.gen_range(80..=105);
    let mut pattern = Vec::new();
    let mut t = 0;
    for d in c.bar_rhythm(&[(SIXTEENTH, 0.5), (EIGHTH, 0.5)]) {
        let p = *pool.choose(&mut c.rng).unwrap();
        pattern.push((t, p, d, v + c.rng.gen_range(-8..=8)));
        t += d;
    }
    for bar in 0..BARS {
        for &(t, p, d, vel) in &pattern {
            c.note(p, bar * BAR + t, d, vel);
        }
    }
}

fn accompaniment<R: Rng>(c: &mut Ctx<R>) {
    let v = c.rng.gen_range(60..=90);
    let shapes: [&[usize]; 3] = [&[0, 1, 2], &[0, 1, 2, 1], &[0, 1, 2, 3]];
    let shape = *shapes.choose(&mut c.rng).unwrap();
    for bar in 0..BARS {
        let [r, third, fifth] = c.triad(c.chords[bar as usize]);
        let root = 48 + r;
        let tones = [root, root + (third + 12 - r) % 12, root + (fifth + 12 - r) % 12, root + 12];
        for k in 0..8 {
            let p = tones[shape[k as usize % shape.len()]].min(72);
            let vel = v + c.rng.gen_range(-4..=4);
            c.note(p, bar * BAR + k * EIGHTH, EIGHTH, vel);
        }
    }
}

fn bass<R: Rng>(c: &mut Ctx<R>) {
    let v = c.rng.gen_range(80..=110);
    for bar in 0..BARS {
        let [r, _, fifth] = c.triad(c.chords[bar as usize]);
        let root = 36 + r;
        let choices = [root, root, root + (fifth + 12 - r) % 12, root + 12, root - 12];
        for beat in 0..4 {
            let t = bar * BAR + beat * BEAT;
            let mut pick = || choices.choose(&mut c.rng).copied().unwrap().clamp(28, 52);
            let (p1, p2) = (pick(), pick());
            let vel = v + c.rng.gen_range(-5..=5);
            match c.rng.gen_range(0..20) {
                0..=9 => c.note(p1, t, BEAT, vel),
                10..=16 => {
                    c.note(p1, t, EIGHTH, vel);
                    c.note(p2, t + EIGHTH, EIGHTH, vel - 8);
                }
                _ => c.note(p2, t + EIGHTH, EIGHTH, vel),
            }
        }
    }
}

/// One example of `role`, fully determined by `(seed, id)`.
pub fn synthesize_example(role: TrackRole, id: &str, seed: u64) -> LabeledExample {
    let mut rng = seed::rng(seed::derive(seed, id));
    let key = rng.gen_range(0..12);
    let program = *program_pool(role).choose(&mut rng).unwrap();
    let tempo = rng.gen_range(70..=160) as f64;
    let chords = (0..BARS).map(|_| *PROGRESSION_DEGREES.choose(&mut rng).unwrap()).collect();
    let mut c = Ctx { rng, key, program, chords, notes: Vec::new() };
    match role {
        TrackRole::MainMelody => main_melody(&mut c),
        TrackRole::SubMelody => sub_melody(&mut c),
        TrackRole::Pad => pad(&mut c),
        TrackRole::Riff => riff(&mut c),
        TrackRole::Accompaniment => accompaniment(&mut c),
        TrackRole::Bass => bass(&mut c),
    }
    let mut sequence = Sequence::new(SYNTH_PPQ);
    sequence.tempo_bpm = tempo;
    sequence.notes = c.notes;
    sequence.role = Some(role);
    sequence.sort_notes();
    LabeledExample { id: id.to_string(), sequence, role, origin: Origin::Synthetic }
}

/// `n_per_class` examples of every role, ids `syn-<role>-<NNNN>`.
pub fn synthesize_corpus(n_per_class: usize, seed: u64) -> Vec<LabeledExample> {
    TrackRole::ALL
        .iter()
        .flat_map(|&role| (0..n_per_class).map(move |i| (role, format!("syn-{role}-{i:04}"))))
        .map(|(role, id)| synthesize_example(role, &id, seed))
        .collect()
}

/// Writes `<id>.mid` files plus `metadata.csv` into `dir`.
pub fn write_corpus(dir: &Path, examples: &[LabeledExample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(examples.len());
    for e in examples {
        let file = format!("{}.mid", e.id);
        std::fs::write(dir.join(&file), write_smf(&e.sequence))?;
        rows.push((file, e.role));
    }
    write_metadata_csv(&dir.join("metadata.csv"), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_polyphony(s: &Sequence) -> usize {
        let mut best = 0;
        for n in &s.notes {
            let t = n.onset_tick;
            best = best.max(s.notes.iter().filter(|m| m.onset_tick <= t && t < m.end_tick()).count());
        }
        best
    }

    #[test]
    fn role_rules_hold() {
        let corpus = synthesize_corpus(15, 21);
        assert_eq!(corpus.len(), 90);
        for e in &corpus {
            let s = &e.sequence;
            s.validate().unwrap();
            assert!((70.0..=160.0).contains(&s.tempo_bpm));
            assert_eq!(s.time_sig, (4, 4));
            assert!(s.end_tick() <= BARS * BAR, "{}", e.id);
            let (lo, hi) = (s.notes.iter().map(|n| n.pitch).min().unwrap(), s.notes.iter().map(|n| n.pitch).max().unwrap());
            match e.role {
                TrackRole::MainMelody => {
                    assert!(lo >= 60 && hi <= 84);
                    assert_eq!(max_polyphony(s), 1);
                }
                TrackRole::SubMelody => {
                    assert!(lo >= 55 && hi <= 79);
                    assert_eq!(max_polyphony(s), 1);
                }
                TrackRole::Bass => {
                    assert!(lo >= 28 && hi <= 52);
                    assert_eq!(max_polyphony(s), 1);
                    assert!(s.notes.iter().all(|n| n.onset_tick % EIGHTH == 0));
                }
                TrackRole::Accompaniment => {
                    assert!(lo >= 48 && hi <= 72);
                    assert!(s.notes.iter().all(|n| n.duration_tick == EIGHTH));
                    assert_eq!(s.notes.len(), 64);
                }
                TrackRole::Pad => {
                    assert!(max_polyphony(s) >= 3);
                    assert!(s.notes.iter().all(|n| n.duration_tick >= 2 * BEAT));
                }
                TrackRole::Riff => {
                    let bar = |b: u32| {
                        let mut v: Vec<_> = s
                            .notes
                            .iter()
                            .filter(|n| n.onset_tick / BAR == b)
                            .map(|n| (n.onset_tick - b * BAR, n.pitch, n.duration_tick))
                            .collect();
                        v.sort();
                        v
                    };
                    for b in 1..BARS {
                        assert_eq!(bar(b), bar(0));
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synthesize_example(TrackRole::Riff, "x", 1);
        assert_eq!(a, synthesize_example(TrackRole::Riff, "x", 1));
        assert_ne!(a.sequence, synthesize_example(TrackRole::Riff, "x", 2).sequence);
    }

    #[test]
    fn sub_melody_quieter_on_average() {
        let mean_vel = |role| {
            let e: Vec<_> = (0..20).map(|i| synthesize_example(role, &format!("v{i}"), 3)).collect();
            let n: usize = e.iter().map(|e| e.sequence.notes.len()).sum();
            e.iter().flat_map(|e| e.sequence.notes.iter().map(|n| n.velocity as f64)).sum::<f64>() / n as f64
        };
        assert!(mean_vel(TrackRole::MainMelody) - mean_vel(TrackRole::SubMelody) > 10.0);
    }
}
