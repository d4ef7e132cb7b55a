//! Oscillator rendering of sequences to 48 kHz mono audio.
//!
//! Each program gets a preset (waveform plus ADSR envelope) drawn from a
//! generator seeded by `(program, dataset_seed)`, so every clip using the
//! same program in one dataset build shares a timbre.

mod wav;

pub use wav::{read_wav, write_wav};

use std::f64::consts::TAU;

use rand::Rng;

use crate::midi::Sequence;
use crate::seed;

pub const SAMPLE_RATE: u32 = 48_000;
pub const NORMALIZE_PEAK: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Waveform {
    Sine,
    Triangle,
    Square,
    Saw,
}

impl Waveform {
    pub const ALL: [Waveform; 4] = [Waveform::Sine, Waveform::Triangle, Waveform::Square, Waveform::Saw];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Value at phase `p` in [0, 1).
    fn sample(self, p: f64) -> f64 {
        match self {
            Waveform::Sine => (TAU * p).sin(),
            Waveform::Triangle => 1.0 - 4.0 * (p - 0.5).abs(),
            Waveform::Square => {
                if p < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Waveform::Saw => 2.0 * p - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub waveform: Waveform,
    pub attack_s: f64,
    pub decay_s: f64,
    pub sustain_level: f64,
    pub release_s: f64,
    pub gain: f64,
}

impl Preset {
    pub fn is_valid(&self) -> bool {
        self.attack_s >= 0.0
            && self.decay_s >= 0.0
            && self.release_s >= 0.0
            && (0.0..=1.0).contains(&self.sustain_level)
            && self.gain > 0.0
            && self.gain <= 1.0
    }

    /// Envelope level `t` seconds after note-on for a note held `held` seconds.
    pub fn envelope(&self, t: f64, held: f64) -> f64 {
        let hold_level = |t: f64| {
            if t < self.attack_s {
                t / self.attack_s
            } else if t < self.attack_s + self.decay_s {
                1.0 - (1.0 - self.sustain_level) * (t - self.attack_s) / self.decay_s
            } else {
                self.sustain_level
            }
        };
        if t < held {
            hold_level(t)
        } else if self.release_s > 0.0 && t < held + self.release_s {
            hold_level(held) * (1.0 - (t - held) / self.release_s)
        } else {
            0.0
        }
    }
}

pub fn preset_for_program(program: u8, dataset_seed: u64) -> Preset {
    let mut rng = seed::rng(seed::derive(dataset_seed, &format!("preset/{program}")));
    let waveform = Waveform::ALL[rng.gen_range(0..4)];
    Preset {
        waveform,
        attack_s: rng.gen_range(0.002..0.04),
        decay_s: rng.gen_range(0.05..0.3),
        sustain_level: rng.gen_range(0.4..0.9),
        release_s: rng.gen_range(0.03..0.25),
        gain: rng.gen_range(0.5..=1.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Self {
        AudioClip { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }
}

fn seconds_to_samples(s: f64) -> usize {
    (s * SAMPLE_RATE as f64).round() as usize
}

/// Samples covered by note content alone: the last note end, without the
/// release tail.
pub fn note_span_samples(seq: &Sequence) -> usize {
    if seq.notes.is_empty() {
        return 0;
    }
    seconds_to_samples(seq.ticks_to_seconds(seq.end_tick()))
}

pub fn render(seq: &Sequence, dataset_seed: u64) -> AudioClip {
    render_with_preset(seq, &preset_for_program(seq.program(), dataset_seed))
}

/// Sums one enveloped oscillator per note, then scales the mix down to a
/// 0.9 peak if it exceeds it. Length is the last note end plus the release.
pub fn render_with_preset(seq: &Sequence, preset: &Preset) -> AudioClip {
    if seq.notes.is_empty() {
        return AudioClip::new(Vec::new());
    }
    let sr = SAMPLE_RATE as f64;
    let total = seconds_to_samples(seq.ticks_to_seconds(seq.end_tick()) + preset.release_s);
    let mut mix = vec![0.0f64; total];
    for n in &seq.notes {
        let start = seconds_to_samples(seq.ticks_to_seconds(n.onset_tick));
        let off = seconds_to_samples(seq.ticks_to_seconds(n.end_tick()));
        let held = (off - start) as f64 / sr;
        let stop = (off + seconds_to_samples(preset.release_s)).min(total);
        let freq = 440.0 * 2f64.powf((n.pitch as f64 - 69.0) / 12.0);
        let amp = n.velocity as f64 / 127.0 * preset.gain;
        let step = freq / sr;
        for (k, out) in mix[start..stop].iter_mut().enumerate() {
            let t = k as f64 / sr;
            let phase = (step * k as f64).fract();
            *out += amp * preset.envelope(t, held) * preset.waveform.sample(phase);
        }
    }
    let peak = mix.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let scale = if peak > NORMALIZE_PEAK as f64 { NORMALIZE_PEAK as f64 / peak } else { 1.0 };
    AudioClip::new(mix.into_iter().map(|s| (s * scale) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::Note;

    fn one_note(pitch: u8, velocity: u8, quarters: u32, bpm: f64) -> Sequence {
        let mut s = Sequence::new(480);
        s.tempo_bpm = bpm;
        s.notes.push(Note { pitch, velocity, onset_tick: 0, duration_tick: 480 * quarters, program: 0 });
        s
    }

    #[test]
    fn presets_deterministic_and_valid() {
        assert_eq!(preset_for_program(0, 9), preset_for_program(0, 9));
        for p in 0..128 {
            assert!(preset_for_program(p, 3).is_valid());
        }
        let mut seen = [false; 4];
        for s in 0..1000 {
            seen[preset_for_program(0, s).waveform.index()] = true;
        }
        assert_eq!(seen, [true; 4]);
    }

    #[test]
    fn empty_sequence_is_empty_clip() {
        assert!(render(&Sequence::new(480), 1).samples.is_empty());
    }

    #[test]
    fn length_and_determinism() {
        let s = one_note(60, 100, 2, 120.0);
        let a = render(&s, 5);
        let b = render(&s, 5);
        assert_eq!(a, b);
        let rel = preset_for_program(0, 5).release_s;
        assert_eq!(a.samples.len(), ((1.0 + rel) * 48_000.0).round() as usize);
        assert!(a.peak() <= NORMALIZE_PEAK + 1e-6);
    }

    #[test]
    fn velocity_monotone() {
        for seed in 0..20 {
            let loud = render(&one_note(60, 127, 1, 120.0), seed).peak();
            let soft = render(&one_note(60, 64, 1, 120.0), seed).peak();
            assert!(loud >= soft, "seed {seed}: {loud} < {soft}");
        }
    }

    #[test]
    fn envelope_shape() {
        let p = Preset {
            waveform: Waveform::Sine,
            attack_s: 0.1,
            decay_s: 0.1,
            sustain_level: 0.5,
            release_s: 0.2,
            gain: 1.0,
        };
        assert_eq!(p.envelope(0.0, 1.0), 0.0);
        assert!((p.envelope(0.1, 1.0) - 1.0).abs() < 1e-12);
        assert!((p.envelope(0.5, 1.0) - 0.5).abs() < 1e-12);
        assert!((p.envelope(1.1, 1.0) - 0.25).abs() < 1e-12);
        assert_eq!(p.envelope(1.3, 1.0), 0.0);
    }
}
