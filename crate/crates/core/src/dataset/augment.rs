use rand::seq::SliceRandom;

use super::{LabeledExample, Origin};
use crate::error::{Error, Result};
use crate::midi::Sequence;
use crate::seed;

/// Pitch shift of every note; `None` if any pitch would leave 0..=127 or
/// the shift exceeds an octave.
pub fn transpose(seq: &Sequence, semitones: i32) -> Option<Sequence> {
    if semitones.abs() > 12 {
        return None;
    }
    let mut out = seq.clone();
    for n in &mut out.notes {
        let p = n.pitch as i32 + semitones;
        if !(0..=127).contains(&p) {
            return None;
        }
        n.pitch = p as u8;
    }
    out.sort_notes();
    Some(out)
}

/// Multiplies the tempo; tick content is untouched.
pub fn scale_tempo(seq: &Sequence, factor: f64) -> Result<Sequence> {
    if !(0.5..=2.0).contains(&factor) {
        return Err(Error::Invalid(format!("tempo factor {factor} outside [0.5, 2.0]")));
    }
    let mut out = seq.clone();
    out.tempo_bpm = seq.tempo_bpm * factor;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub semitone_choices: Vec<i32>,
    pub tempo_factors: Vec<f64>,
    pub variants_per_example: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            semitone_choices: vec![-3, -2, -1, 1, 2, 3],
            tempo_factors: vec![0.9, 1.1],
            variants_per_example: 2,
        }
    }
}

/// Input examples followed by their variants. Each variant is a distinct
/// (semitones, tempo factor) pair drawn without replacement; pairs whose
/// transposition leaves the pitch range are skipped.
pub fn augment_set(train: &[LabeledExample], policy: &AugmentPolicy, seed: u64) -> Vec<LabeledExample> {
    let mut out = train.to_vec();
    if policy.variants_per_example == 0 {
        return out;
    }
    let mut combos = Vec::new();
    for &s in &policy.semitone_choices {
        for &f in &policy.tempo_factors {
            combos.push((s, f));
        }
    }
    for ex in train {
        let mut rng = seed::rng(seed::derive(seed, &format!("augment/{}", ex.id)));
        let mut picks = combos.clone();
        picks.shuffle(&mut rng);
        for (k, &(semis, factor)) in picks.iter().take(policy.variants_per_example).enumerate() {
            let Some(shifted) = transpose(&ex.sequence, semis) else { continue };
            let Ok(sequence) = scale_tempo(&shifted, factor) else { continue };
            out.push(LabeledExample {
                id: format!("{}~aug{k}", ex.id),
                sequence,
                role: ex.role,
                origin: Origin::Augmented {
                    parent_id: ex.id.clone(),
                    transform: format!("semitones={semis:+};tempo_factor={factor}"),
                },
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::Note;
    use crate::synth;

    fn seq_with(pitches: &[u8]) -> Sequence {
        let mut s = Sequence::new(480);
        for (i, &p) in pitches.iter().enumerate() {
            s.notes.push(Note { pitch: p, velocity: 90, onset_tick: 480 * i as u32, duration_tick: 240, program: 0 });
        }
        s
    }

    #[test]
    fn transpose_examples() {
        let s = seq_with(&[60]);
        assert_eq!(transpose(&s, 0).unwrap(), s);
        assert_eq!(transpose(&s, 12).unwrap().notes[0].pitch, 72);
        assert!(transpose(&seq_with(&[120]), 12).is_none());
        assert!(transpose(&seq_with(&[0]), -1).is_none());
    }

    #[test]
    fn tempo_examples() {
        let s = seq_with(&[60]);
        assert_eq!(scale_tempo(&s, 1.0).unwrap().tempo_bpm, 120.0);
        assert!((scale_tempo(&s, 1.1).unwrap().tempo_bpm - 132.0).abs() < 1e-9);
        assert!(scale_tempo(&s, 2.5).is_err());
        assert_eq!(scale_tempo(&s, 1.1).unwrap().notes, s.notes);
    }

    #[test]
    fn rendered_length_scales_inversely() {
        let s = seq_with(&[60, 62, 64, 65]);
        let release = synth::preset_for_program(0, 4).release_s;
        let rel = (release * 48_000.0).round() as usize;
        for factor in [0.9, 1.1, 2.0] {
            let base = synth::render(&s, 4).samples.len() - rel;
            let fast = synth::render(&scale_tempo(&s, factor).unwrap(), 4).samples.len() - rel;
            let expect = base as f64 / factor;
            assert!((fast as f64 - expect).abs() <= s.notes.len() as f64, "{factor}: {fast} vs {expect}");
        }
    }

    #[test]
    fn augment_counts_and_labels() {
        let ex: Vec<LabeledExample> = (0..10)
            .map(|i| LabeledExample {
                id: format!("e{i}"),
                sequence: seq_with(&[60, 64]),
                role: crate::TrackRole::from_index(i % 6).unwrap(),
                origin: Origin::Synthetic,
            })
            .collect();
        let none = AugmentPolicy { variants_per_example: 0, ..AugmentPolicy::default() };
        assert_eq!(augment_set(&ex, &none, 1), ex);
        let aug = augment_set(&ex, &AugmentPolicy::default(), 1);
        assert_eq!(aug.len(), 30);
        assert_eq!(aug, augment_set(&ex, &AugmentPolicy::default(), 1));
        for a in &aug[10..] {
            let Origin::Augmented { parent_id, transform } = &a.origin else { panic!("missing origin") };
            let parent = ex.iter().find(|e| &e.id == parent_id).unwrap();
            assert_eq!(a.role, parent.role);
            assert!(transform.contains("semitones="));
        }
    }
}
