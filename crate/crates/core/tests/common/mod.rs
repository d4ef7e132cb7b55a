#![allow(dead_code)]

use rand::Rng;
use trackrole::midi::{Note, Sequence};
use trackrole::seed;

/// A valid sequence with random timing, meter, tempo (0.01 bpm grid) and
/// one program.
pub fn random_sequence(s: u64) -> Sequence {
    let mut rng = seed::rng(seed::derive(s, "random-sequence"));
    let ppq = [96u16, 120, 192, 480, 960][rng.gen_range(0..5)];
    let mut seq = Sequence::new(ppq);
    seq.tempo_bpm = rng.gen_range(3000..=30000) as f64 / 100.0;
    seq.time_sig = (rng.gen_range(1..=12), [1u8, 2, 4, 8, 16][rng.gen_range(0..5)]);
    let program = rng.gen_range(0..128);
    let n = rng.gen_range(0..60);
    for _ in 0..n {
        seq.notes.push(Note {
            pitch: rng.gen_range(0..128),
            velocity: rng.gen_range(1..128),
            onset_tick: rng.gen_range(0..ppq as u32 * 64),
            duration_tick: rng.gen_range(1..ppq as u32 * 8),
            program,
        });
    }
    seq.sort_notes();
    seq
}
