//! Builds a short bass line, round-trips it through SMF and prints its
//! octuple tuples.
//!
//! cargo run --example tokenize

use trackrole::midi::{parse_smf, write_smf, Note, Sequence};
use trackrole::tokenizer::{decode, encode};

fn main() -> trackrole::Result<()> {
    let mut seq = Sequence::new(480);
    seq.tempo_bpm = 96.0;
    for (i, pitch) in [36u8, 36, 43, 41, 36, 48, 46, 43].into_iter().enumerate() {
        seq.notes.push(Note { pitch, velocity: 90, onset_tick: i as u32 * 240, duration_tick: 200, program: 33 });
    }
    let bytes = write_smf(&seq);
    let parsed = parse_smf(&bytes)?;
    assert_eq!(parsed, seq);
    println!("SMF: {} bytes, {} notes", bytes.len(), parsed.notes.len());

    let tokens = encode(&parsed);
    println!("bar pos prog pitch dur vel tempo meter");
    print!("{}", tokens.to_dump());
    assert_eq!(encode(&decode(&tokens, 480)), tokens);
    Ok(())
}
