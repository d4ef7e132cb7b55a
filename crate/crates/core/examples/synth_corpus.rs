//! Writes a small labeled synthetic corpus and prints its class balance.
//!
//! cargo run --example synth_corpus -- [out_dir]

use trackrole::dataset::{class_counts, synthesize_corpus, write_corpus};
use trackrole::TrackRole;

fn main() -> trackrole::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-corpus".into());
    let corpus = synthesize_corpus(10, 42);
    write_corpus(out.as_ref(), &corpus)?;
    for (role, n) in TrackRole::ALL.iter().zip(class_counts(&corpus)) {
        println!("{role:>14} {n}");
    }
    let first = &corpus[0];
    println!(
        "{}: {} notes, {} bpm, meter {}/{}, program {}",
        first.id,
        first.sequence.notes.len(),
        first.sequence.tempo_bpm,
        first.sequence.time_sig.0,
        first.sequence.time_sig.1,
        first.sequence.program()
    );
    println!("wrote {} files to {out}", corpus.len());
    Ok(())
}
