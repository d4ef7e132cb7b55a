//! Renders a synthetic pad to WAV and extracts its log-mel spectrogram.
//!
//! cargo run --release --example render_logmel -- [out.wav]

use trackrole::dataset::synthesize_example;
use trackrole::dsp::{log_mel, mel_center_frequencies, LogMelConfig};
use trackrole::synth::{preset_for_program, render, write_wav, SAMPLE_RATE};
use trackrole::TrackRole;

fn main() -> trackrole::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-pad.wav".into());
    let example = synthesize_example(TrackRole::Pad, "pad", 5);
    let preset = preset_for_program(example.sequence.program(), 5);
    let clip = render(&example.sequence, 5);
    std::fs::write(&out, write_wav(&clip))?;
    println!("{out}: {:.2} s, peak {:.3}, preset {:?}", clip.duration_s(), clip.peak(), preset.waveform);

    let cfg = LogMelConfig::default();
    let spec = log_mel(&clip, &cfg)?;
    let centers = mel_center_frequencies(cfg.n_mels, cfg.n_fft, SAMPLE_RATE, cfg.fmin, cfg.fmax)?;
    println!("log-mel: {} frames x {} bands", spec.frames(), spec.n_mels);
    for t in (0..spec.frames()).step_by((spec.frames() / 8).max(1)) {
        let row = spec.values.row(t);
        let band = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
        println!("t={:6.2}s loudest band {band:2} ({:7.1} Hz) {:6.1} dB", t as f64 * spec.frame_hop_s, centers[band], row[band]);
    }
    Ok(())
}
