//! Trains the log-mel CNN with and without attention feature fusion.
//!
//! cargo run --release --example train_audio_aff

use trackrole::config::RunConfig;
use trackrole::dataset::synthesize_corpus;
use trackrole::models::{Domain, Mode};
use trackrole::pipeline::{evaluate_examples, prepare_splits, train_classifier};

fn main() -> trackrole::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.train.epochs = 6;
    let splits = prepare_splits(&synthesize_corpus(30, 2), &cfg)?;
    for use_aff in [false, true] {
        cfg.audio.use_aff = use_aff;
        let trained = train_classifier(Domain::Audio, Mode::FromScratch, None, &splits, &cfg)?;
        let ev = evaluate_examples(&trained.model, &splits.test, &cfg)?;
        println!(
            "aff={use_aff}: {} parameters, best val {:.3}, test accuracy {:.3}",
            trained.model.params().iter().map(|p| p.value.numel()).sum::<usize>(),
            trained.report.best_val_accuracy,
            ev.metrics.accuracy
        );
    }
    Ok(())
}
