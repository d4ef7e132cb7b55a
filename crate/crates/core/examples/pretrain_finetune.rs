//! Masked-pitch pretraining on unlabeled sequences, then fine-tuning on a
//! small labeled set next to a from-scratch baseline with the same budget.
//!
//! cargo run --release --example pretrain_finetune

use trackrole::config::RunConfig;
use trackrole::dataset::synthesize_corpus;
use trackrole::models::{Domain, Mode};
use trackrole::pipeline::{evaluate_examples, prepare_splits, pretrain_symbolic, train_classifier};

fn main() -> trackrole::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.seed = 1;
    cfg.train.seed = 1;
    cfg.pretrain.seed = 1;
    cfg.train.epochs = 4;
    let unlabeled = synthesize_corpus(100, 1000);
    let (encoder, report) = pretrain_symbolic(&unlabeled, &cfg)?;
    println!("masked-pitch loss {:.3} -> {:.3}", report.initial_loss, report.final_loss);

    let splits = prepare_splits(&synthesize_corpus(30, 7), &cfg)?;
    for (mode, init) in [(Mode::FineTune, Some(&encoder)), (Mode::FromScratch, None)] {
        let trained = train_classifier(Domain::Symbolic, mode, init, &splits, &cfg)?;
        let ev = evaluate_examples(&trained.model, &splits.test, &cfg)?;
        println!("{mode}: {} steps, test accuracy {:.3}, fresh {:?}", trained.report.steps, ev.metrics.accuracy, trained.fresh);
    }
    Ok(())
}
