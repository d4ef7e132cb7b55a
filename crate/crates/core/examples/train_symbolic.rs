//! Trains the token transformer from scratch on a synthetic corpus.
//!
//! cargo run --release --example train_symbolic

use trackrole::config::RunConfig;
use trackrole::dataset::synthesize_corpus;
use trackrole::models::{Domain, Mode};
use trackrole::pipeline::{evaluate_examples, prepare_splits, train_classifier};

fn main() -> trackrole::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.train.epochs = 10;
    let splits = prepare_splits(&synthesize_corpus(40, 1), &cfg)?;
    let trained = train_classifier(Domain::Symbolic, Mode::FromScratch, None, &splits, &cfg)?;
    print!("{}", trained.report.history.to_csv());
    let ev = evaluate_examples(&trained.model, &splits.test, &cfg)?;
    print!("{}", ev.metrics.to_csv("symbolic", "from-scratch"));
    Ok(())
}
