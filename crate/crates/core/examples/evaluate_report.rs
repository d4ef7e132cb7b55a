//! Builds a confusion matrix from predictions and writes the metrics
//! tables and a row-normalized SVG heat map.
//!
//! cargo run --example evaluate_report -- [out_dir]

use trackrole::eval::{confusion, metrics, render_confusion_svg};
use trackrole::TrackRole;

fn main() -> trackrole::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-report".into()));
    std::fs::create_dir_all(&out)?;
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (i, &role) in TrackRole::ALL.iter().enumerate() {
        for k in 0..20 {
            truth.push(role);
            // Main and sub melody are confused now and then.
            let p = match (role, k % 5) {
                (TrackRole::MainMelody, 0) => TrackRole::SubMelody,
                (TrackRole::SubMelody, 0 | 1) => TrackRole::MainMelody,
                (_, 4) if k % 10 == 4 => TrackRole::ALL[(i + 1) % 6],
                _ => role,
            };
            pred.push(p);
        }
    }
    let cm = confusion(&truth, &pred)?;
    let m = metrics(&cm)?;
    std::fs::write(out.join("metrics.csv"), m.to_csv("example", "from-scratch"))?;
    std::fs::write(out.join("per_class.csv"), m.per_class_csv())?;
    std::fs::write(out.join("confusion.tsv"), cm.to_tsv())?;
    std::fs::write(out.join("confusion.svg"), render_confusion_svg(&cm, true))?;
    print!("{}", cm.to_tsv());
    print!("{}", m.per_class_csv());
    println!("wrote report to {}", out.display());
    Ok(())
}
