//! Command-line surface. [`run`] returns the process exit code: 0 success,
//! 1 usage error, 2 data error, 3 numeric failure. Messages go to standard
//! error; `predict` prints its result line on standard output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataset::{synthesize_corpus, write_corpus, Split};
use crate::dsp::log_mel;
use crate::error::{Error, Result};
use crate::eval::render_confusion_svg;
use crate::midi::{parse_smf, write_metadata_csv};
use crate::models::{format_prediction, AnyModel, Domain, Mode, ModelInput};
use crate::nn::Checkpoint;
use crate::pipeline::{
    crop_frames, evaluate_examples, hash_files, load_corpus, manifest_text, prepare_splits, pretrain_audio,
    pretrain_symbolic, sha256_hex, train_classifier, METADATA_FILE,
};
use crate::synth::{read_wav, render, write_wav};
use crate::tokenizer::encode_with_report;

#[derive(Parser, Debug)]
#[command(name = "trackrole", version, about = "Track-role classification of single-instrument music")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic labeled SMF corpus with metadata.csv.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render every corpus file to a 48 kHz WAV.
    RenderAudio {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain an encoder or backbone and save it.
    Pretrain {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a role classifier.
    Train {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split and write a report directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print `<role> p=[...]` for one .mid or .wav file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SynthData { out, per_class, seed } => synth_data(&out, per_class, seed),
        Cmd::RenderAudio { input, out, seed } => render_audio(&input, &out, seed),
        Cmd::Pretrain { domain, config, out } => pretrain(domain, &config, &out),
        Cmd::Train { domain, mode, init, config, out } => train(domain, mode, init.as_deref(), &config, &out),
        Cmd::Evaluate { ckpt, split, report } => evaluate(&ckpt, split, &report),
        Cmd::Predict { ckpt, input } => predict(&ckpt, &input),
    }
}

/// `<stem>.manifest.txt` next to `path`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn entries<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn synth_data(out: &Path, per_class: usize, seed: u64) -> Result<()> {
    if per_class == 0 {
        return Err(Error::Usage("--per-class must be at least 1".into()));
    }
    let corpus = synthesize_corpus(per_class, seed);
    write_corpus(out, &corpus)?;
    let mut names = vec![METADATA_FILE.to_string()];
    names.extend(corpus.iter().map(|e| format!("{}.mid", e.id)));
    let m = entries([
        ("command", "synth-data".into()),
        ("seed", seed.to_string()),
        ("per_class", per_class.to_string()),
        ("examples", corpus.len().to_string()),
        ("data.hash", hash_files(out, &names)?),
    ]);
    fs::write(out.join("manifest.txt"), manifest_text(&m))?;
    eprintln!("wrote {} sequences to {}", corpus.len(), out.display());
    Ok(())
}

fn render_audio(input: &Path, out: &Path, seed: u64) -> Result<()> {
    let corpus = load_corpus(input)?;
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(corpus.examples.len());
    for e in &corpus.examples {
        let file = format!("{}.wav", e.id);
        fs::write(out.join(&file), write_wav(&render(&e.sequence, seed)))?;
        rows.push((file, e.role));
    }
    write_metadata_csv(&out.join(METADATA_FILE), &rows)?;
    let mut names = vec![METADATA_FILE.to_string()];
    names.extend(rows.iter().map(|(f, _)| f.clone()));
    let m = entries([
        ("command", "render-audio".into()),
        ("render.seed", seed.to_string()),
        ("input.hash", corpus.hash),
        ("clips", rows.len().to_string()),
        ("audio.hash", hash_files(out, &names)?),
    ]);
    fs::write(out.join("manifest.txt"), manifest_text(&m))?;
    eprintln!("rendered {} clips to {}", rows.len(), out.display());
    Ok(())
}

fn save_checkpoint(ckpt: &Checkpoint, out: &Path) -> Result<String> {
    create_parent(out)?;
    let bytes = ckpt.to_bytes();
    fs::write(out, &bytes)?;
    Ok(sha256_hex(&bytes))
}

fn pretrain(domain: Domain, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (examples, hash) = match &cfg.pretrain_dir {
        Some(dir) => {
            let c = load_corpus(dir)?;
            (c.examples, c.hash)
        }
        None => {
            let c = load_corpus(&cfg.data_dir)?;
            (prepare_splits(&c.examples, &RunConfig { augment: Default::default(), ..cfg.clone() })?.train, c.hash)
        }
    };
    let examples: Vec<_> = examples.into_iter().filter(|e| !e.is_augmented()).collect();
    let mut m = cfg.entries();
    m.insert("command".into(), format!("pretrain --domain {domain}"));
    m.insert("pretrain.examples".into(), examples.len().to_string());
    m.insert("pretrain.data_hash".into(), hash.clone());
    let mut ckpt = match domain {
        Domain::Symbolic => {
            let (ckpt, r) = pretrain_symbolic(&examples, &cfg)?;
            m.insert("masked_loss.initial".into(), format!("{:.6}", r.initial_loss));
            m.insert("masked_loss.final".into(), format!("{:.6}", r.final_loss));
            eprintln!("masked-pitch loss {:.4} -> {:.4}", r.initial_loss, r.final_loss);
            ckpt
        }
        Domain::Audio => {
            let (ckpt, r) = pretrain_audio(&examples, &cfg)?;
            if let Some(last) = r.history.records.last() {
                m.insert("waveform.train_accuracy".into(), format!("{:.6}", last.accuracy));
                eprintln!("waveform-class train accuracy {:.4}", last.accuracy);
            }
            fs::write(sidecar(out, "history.csv"), r.history.to_csv())?;
            ckpt
        }
    };
    ckpt.meta.insert("pretrain.data_hash".into(), hash);
    m.extend(schedule_entries(&cfg));
    m.insert("checkpoint.sha256".into(), save_checkpoint(&ckpt, out)?);
    fs::write(sidecar(out, "manifest.txt"), manifest_text(&m))?;
    Ok(())
}

fn schedule_entries(cfg: &RunConfig) -> BTreeMap<String, String> {
    cfg.train.describe().into_iter().map(|(k, v)| (format!("schedule.{k}"), v)).collect()
}

fn train(domain: Domain, mode: Mode, init: Option<&Path>, config: &Path, out: &Path) -> Result<()> {
    if mode == Mode::FineTune && init.is_none() {
        return Err(Error::Usage("train --mode fine-tune requires --init CKPT".into()));
    }
    let cfg = RunConfig::load(config)?;
    let init_ckpt = init.map(Checkpoint::load).transpose()?;
    let corpus = load_corpus(&cfg.data_dir)?;
    let splits = prepare_splits(&corpus.examples, &cfg)?;
    let trained = train_classifier(domain, mode, init_ckpt.as_ref(), &splits, &cfg)?;
    let mut meta = cfg.to_meta();
    meta.insert("mode".into(), mode.to_string());
    meta.insert("data.hash".into(), corpus.hash.clone());
    let ckpt = trained.model.to_checkpoint(&meta);
    let mut m = cfg.entries();
    m.extend(schedule_entries(&cfg));
    m.insert("command".into(), format!("train --domain {domain} --mode {mode}"));
    m.insert("data.hash".into(), corpus.hash);
    m.insert("split.train".into(), splits.train.len().to_string());
    m.insert("split.val".into(), splits.val.len().to_string());
    m.insert("split.test".into(), splits.test.len().to_string());
    m.insert("steps".into(), trained.report.steps.to_string());
    m.insert("best_epoch".into(), trained.report.best_epoch.map_or("none".into(), |e| e.to_string()));
    m.insert("best_val_accuracy".into(), format!("{:.6}", trained.report.best_val_accuracy));
    if let Some(path) = init {
        m.insert("init.sha256".into(), sha256_hex(&fs::read(path)?));
        m.insert("init.fresh".into(), trained.fresh.join(","));
    }
    m.insert("checkpoint.sha256".into(), save_checkpoint(&ckpt, out)?);
    fs::write(sidecar(out, "history.csv"), trained.report.history.to_csv())?;
    fs::write(sidecar(out, "split.tsv"), splits.manifest.to_text())?;
    fs::write(sidecar(out, "manifest.txt"), manifest_text(&m))?;
    eprintln!(
        "trained {domain} ({mode}) for {} steps; best val accuracy {:.4}",
        trained.report.steps, trained.report.best_val_accuracy
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(AnyModel, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((AnyModel::from_checkpoint(&ckpt)?, ckpt))
}

fn evaluate(ckpt_path: &Path, split: Split, report: &Path) -> Result<()> {
    let (model, ckpt) = load_model(ckpt_path)?;
    let cfg = RunConfig::from_meta(&ckpt.meta)?;
    let corpus = load_corpus(&cfg.data_dir)?;
    if let Some(h) = ckpt.meta.get("data.hash") {
        if *h != corpus.hash {
            return Err(Error::Dataset(format!("{} differs from the corpus the model was trained on", cfg.data_dir.display())));
        }
    }
    let splits = prepare_splits(&corpus.examples, &cfg)?;
    let examples: Vec<_> = splits.get(split).iter().filter(|e| !e.is_augmented()).cloned().collect();
    let ev = evaluate_examples(&model, &examples, &cfg)?;
    let mode = ckpt.meta.get("mode").cloned().unwrap_or_else(|| "unknown".into());
    let domain = model.domain().to_string();
    fs::create_dir_all(report)?;
    fs::write(report.join("metrics.csv"), ev.metrics.to_csv(&domain, &mode))?;
    fs::write(report.join("per_class.csv"), ev.metrics.per_class_csv())?;
    fs::write(report.join("confusion.tsv"), ev.confusion.to_tsv())?;
    fs::write(report.join("confusion.svg"), render_confusion_svg(&ev.confusion, true))?;
    let mut m = cfg.entries();
    m.extend(schedule_entries(&cfg));
    m.insert("command".into(), format!("evaluate --split {split}"));
    m.insert("checkpoint.sha256".into(), sha256_hex(&ckpt.to_bytes()));
    m.insert("data.hash".into(), corpus.hash);
    m.insert("examples".into(), examples.len().to_string());
    m.insert("loss".into(), format!("{:.6}", ev.result.loss));
    fs::write(report.join("manifest.txt"), manifest_text(&m))?;
    eprintln!("{split} accuracy {:.4} on {} examples", ev.metrics.accuracy, examples.len());
    Ok(())
}

fn predict(ckpt_path: &Path, input: &Path) -> Result<()> {
    let (model, ckpt) = load_model(ckpt_path)?;
    let ext = input.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
    let bytes = fs::read(input).map_err(|e| Error::Dataset(format!("{}: {e}", input.display())))?;
    let x = match (ext.as_deref(), &model) {
        (Some("mid" | "midi"), AnyModel::Symbolic(m)) => {
            ModelInput::Tokens(encode_with_report(&parse_smf(&bytes)?, m.config.max_len).0)
        }
        (Some("wav"), AnyModel::Audio(m)) => {
            let cfg = RunConfig::from_meta(&ckpt.meta)?;
            ModelInput::LogMel(crop_frames(log_mel(&read_wav(&bytes)?, &cfg.mel)?, m.config.max_frames))
        }
        (Some("mid" | "midi" | "wav"), _) => {
            return Err(Error::Usage(format!("{} model cannot classify {}", model.domain(), input.display())))
        }
        _ => return Err(Error::Usage(format!("{}: expected a .mid or .wav file", input.display()))),
    };
    let (role, probs) = model.predict(&x)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", format_prediction(role, &probs))?;
    Ok(())
}
