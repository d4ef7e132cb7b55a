//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use trackrole::config::RunConfig;
use trackrole::dataset::{class_counts, split, synthesize_corpus, LabeledExample};
use trackrole::dsp::{log_mel, mel_center_frequencies, LogMelConfig, LogMelSpectrogram, FLOOR_DB};
use trackrole::eval::{metrics, render_confusion_svg, ConfusionMatrix};
use trackrole::midi::{parse_smf, write_smf};
use trackrole::models::{evaluate, train, AudioHead, AudioModel, Domain, Mode, SymbolicModel};
use trackrole::nn::gradcheck::{check, op_cases};
use trackrole::nn::{Graph, Tensor};
use trackrole::pipeline::{audio_pairs, pretrain_symbolic, prepare_splits, token_pairs, train_classifier, Splits};
use trackrole::role::NUM_ROLES;
use trackrole::seed;
use trackrole::synth::{read_wav, write_wav, AudioClip, SAMPLE_RATE};
use trackrole::tokenizer::{decode, encode};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn desk(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.train.seed = seed;
    c.pretrain.seed = seed;
    c.split_seed = 7;
    c.render_seed = 7;
    c
}

fn numerics() -> Outcome {
    let cases = op_cases();
    let mut worst: f64 = 0.0;
    for c in &cases {
        for trial in 0..20 {
            let e = check(c, seed::derive(trial, c.name)).map_err(err)?;
            ensure(e <= 1e-4, format!("{} trial {trial}: relative error {e:e}", c.name))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("{} ops x 20 trials, max relative error {worst:.2e}", cases.len()))
}

fn round_trips() -> Outcome {
    for s in 0..100 {
        let seq = common::random_sequence(s);
        ensure(parse_smf(&write_smf(&seq)).map_err(err)? == seq, format!("SMF sequence {s}"))?;
        let once = encode(&seq);
        ensure(encode(&decode(&once, seq.ppq)) == once, format!("tokenizer sequence {s}"))?;
    }
    let mut rng = seed::rng(seed::derive(0, "wav"));
    let mut worst: f32 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(0..5000);
        let clip = AudioClip::new((0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect());
        let back = read_wav(&write_wav(&clip)).map_err(err)?;
        ensure(back.samples.len() == n, "WAV length")?;
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1.0 / 32767.0, format!("WAV error {worst:e}"))?;
    Ok(format!("100 SMF, 100 tokenizer, 20 WAV; max WAV error {worst:.2e}"))
}

fn sine(freq: f64, amp: f64, n: usize) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    (0..n).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin()) as f32).collect()
}

fn dsp() -> Outcome {
    let c = LogMelConfig::default();
    let silence = log_mel(&AudioClip::new(vec![0.0; SAMPLE_RATE as usize]), &c).map_err(err)?;
    ensure(silence.values.data.iter().all(|&v| v == FLOOR_DB), "silence is not all -100 dB")?;
    ensure(silence.frames() == 96, format!("1 s gives {} frames", silence.frames()))?;

    let centers = mel_center_frequencies(c.n_mels, c.n_fft, SAMPLE_RATE, c.fmin, c.fmax).map_err(err)?;
    let nearest = (0..c.n_mels).min_by(|&a, &b| (centers[a] - 440.0).abs().total_cmp(&(centers[b] - 440.0).abs())).unwrap();
    let tone = log_mel(&AudioClip::new(sine(440.0, 0.5, SAMPLE_RATE as usize)), &c).map_err(err)?;
    for t in 0..tone.frames() {
        let row = tone.values.row(t);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        ensure(arg == nearest, format!("frame {t}: band {arg}, expected {nearest}"))?;
    }

    let mut worst: f64 = 0.0;
    for freq in [110.0, 440.0, 1000.0, 3000.0, 7000.0] {
        let base: Vec<f32> = sine(freq, 0.05, 9600).iter().map(|&x| (x * 4096.0).round() / 4096.0).collect();
        let loud: Vec<f32> = base.iter().map(|&x| x * 10.0).collect();
        let q = log_mel(&AudioClip::new(base), &c).map_err(err)?;
        let l = log_mel(&AudioClip::new(loud), &c).map_err(err)?;
        for (a, b) in q.values.data.iter().zip(&l.values.data) {
            if *a > FLOOR_DB + 40.0 {
                worst = worst.max((b - a - 20.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("+20 dB law error {worst:e}"))?;
    Ok(format!("440 Hz in band {nearest} on all 96 frames; +20 dB error {worst:.1e}"))
}

fn metric_identities() -> Outcome {
    let mut rng = seed::rng(seed::derive(0, "confusion"));
    let mut last = ConfusionMatrix { counts: [[0; NUM_ROLES]; NUM_ROLES] };
    for i in 0..100 {
        let mut cm = ConfusionMatrix { counts: [[0; NUM_ROLES]; NUM_ROLES] };
        for row in cm.counts.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(0..50);
            }
        }
        cm.counts[i % NUM_ROLES][i % NUM_ROLES] += 1;
        let m = metrics(&cm).map_err(err)?;
        ensure((m.recall - m.accuracy).abs() <= 1e-12, format!("matrix {i}: recall {} vs accuracy {}", m.recall, m.accuracy))?;
        let ratio = cm.trace() as f64 / cm.total() as f64;
        ensure((ratio - m.accuracy).abs() <= 1e-12, format!("matrix {i}: trace/total"))?;
        last = cm;
    }
    let svg = render_confusion_svg(&last, true);
    let doc = roxmltree::Document::parse(&svg).map_err(err)?;
    ensure(doc.root_element().has_tag_name("svg"), "root is not <svg>")?;
    let mut rows = [0.0f64; NUM_ROLES];
    let mut cells = 0;
    for n in doc.descendants().filter(|n| n.has_attribute("data-value") && n.has_tag_name("text")) {
        let r: usize = n.attribute("data-row").unwrap().parse().map_err(err)?;
        rows[r] += n.attribute("data-value").unwrap().parse::<f64>().map_err(err)?;
        cells += 1;
    }
    ensure(cells == NUM_ROLES * NUM_ROLES, format!("{cells} annotated cells"))?;
    ensure(rows.iter().all(|s| (s - 1.0).abs() <= 1e-9), format!("row sums {rows:?}"))?;
    Ok("100 random matrices; SVG parses with 36 cells and unit rows".into())
}

/// Desk corpus (120 per class) with its splits and cropped spectrograms.
struct Desk {
    splits: Splits,
    audio: [Vec<(LogMelSpectrogram, usize)>; 3],
}

impl Desk {
    fn build() -> Result<Desk, String> {
        let cfg = desk(1);
        let corpus = synthesize_corpus(120, 7);
        let splits = prepare_splits(&corpus, &cfg).map_err(err)?;
        let pairs = |e: &[LabeledExample]| audio_pairs(e, &cfg).map_err(err);
        let audio = [pairs(&splits.train)?, pairs(&splits.val)?, pairs(&splits.test)?];
        Ok(Desk { splits, audio })
    }

    fn audio_accuracy(&self, seed: u64, use_aff: bool) -> Result<f64, String> {
        let cfg = desk(seed);
        let mut m = AudioModel::new(trackrole::models::AudioConfig { use_aff, ..cfg.audio.clone() }, AudioHead::Roles, seed)
            .map_err(err)?;
        train(&mut m, &self.audio[0], &self.audio[1], &cfg.train).map_err(err)?;
        Ok(evaluate(&m, &self.audio[2]).map_err(err)?.accuracy)
    }
}

const LN6: f64 = 1.791_759_469_228_055;

fn learning(desk_data: &Desk, audio_seed1: &mut Option<f64>) -> Outcome {
    let cfg = desk(1);
    let sym_train = token_pairs(&desk_data.splits.train, cfg.symbolic.max_len);
    let sym0 = evaluate(&SymbolicModel::new(cfg.symbolic.clone(), 1).map_err(err)?, &sym_train).map_err(err)?.loss;
    let aud0 = evaluate(&AudioModel::new(cfg.audio.clone(), AudioHead::Roles, 1).map_err(err)?, &desk_data.audio[0])
        .map_err(err)?
        .loss;
    for (name, l) in [("symbolic", sym0), ("audio", aud0)] {
        ensure((l - LN6).abs() <= 0.15, format!("{name} initial loss {l:.4}, ln 6 = {LN6:.4}"))?;
    }

    let t = Instant::now();
    let mut sc = cfg.clone();
    sc.train.epochs = 20;
    let sym = train_classifier(Domain::Symbolic, Mode::FromScratch, None, &desk_data.splits, &sc).map_err(err)?;
    let test = token_pairs(&desk_data.splits.test, cfg.symbolic.max_len);
    let sym_acc = match &sym.model {
        trackrole::models::AnyModel::Symbolic(m) => evaluate(m, &test).map_err(err)?.accuracy,
        _ => unreachable!(),
    };
    let sym_time = t.elapsed();

    let t = Instant::now();
    let aud_acc = desk_data.audio_accuracy(1, false)?;
    let aud_time = t.elapsed();
    *audio_seed1 = Some(aud_acc);

    let detail = format!(
        "initial loss {sym0:.3}/{aud0:.3}; symbolic {sym_acc:.3} after 20 epochs ({:.0} s), audio {aud_acc:.3} after 10 epochs ({:.0} s)",
        sym_time.as_secs_f64(),
        aud_time.as_secs_f64()
    );
    ensure(sym_acc >= 0.85, format!("symbolic test accuracy below 0.85: {detail}"))?;
    ensure(aud_acc >= 0.75, format!("audio test accuracy below 0.75: {detail}"))?;
    ensure(sym_time < Duration::from_secs(900) && aud_time < Duration::from_secs(900), format!("over 15 min: {detail}"))?;
    Ok(detail)
}

fn fine_tune_direction() -> Outcome {
    let unlabeled: Vec<_> = synthesize_corpus(334, 1000).into_iter().take(2000).collect();
    let labeled = synthesize_corpus(30, 7);
    let mut wins = 0;
    let mut lines = Vec::new();
    for s in 1..=3 {
        let mut cfg = desk(s);
        cfg.train.epochs = 4;
        let splits = prepare_splits(&labeled, &cfg).map_err(err)?;
        let (ckpt, _) = pretrain_symbolic(&unlabeled, &cfg).map_err(err)?;
        let acc = |mode, init| -> Result<(f64, u64), String> {
            let t = train_classifier(Domain::Symbolic, mode, init, &splits, &cfg).map_err(err)?;
            let test = token_pairs(&splits.test, cfg.symbolic.max_len);
            match &t.model {
                trackrole::models::AnyModel::Symbolic(m) => Ok((evaluate(m, &test).map_err(err)?.accuracy, t.report.steps)),
                _ => unreachable!(),
            }
        };
        let (ft, ft_steps) = acc(Mode::FineTune, Some(&ckpt))?;
        let (sc, sc_steps) = acc(Mode::FromScratch, None)?;
        ensure(ft_steps == sc_steps, format!("seed {s}: step budgets differ ({ft_steps} vs {sc_steps})"))?;
        if ft >= sc {
            wins += 1;
        }
        lines.push(format!("seed {s} {ft:.3} vs {sc:.3}"));
    }
    let detail = format!("fine-tune vs scratch: {}; {wins}/3 seeds", lines.join(", "));
    ensure(wins >= 2, detail.clone())?;
    Ok(detail)
}

fn aff(desk_data: &Desk, audio_seed1: Option<f64>) -> Outcome {
    let cfg = desk(1);
    let mut m = AudioModel::new(trackrole::models::AudioConfig { use_aff: true, ..cfg.audio.clone() }, AudioHead::Roles, 3)
        .map_err(err)?;
    let mut rng = seed::rng(5);
    let shape = [2, *cfg.audio.channels.last().unwrap(), 3, 2];
    for trial in 0..20 {
        let xt = Tensor::uniform(&shape, 3.0, &mut rng);
        let yt = Tensor::uniform(&shape, 3.0, &mut rng);
        let mut g = Graph::new();
        let (x, y) = (g.constant(xt.clone()), g.constant(yt.clone()));
        let (_, w) = m.aff_fuse(&mut g, x, y, false).map_err(err)?;
        ensure(g.value(w).data.iter().all(|&v| v > 0.0 && v < 1.0), format!("trial {trial}: weight outside (0, 1)"))?;
        let (same, _) = m.aff_fuse(&mut g, x, x, false).map_err(err)?;
        ensure(g.value(same).data == xt.data, format!("trial {trial}: fuse(x, x) != x"))?;
    }
    m.zero_attention_branches();
    let mut g = Graph::new();
    let xt = Tensor::uniform(&shape, 3.0, &mut rng);
    let yt = Tensor::uniform(&shape, 3.0, &mut rng);
    let (x, y) = (g.constant(xt.clone()), g.constant(yt.clone()));
    let (out, _) = m.aff_fuse(&mut g, x, y, false).map_err(err)?;
    let mean: Vec<f64> = xt.data.iter().zip(&yt.data).map(|(a, b)| (a + b) / 2.0).collect();
    ensure(g.value(out).data == mean, "zero attention is not the exact mean")?;

    let mut with = Vec::new();
    let mut without = Vec::new();
    for s in 1..=3 {
        with.push(desk_data.audio_accuracy(s, true)?);
        without.push(match (s, audio_seed1) {
            (1, Some(a)) => a,
            _ => desk_data.audio_accuracy(s, false)?,
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let detail = format!("identities hold; mean accuracy with fusion {a:.3} {with:.3?}, without {b:.3} {without:.3?}");
    ensure(a >= b - 0.05, detail.clone())?;
    Ok(detail)
}

const PIPELINE_CONF: &str = "seed = 4
data.dir = data
data.audio_dir = wav
split.seed = 4
render.seed = 4
augment.variants = 1
mel.hop = 1920
mel.n_mels = 32
symbolic.d_model = 8
symbolic.n_layers = 1
symbolic.n_heads = 2
symbolic.ff_dim = 16
symbolic.max_len = 32
audio.channels = 2, 4
audio.use_aff = true
audio.hidden_dim = 8
audio.max_frames = 32
train.epochs = 1
train.peak_lr = 0.002
pretrain.steps = 4
pretrain.batch_size = 4
pretrain.epochs = 1
";

fn run_pipeline(dir: &Path) -> Result<Vec<u8>, String> {
    fs::create_dir_all(dir).map_err(err)?;
    fs::write(dir.join("run.conf"), PIPELINE_CONF).map_err(err)?;
    let steps: [&[&str]; 9] = [
        &["synth-data", "--out", "data", "--per-class", "10", "--seed", "4"],
        &["render-audio", "--in", "data", "--out", "wav", "--seed", "4"],
        &["pretrain", "--domain", "symbolic", "--config", "run.conf", "--out", "out/enc.ckpt"],
        &["pretrain", "--domain", "audio", "--config", "run.conf", "--out", "out/cnn.ckpt"],
        &["train", "--domain", "symbolic", "--mode", "fine-tune", "--init", "out/enc.ckpt", "--config", "run.conf", "--out", "out/sym.ckpt"],
        &["train", "--domain", "audio", "--mode", "fine-tune", "--init", "out/cnn.ckpt", "--config", "run.conf", "--out", "out/aud.ckpt"],
        &["evaluate", "--ckpt", "out/sym.ckpt", "--report", "report/sym"],
        &["evaluate", "--ckpt", "out/aud.ckpt", "--report", "report/aud"],
        &["predict", "--ckpt", "out/aud.ckpt", "--input", "wav/syn-bass-0000.wav"],
    ];
    let mut stdout = Vec::new();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_trackrole")).current_dir(dir).args(args).output().map_err(err)?;
        ensure(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
        stdout.extend(out.stdout);
    }
    Ok(stdout)
}

fn files(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files(&p, base, out)?;
        } else {
            out.push((p.strip_prefix(base).unwrap().display().to_string(), fs::read(&p)?));
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (pa, pb) = (run_pipeline(&a)?, run_pipeline(&b)?);
    ensure(pa == pb && !pa.is_empty(), "predict output differs")?;
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    files(&a, &a, &mut fa).map_err(err)?;
    files(&b, &b, &mut fb).map_err(err)?;
    ensure(fa.len() == fb.len(), "different file sets")?;
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        ensure(na == nb && da == db, format!("{na} differs"))?;
    }
    for must in ["out/sym.ckpt", "out/aud.ckpt", "out/sym.manifest.txt", "report/sym/metrics.csv", "report/aud/manifest.txt"] {
        ensure(fa.iter().any(|(n, _)| n == must), format!("{must} missing"))?;
    }
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

fn splits() -> Outcome {
    let corpus = synthesize_corpus(500, 3);
    let m = split(&corpus, 11).map_err(err)?;
    let sizes = (m.test_ids.len(), m.val_ids.len(), m.train_ids.len());
    ensure(sizes == (600, 240, 2160), format!("test/val/train = {sizes:?}"))?;
    for (name, ids, per) in [("test", &m.test_ids, 100), ("val", &m.val_ids, 40), ("train", &m.train_ids, 360)] {
        let picked: Vec<_> = corpus.iter().filter(|e| ids.contains(&e.id)).cloned().collect();
        let counts = class_counts(&picked);
        ensure(counts.iter().all(|&c| c.abs_diff(per) <= 1), format!("{name} class counts {counts:?}"))?;
    }
    Ok("600/240/2160 with per-class counts within 1".into())
}

fn report(n: usize, name: &str, limit: Option<u64>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let mut r = f();
    let secs = t.elapsed().as_secs_f64();
    if let (Some(l), Ok(d)) = (limit, &r) {
        if secs > l as f64 {
            r = Err(format!("{d}; took {secs:.1} s, limit {l} s"));
        }
    }
    let (tag, detail) = match &r {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {n} {name}: {detail} [{secs:.1} s]");
    r.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient checks", Some(60), numerics);
    ok &= report(2, "round-trips", Some(60), round_trips);
    ok &= report(3, "log-mel", Some(60), dsp);
    ok &= report(4, "metric identities", None, metric_identities);
    let desk_data = Desk::build();
    let mut audio_seed1 = None;
    ok &= report(5, "learning sanity", None, || learning(desk_data.as_ref().map_err(Clone::clone)?, &mut audio_seed1));
    ok &= report(6, "fine-tune vs from-scratch", Some(1200), fine_tune_direction);
    ok &= report(7, "feature fusion", None, || aff(desk_data.as_ref().map_err(Clone::clone)?, audio_seed1));
    ok &= report(8, "determinism", None, determinism);
    ok &= report(9, "splits", None, splits);
    if !ok {
        std::process::exit(1);
    }
}
