use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn trackrole(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trackrole")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = trackrole(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const TINY: &str = "seed = 3
data.dir = data
split.seed = 3
augment.variants = 1
symbolic.d_model = 8
symbolic.n_layers = 1
symbolic.n_heads = 2
symbolic.ff_dim = 16
symbolic.max_len = 32
train.epochs = 1
train.batch_size = 8
train.peak_lr = 0.002
pretrain.steps = 3
pretrain.batch_size = 4
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    ok(dir.path(), &["synth-data", "--out", "data", "--per-class", "10", "--seed", "5"]);
    dir
}

#[test]
fn usage_and_data_errors() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(trackrole(d, &[]).status.code(), Some(1));
    assert_eq!(trackrole(d, &["evaluate"]).status.code(), Some(1));
    let no_init = trackrole(
        d,
        &["train", "--domain", "symbolic", "--mode", "fine-tune", "--config", "tiny.conf", "--out", "m.ckpt"],
    );
    assert_eq!(no_init.status.code(), Some(1));
    assert!(!d.join("m.ckpt").exists());
    let missing = trackrole(d, &["evaluate", "--ckpt", "absent.ckpt", "--report", "r"]);
    assert_eq!(missing.status.code(), Some(2));
    fs::write(d.join("bad.conf"), "train.epochz = 3\n").unwrap();
    let bad = trackrole(
        d,
        &["train", "--domain", "symbolic", "--mode", "from-scratch", "--config", "bad.conf", "--out", "m.ckpt"],
    );
    assert_ne!(bad.status.code(), Some(0));
}

#[test]
fn train_evaluate_predict_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    let train = ["train", "--domain", "symbolic", "--mode", "from-scratch", "--config", "tiny.conf", "--out"];
    ok(d, &[&train[..], &["a/model.ckpt"]].concat());
    ok(d, &[&train[..], &["b/model.ckpt"]].concat());
    for f in ["model.ckpt", "model.manifest.txt", "model.history.csv", "model.split.tsv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    ok(d, &["evaluate", "--ckpt", "a/model.ckpt", "--report", "ra"]);
    ok(d, &["evaluate", "--ckpt", "a/model.ckpt", "--report", "rb"]);
    for f in ["metrics.csv", "per_class.csv", "confusion.tsv", "confusion.svg", "manifest.txt"] {
        assert_eq!(fs::read(d.join("ra").join(f)).unwrap(), fs::read(d.join("rb").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("ra/metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,mode,accuracy,precision,recall,f1\nsymbolic,from-scratch,"));

    let mid = fs::read_dir(d.join("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "mid"))
        .unwrap();
    let out = ok(d, &["predict", "--ckpt", "a/model.ckpt", "--input", mid.to_str().unwrap()]);
    let line = String::from_utf8(out.stdout).unwrap();
    let (role, probs) = line.trim_end().split_once(" p=[").unwrap();
    assert!(["accompaniment", "bass", "main_melody", "pad", "riff", "sub_melody"].contains(&role), "{line}");
    let p: Vec<f64> = probs.trim_end_matches(']').split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(p.len(), 6);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    fs::write(d.join("x.wav"), b"RIFF").unwrap();
    let wrong = trackrole(d, &["predict", "--ckpt", "a/model.ckpt", "--input", "x.wav"]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn pretrain_then_fine_tune_records_fresh_head() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["pretrain", "--domain", "symbolic", "--config", "tiny.conf", "--out", "enc.ckpt"]);
    let pm = fs::read_to_string(d.join("enc.manifest.txt")).unwrap();
    assert!(pm.contains("masked_loss.initial="));
    ok(
        d,
        &[
            "train", "--domain", "symbolic", "--mode", "fine-tune", "--init", "enc.ckpt", "--config", "tiny.conf",
            "--out", "ft.ckpt",
        ],
    );
    let m = fs::read_to_string(d.join("ft.manifest.txt")).unwrap();
    let fresh = m.lines().find_map(|l| l.strip_prefix("init.fresh=")).unwrap();
    assert!(!fresh.is_empty());
    assert!(fresh.split(',').all(|n| !n.starts_with("enc.")), "{fresh}");
}
