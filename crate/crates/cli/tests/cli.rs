use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[data]
num_utterances = 4
heldout = 1
speakers = 2
channels = 2
vocab = 4
min_tokens = 1
max_tokens = 2
token_ms = 80.0
max_onset_ms = 20.0
tail_ms = 20.0
seed = 11

[model]
d_att = 8
heads = 2
d_ff = 16
cnn_channels = [2, 2]
n_mels = 8
sd_layers = 1
rec_layers = 1
decoder_layers = 1

[train]
epochs = 2
batch_size = 2
warmup = 10
freeze_backend_epochs = 0
seed = 3

[eval]
beam = 2
max_len = 4
"#;

fn msar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msar")).args(args).env("MSAR_THREADS", "1").output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn gen_data_is_deterministic() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&msar(&["-q", "gen-data", "--config", s(&cfg), "--out", s(&a)]));
    ok(&msar(&["-q", "gen-data", "--config", s(&cfg), "--out", s(&b)]));
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["mixture"].as_array().unwrap().len(), 2);
        let wav = v["mixture"][1].as_str().unwrap();
        assert_eq!(fs::read(a.join(wav)).unwrap(), fs::read(b.join(wav)).unwrap());
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&msar(&["-q", "gen-data", "--config", s(&cfg), "--out", s(&a)]));
    ok(&msar(&["-q", "--seed", "12", "gen-data", "--config", s(&cfg), "--out", s(&b)]));
    assert_ne!(fs::read_to_string(a.join("manifest.jsonl")).unwrap(), fs::read_to_string(b.join("manifest.jsonl")).unwrap());
}

#[test]
fn train_then_eval_scores_every_stream() {
    let (dir, _) = setup();
    let single = dir.path().join("single.toml");
    fs::write(&single, TINY.replace("channels = 2", "channels = 1")).unwrap();
    let (data, run, ev) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("eval"));
    ok(&msar(&["-q", "gen-data", "--config", s(&single), "--out", s(&data)]));
    ok(&msar(&["-q", "train", "--config", s(&single), "--data", s(&data), "--out", s(&run)]));
    for f in ["metrics.csv", "metrics.json", "last.ckpt", "config.toml", "stats.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);
    let ckpt = run.join("last.ckpt");
    ok(&msar(&["-q", "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev)]));
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    // header, 4 utterances × 2 speakers, mean
    assert_eq!(csv.lines().count(), 1 + 8 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    ok(&msar(&["-q", "eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev), "--split", "heldout"]));
    assert_eq!(fs::read_to_string(ev.join("eval.csv")).unwrap().lines().count(), 1 + 2 + 1);

    // a different config is refused unless explicitly allowed
    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("channels = 2", "channels = 1").replace("d_ff = 16", "d_ff = 24")).unwrap();
    let out = msar(&["-q", "eval", "--checkpoint", s(&ckpt), "--config", s(&other), "--data", s(&data), "--out", s(&ev)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_dataset_is_a_data_error() {
    let (dir, cfg) = setup();
    let data = dir.path().join("empty");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("manifest.jsonl"), "").unwrap();
    let out = msar(&["-q", "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn malformed_config_is_a_config_error() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[data]\nnum_utterances = 4\nunknown_key = 1\n").unwrap();
    let out = msar(&["-q", "gen-data", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_separation_writes_outputs_and_report() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    ok(&msar(&["-q", "gen-data", "--config", s(&cfg), "--out", s(&data)]));
    let line = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let path = |k: &str, i: usize| data.join(v[k][i].as_str().unwrap());
    let sep = dir.path().join("sep");
    ok(&msar(&[
        "-q",
        "separate",
        "--oracle-masks",
        "--reference",
        s(&path("references", 0)),
        s(&path("references", 1)),
        "--out",
        s(&sep),
        s(&path("mixture", 0)),
        s(&path("mixture", 1)),
    ]));
    assert!(sep.join("sep0.wav").exists() && sep.join("sep1.wav").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(sep.join("separation.json")).unwrap()).unwrap();
    assert_eq!(report["speakers"].as_array().unwrap().len(), 2);

    // one microphone cannot be beamformed
    let out = msar(&["-q", "separate", "--oracle-masks", "--out", s(&sep), s(&path("mixture", 0))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dereverb_writes_sidecar() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    ok(&msar(&["-q", "gen-data", "--config", s(&cfg), "--out", s(&data)]));
    let line = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let input = data.join(v["mixture"][0].as_str().unwrap());
    let output = dir.path().join("clean.wav");
    ok(&msar(&["-q", "dereverb", s(&input), s(&output), "--taps", "5", "--delay", "2", "--iters", "2"]));
    assert!(output.exists());
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("clean.wav.json")).unwrap()).unwrap();
    assert_eq!(side["wpe"]["taps"], 5);
    assert_eq!(side["wpe"]["delay"], 2);
}
