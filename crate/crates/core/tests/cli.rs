//! End-to-end checks of the command-line tool and its exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attn_tagger::dsp::{load_wav, write_wav, PcmClip};
use attn_tagger::introspection::{attention_heatmap, parse_pgm};
use attn_tagger::model::{build_model, load_checkpoint, predict_tags, save_checkpoint, ModelConfig};

const BIN: &str = env!("CARGO_BIN_EXE_attn-tagger");

/// A small architecture that still consumes full 96x256 windows.
const SMALL_MODEL: &str = "\
vert_filter = 86x3
horiz_filter = 1x9
channels_per_branch = 4
d_model = 8
n_heads = 2
d_ff = 16
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn small_config() -> ModelConfig {
    ModelConfig {
        vert_filter: (86, 3),
        horiz_filter: (1, 9),
        channels_per_branch: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        ..ModelConfig::default()
    }
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let spec = write(dir, &format!("spec{n}.txt"), &format!("n_clips = {n}\nseed = 3\n"));
    let out = dir.join(format!("data{n}"));
    let o = run(&["synth", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn synth_writes_clips_and_split_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), 160);
    let wavs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
        .count();
    assert_eq!(wavs, 160);
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    let count = |split: &str| manifest.lines().filter(|l| l.ends_with(&format!(",{split}"))).count();
    assert_eq!((count("train"), count("valid"), count("test")), (128, 16, 16));
    assert!(out.join("run.manifest.json").exists());

    // Same spec into a second directory gives byte-identical audio.
    let spec = dir.path().join("spec160.txt");
    let again = dir.path().join("again");
    assert_eq!(code(&run(&["synth", "--spec", s(&spec), "--out", s(&again)])), 0);
    for id in [0, 57, 159] {
        let name = format!("clip_{id:05}.wav");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }
}

#[test]
fn synth_rejects_invalid_labels_and_specs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.txt", "n_clips = 4\nclip = loud,quiet,vocal,fast,low\n");
    let o = run(&["synth", "--spec", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("exactly one active tag"));
    let missing = run(&["synth", "--spec", s(&dir.path().join("nope.txt")), "--out", "x"]);
    assert_eq!(code(&missing), 2);
    assert_eq!(code(&run(&["synth", "--bogus"])), 2);
}

#[test]
fn train_with_zero_learning_rate_returns_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 10);
    let cfg = write(dir.path(), "cfg.txt", &format!("{SMALL_MODEL}epochs = 2\nlearning_rate = 0\n"));
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trained = load_checkpoint(&ckpt).unwrap();
    assert!(trained.bits_eq(&build_model(&small_config(), 7).unwrap()));
    let history = fs::read_to_string(dir.path().join("m.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,valid_loss"));
    assert_eq!(history.lines().count(), 3);
    assert!(dir.path().join("m.ckpt.manifest.json").exists());
}

#[test]
fn train_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.txt", SMALL_MODEL);
    let ckpt = dir.path().join("m.ckpt");
    let missing = run(&["train", "--data", s(&dir.path().join("none")), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!(code(&missing), 2);

    let data = synth(dir.path(), 20);
    let bad_cfg = write(dir.path(), "bad.txt", "epochs = zero\n");
    assert_eq!(code(&run(&["train", "--data", s(&data), "--config", s(&bad_cfg), "--out", s(&ckpt)])), 2);

    // A huge step size drives the parameters to infinity and the loss to NaN.
    let wild = write(dir.path(), "wild.txt", &format!("{SMALL_MODEL}epochs = 2\nbatch_size = 2\nlearning_rate = 1e30\n"));
    let o = run(&["train", "--data", s(&data), "--config", s(&wild), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch"));
}

/// A saved random model plus a WAV of deterministic audio.
fn model_and_audio(dir: &Path) -> (PathBuf, PathBuf) {
    let ckpt = dir.join("r.ckpt");
    save_checkpoint(&build_model(&small_config(), 11).unwrap(), &ckpt).unwrap();
    let samples: Vec<f32> = (0..66_000).map(|i| 0.3 * ((i as f32) * 0.07).sin() * ((i / 4000) % 2) as f32).collect();
    let wav = dir.join("a.wav");
    write_wav(&wav, &PcmClip::new(samples, 16_000).unwrap()).unwrap();
    (ckpt, wav)
}

#[test]
fn tag_prints_probabilities_and_guards_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, wav) = model_and_audio(dir.path());
    let a = run(&["tag", "--ckpt", s(&ckpt), "--audio", s(&wav)]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let out = String::from_utf8(a.stdout.clone()).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "loud,quiet,vocal,no_vocal,fast,slow,low,high");
    let vals: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(vals.len(), 8);
    assert!(vals.iter().all(|v| v.split('.').nth(1).unwrap().len() == 6));
    let b = run(&["tag", "--ckpt", s(&ckpt), "--audio", s(&wav)]);
    assert_eq!(a.stdout, b.stdout);

    let bytes = fs::read(&ckpt).unwrap();
    let truncated = write_bytes(dir.path(), "t.ckpt", &bytes[..bytes.len() / 2]);
    assert_eq!(code(&run(&["tag", "--ckpt", s(&truncated), "--audio", s(&wav)])), 4);
    let mut magic = bytes.clone();
    magic[1] = b'!';
    let magic = write_bytes(dir.path(), "m.ckpt", &magic);
    let o = run(&["tag", "--ckpt", s(&magic), "--audio", s(&wav)]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ATSC"));

    let short = dir.path().join("short.wav");
    write_wav(&short, &PcmClip::new(vec![0.1; 100], 16_000).unwrap()).unwrap();
    assert_eq!(code(&run(&["tag", "--ckpt", s(&ckpt), "--audio", s(&short)])), 2);
    assert_eq!(code(&run(&["tag", "--ckpt", s(&dir.path().join("none")), "--audio", s(&wav)])), 2);
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn attnmap_matches_library_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, wav) = model_and_audio(dir.path());
    let prefix = dir.path().join("am");
    let o = run(&["attnmap", "--ckpt", s(&ckpt), "--audio", s(&wav), "--out-prefix", s(&prefix)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(dir.path().join("am.heatmap.csv")).unwrap();
    let values: Vec<f32> = csv.trim().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 256);

    let model = load_checkpoint(&ckpt).unwrap();
    let clip = load_wav(&wav).unwrap();
    let spec = attn_tagger::dsp::log_mel(&clip, &Default::default()).unwrap();
    let input = attn_tagger::dsp::extract_window(&spec, 0).unwrap();
    let (_, att) = predict_tags(&model, &input, None).unwrap();
    let lib = attention_heatmap(&att).unwrap();
    assert!(values.iter().zip(&lib.raw).all(|(a, b)| a.to_bits() == b.to_bits()));

    let pgm_bytes = fs::read(dir.path().join("am.pgm")).unwrap();
    let pgm = parse_pgm(&pgm_bytes).unwrap();
    assert_eq!(pgm.width, 256);
    assert_eq!(pgm.height, 96 + 16);

    let manifest = dir.path().join("am.manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("\"command\": \"attnmap\"") && text.contains("tool_version"));
    fs::remove_file(dir.path().join("am.pgm")).unwrap();
    assert_eq!(code(&run(&["replay", "--manifest", s(&manifest)])), 0);
    assert_eq!(fs::read(dir.path().join("am.pgm")).unwrap(), pgm_bytes);
    assert_eq!(fs::read_to_string(dir.path().join("am.heatmap.csv")).unwrap(), csv);
}

#[test]
fn contrib_writes_two_rows_and_validates_tags() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, wav) = model_and_audio(dir.path());
    let prefix = dir.path().join("c");
    let args = |ta: &'static str| {
        vec![
            "contrib".to_owned(),
            "--ckpt".into(),
            s(&ckpt).into(),
            "--audio-a".into(),
            s(&wav).into(),
            "--audio-b".into(),
            s(&wav).into(),
            "--tag-a".into(),
            ta.into(),
            "--tag-b".into(),
            "quiet".into(),
            "--out-prefix".into(),
            s(&prefix).into(),
        ]
    };
    let o = Command::new(BIN).args(args("loud")).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout), "boundary_frame=128\n");
    let csv = fs::read_to_string(dir.path().join("c.contrib.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("loud,") && lines[2].starts_with("quiet,"));
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 257));
    let pgm = parse_pgm(&fs::read(dir.path().join("c.pgm")).unwrap()).unwrap();
    assert_eq!((pgm.width, pgm.height), (256, 96 + 32));

    let o = Command::new(BIN).args(args("bass")).output().unwrap();
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bass") && err.contains("loud, quiet, vocal, no_vocal, fast, slow, low, high"), "{err}");
}
