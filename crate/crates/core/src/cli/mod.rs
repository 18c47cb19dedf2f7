//! Command-line workflows: synth, train, tag, attnmap, contrib, replay.
//!
//! Every command resolves its flags and config files into a [`Run`],
//! executes it and records a [`RunManifest`]. `replay` executes the run
//! stored in a manifest again.

mod kv;

pub use kv::{parse_kv, synth_spec, train_config};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dsp::{extract_window, load_wav, log_mel, resample_linear, DspConfig, DspError, MelSpectrogram, ModelInput};
use crate::introspection::{attention_heatmap, concat_probe, tag_names, IntrospectionError, PgmImage};
use crate::model::{
    build_model, load_checkpoint, predict_tags, save_checkpoint, CheckpointError, Model, ModelConfig, ModelError,
};
use crate::training::{
    clip_to_input, synth_labeled, train_with_progress, Dataset, Item, Label, Split, SynthSpec,
    TrainConfig, TrainingError, TAGS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

/// Height in pixels of each heat-map band under a spectrogram image.
const STRIP_HEIGHT: usize = 16;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DspError> for CliError {
    fn from(e: DspError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io(_) => EXIT_INPUT,
            _ => EXIT_CORRUPT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        let code = match e {
            TrainingError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<IntrospectionError> for CliError {
    fn from(e: IntrospectionError) -> Self {
        Self::input(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "attn-tagger", version, about = "Self-attention music tagger and attention introspection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic tagged corpus (WAV clips plus manifest.csv).
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a rendered corpus and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed used for initialisation and shuffling.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print tag probabilities for one audio file as CSV.
    Tag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Where to write the run manifest (default: <ckpt>.tag.manifest.json).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write the last-layer attention heat map as CSV and PGM.
    Attnmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out_prefix: String,
    },
    /// Concatenate two clips and write tag-wise contribution maps.
    Contrib {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        audio_a: PathBuf,
        #[arg(long)]
        audio_b: PathBuf,
        #[arg(long)]
        tag_a: String,
        #[arg(long)]
        tag_b: String,
        #[arg(long)]
        out_prefix: String,
    },
    /// Re-execute the run recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// A fully resolved command: everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Run {
    Synth {
        spec: SynthSpec,
        out: PathBuf,
    },
    Train {
        data: PathBuf,
        out: PathBuf,
        model: ModelConfig,
        train: TrainConfig,
    },
    Tag {
        ckpt: PathBuf,
        audio: PathBuf,
        manifest: PathBuf,
    },
    Attnmap {
        ckpt: PathBuf,
        audio: PathBuf,
        out_prefix: String,
    },
    Contrib {
        ckpt: PathBuf,
        audio_a: PathBuf,
        audio_b: PathBuf,
        tag_a: String,
        tag_b: String,
        out_prefix: String,
    },
}

impl Run {
    pub fn name(&self) -> &'static str {
        match self {
            Run::Synth { .. } => "synth",
            Run::Train { .. } => "train",
            Run::Tag { .. } => "tag",
            Run::Attnmap { .. } => "attnmap",
            Run::Contrib { .. } => "contrib",
        }
    }

    fn manifest_path(&self) -> PathBuf {
        match self {
            Run::Synth { out, .. } => out.join("run.manifest.json"),
            Run::Train { out, .. } => with_suffix(out, ".manifest.json"),
            Run::Tag { manifest, .. } => manifest.clone(),
            Run::Attnmap { out_prefix, .. } | Run::Contrib { out_prefix, .. } => {
                PathBuf::from(format!("{out_prefix}.manifest.json"))
            }
        }
    }
}

/// Record of one executed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub run: Run,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

/// Files touched by a run and text for standard output.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub stdout: String,
}

/// `path` with `suffix` appended to its file name.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// Turns parsed flags into a resolved run (reading config files).
pub fn resolve(cmd: Command) -> Result<Run, CliError> {
    Ok(match cmd {
        Command::Synth { spec, out } => Run::Synth {
            spec: synth_spec(&read_text(&spec)?)?,
            out,
        },
        Command::Train {
            data,
            config,
            out,
            seed,
        } => {
            let (model, mut train) = train_config(&read_text(&config)?)?;
            if let Some(s) = seed {
                train.seed = s;
            }
            Run::Train {
                data,
                out,
                model,
                train,
            }
        }
        Command::Tag { ckpt, audio, manifest } => Run::Tag {
            manifest: manifest.unwrap_or_else(|| with_suffix(&ckpt, ".tag.manifest.json")),
            ckpt,
            audio,
        },
        Command::Attnmap {
            ckpt,
            audio,
            out_prefix,
        } => Run::Attnmap {
            ckpt,
            audio,
            out_prefix,
        },
        Command::Contrib {
            ckpt,
            audio_a,
            audio_b,
            tag_a,
            tag_b,
            out_prefix,
        } => Run::Contrib {
            ckpt,
            audio_a,
            audio_b,
            tag_a,
            tag_b,
            out_prefix,
        },
        Command::Replay { manifest } => {
            let text = read_text(&manifest)?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("{}: not a run manifest: {e}", manifest.display())))?;
            m.run
        }
    })
}

/// Executes a run and writes its manifest.
pub fn execute(run: &Run) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let outcome = match run {
        Run::Synth { spec, out } => run_synth(spec, out)?,
        Run::Train {
            data,
            out,
            model,
            train,
        } => run_train(data, out, model, train)?,
        Run::Tag { ckpt, audio, .. } => run_tag(ckpt, audio)?,
        Run::Attnmap {
            ckpt,
            audio,
            out_prefix,
        } => run_attnmap(ckpt, audio, out_prefix)?,
        Run::Contrib {
            ckpt,
            audio_a,
            audio_b,
            tag_a,
            tag_b,
            out_prefix,
        } => run_contrib(ckpt, audio_a, audio_b, tag_a, tag_b, out_prefix)?,
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        run: run.clone(),
        inputs: outcome.inputs.clone(),
        outputs: outcome.outputs.clone(),
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&run.manifest_path(), json + "\n")?;
    Ok(outcome)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Output goes to stdout/stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match resolve(cli.command).and_then(|run| execute(&run)) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn clip_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("clip_{id:05}.wav"))
}

fn run_synth(spec: &SynthSpec, out: &Path) -> Result<Outcome, CliError> {
    spec.validate().map_err(|e| CliError::input(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("cannot create {}: {e}", out.display())))?;
    let draws = crate::training::sample_labels(spec);
    let mut outcome = Outcome::default();
    let mut items = Vec::with_capacity(draws.len());
    for (id, (label, seed, split)) in draws.into_iter().enumerate() {
        let clip = synth_labeled(label, seed).clip;
        let path = clip_path(out, id);
        crate::dsp::write_wav(&path, &clip)?;
        outcome.outputs.push(path);
        items.push(Item {
            id,
            seed,
            label,
            split,
            input: ModelInput::new(vec![0.0], 1, 1)?,
            gap_frames: None,
        });
    }
    let manifest = out.join("manifest.csv");
    write_file(&manifest, Dataset { items }.manifest_csv())?;
    outcome.outputs.push(manifest);
    outcome.stdout = format!("wrote {} clips to {}\n", spec.n_clips, out.display());
    Ok(outcome)
}

/// Loads a corpus written by `synth`.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.is_dir() {
        return Err(CliError::input(format!("dataset directory {} does not exist", dir.display())));
    }
    let text = read_text(&dir.join("manifest.csv"))?;
    let mut lines = text.lines();
    let expected = format!("clip_id,seed,{},split", TAGS.join(","));
    if lines.next() != Some(expected.as_str()) {
        return Err(CliError::input(format!("{}: unexpected manifest header", dir.display())));
    }
    let cfg = DspConfig::default();
    let mut items = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || CliError::input(format!("manifest line {}: malformed row {line:?}", n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 + TAGS.len() {
            return Err(bad());
        }
        let id: usize = cols[0].parse().map_err(|_| bad())?;
        let seed: u64 = cols[1].parse().map_err(|_| bad())?;
        let labels = cols[2..2 + TAGS.len()]
            .iter()
            .map(|v| v.parse::<f32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        let label = Label::from_multi_hot(&labels).map_err(|e| CliError::input(e.to_string()))?;
        let split = Split::parse(cols[2 + TAGS.len()]).ok_or_else(bad)?;
        let clip = load_wav(clip_path(dir, id))?;
        items.push(Item {
            id,
            seed,
            label,
            split,
            input: clip_to_input(&clip, &cfg)?,
            gap_frames: None,
        });
    }
    Ok(Dataset { items })
}

fn run_train(data: &Path, out: &Path, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Outcome, CliError> {
    model_cfg.validate()?;
    let dataset = load_dataset_dir(data)?;
    let model = build_model(model_cfg, cfg.seed)?;
    let result = train_with_progress(&model, &dataset, cfg, |r| {
        eprintln!(
            "epoch {:>3}  train {:.6}  valid {:.6}",
            r.epoch, r.train_loss, r.valid_loss
        )
    })?;
    save_checkpoint(&result.model, out)?;
    let history = with_suffix(out, ".history.csv");
    write_file(&history, result.history_csv())?;
    Ok(Outcome {
        inputs: vec![data.join("manifest.csv")],
        outputs: vec![out.to_owned(), history],
        stdout: format!("best epoch {} of {}\n", result.best_epoch, cfg.epochs),
    })
}

/// Decodes a WAV file into the model's input window.
fn audio_input(path: &Path, model: &Model) -> Result<(ModelInput, MelSpectrogram), CliError> {
    let cfg = DspConfig {
        n_mels: model.config().n_mels,
        ..DspConfig::default()
    };
    let clip = resample_linear(&load_wav(path)?, cfg.sample_rate)?;
    let spec = log_mel(&clip, &cfg)?;
    let window = extract_window(&spec, 0)?;
    if window.frames() != model.config().frames {
        return Err(CliError::input(format!(
            "model expects {} frames, audio window has {}",
            model.config().frames,
            window.frames()
        )));
    }
    Ok((window, spec))
}

fn numeric_check(values: &[f32], what: &str) -> Result<(), CliError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("{what} contains non-finite values"),
        })
    }
}

fn run_tag(ckpt: &Path, audio: &Path) -> Result<Outcome, CliError> {
    let model = load_checkpoint(ckpt)?;
    let (input, _) = audio_input(audio, &model)?;
    let (pred, _) = predict_tags(&model, &input, None)?;
    numeric_check(&pred.probabilities, "prediction")?;
    let names = tag_names(model.config().n_tags);
    let values: Vec<String> = pred.probabilities.iter().map(|p| format!("{p:.6}")).collect();
    Ok(Outcome {
        inputs: vec![ckpt.to_owned(), audio.to_owned()],
        outputs: Vec::new(),
        stdout: format!("{}\n{}\n", names.join(","), values.join(",")),
    })
}

/// Spectrogram image (low frequencies at the bottom) with bands below it.
fn spectrogram_with_strips(input: &ModelInput, strips: &[PgmImage]) -> Result<PgmImage, CliError> {
    let spec = PgmImage::from_matrix(input.values(), input.n_mels(), input.frames())?.flipped();
    let mut parts = vec![spec];
    parts.extend_from_slice(strips);
    Ok(PgmImage::vstack(&parts)?)
}

fn run_attnmap(ckpt: &Path, audio: &Path, prefix: &str) -> Result<Outcome, CliError> {
    let model = load_checkpoint(ckpt)?;
    let (input, _) = audio_input(audio, &model)?;
    let (_, attention) = predict_tags(&model, &input, None)?;
    let map = attention_heatmap(&attention)?;
    numeric_check(&map.raw, "attention heat map")?;
    let csv = PathBuf::from(format!("{prefix}.heatmap.csv"));
    write_file(&csv, map.to_csv())?;
    let pgm = PathBuf::from(format!("{prefix}.pgm"));
    let image = spectrogram_with_strips(&input, &[PgmImage::strip(&map.values, STRIP_HEIGHT)?])?;
    write_file(&pgm, image.encode())?;
    Ok(Outcome {
        inputs: vec![ckpt.to_owned(), audio.to_owned()],
        outputs: vec![csv, pgm],
        stdout: String::new(),
    })
}

fn run_contrib(
    ckpt: &Path,
    audio_a: &Path,
    audio_b: &Path,
    tag_a: &str,
    tag_b: &str,
    prefix: &str,
) -> Result<Outcome, CliError> {
    let model = load_checkpoint(ckpt)?;
    let rate = DspConfig::default().sample_rate;
    let clip_a = resample_linear(&load_wav(audio_a)?, rate)?;
    let clip_b = resample_linear(&load_wav(audio_b)?, rate)?;
    let probe = concat_probe(&model, &clip_a, &clip_b, tag_a, tag_b)?;
    numeric_check(&probe.map.values, "contribution map")?;
    let (ka, kb) = (probe.map.tag_index(tag_a)?, probe.map.tag_index(tag_b)?);

    let rows = PathBuf::from(format!("{prefix}.contrib.csv"));
    write_file(&rows, probe.map.rows_csv(&[ka, kb]))?;
    let all = PathBuf::from(format!("{prefix}.contrib_all.csv"));
    write_file(&all, probe.map.to_csv())?;
    let logits = PathBuf::from(format!("{prefix}.logits.csv"));
    write_file(&logits, probe.map.logits_csv())?;

    let frames = probe.map.frames;
    let pair: Vec<f32> = probe.rows.concat();
    let bands = PgmImage::from_matrix(&pair, 2, frames)?;
    let strips: Vec<PgmImage> = bands
        .pixels
        .chunks(frames)
        .map(|row| PgmImage {
            width: frames,
            height: STRIP_HEIGHT,
            pixels: row.repeat(STRIP_HEIGHT),
        })
        .collect();
    let pgm = PathBuf::from(format!("{prefix}.pgm"));
    write_file(&pgm, spectrogram_with_strips(&probe.input, &strips)?.encode())?;
    Ok(Outcome {
        inputs: vec![ckpt.to_owned(), audio_a.to_owned(), audio_b.to_owned()],
        outputs: vec![rows, all, logits, pgm],
        stdout: format!("boundary_frame={}\n", probe.boundary_frame),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes_append_to_file_names() {
        assert_eq!(with_suffix(Path::new("out/m.ckpt"), ".history.csv"), PathBuf::from("out/m.ckpt.history.csv"));
    }

    #[test]
    fn runs_round_trip_through_json() {
        let run = Run::Train {
            data: "d".into(),
            out: "m.ckpt".into(),
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
        };
        let json = serde_json::to_string(&run).unwrap();
        assert!(json.contains("\"command\":\"train\""));
        assert_eq!(serde_json::from_str::<Run>(&json).unwrap(), run);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(CheckpointError::Truncated("x")).code, EXIT_CORRUPT);
        assert_eq!(CliError::from(CheckpointError::Io("x".into())).code, EXIT_INPUT);
        let nf = TrainingError::NonFinite {
            epoch: 1,
            batch: 0,
            items: vec![],
            loss: f32::NAN,
        };
        assert_eq!(CliError::from(nf).code, EXIT_NUMERIC);
    }
}
