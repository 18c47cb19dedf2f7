//! Seeded corpus generation and train/valid/test splitting.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::synth::{synth_labeled, CLIP_SECONDS};
use super::{Label, TrainingError, TAGS};
use crate::dsp::{extract_window, log_mel, DspConfig, ModelInput, PcmClip};

/// Corpus description.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub seed: u64,
    pub clip_seconds: f64,
    /// Labels pinned for the first clips instead of being sampled.
    pub fixed_labels: Vec<Label>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 2000,
            seed: 0,
            clip_seconds: CLIP_SECONDS,
            fixed_labels: Vec::new(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.n_clips == 0 {
            return Err(TrainingError::Config("n_clips must be positive".into()));
        }
        if self.clip_seconds != CLIP_SECONDS {
            return Err(TrainingError::Config(format!(
                "clip_seconds must be {CLIP_SECONDS} (one model window), got {}",
                self.clip_seconds
            )));
        }
        if self.fixed_labels.len() > self.n_clips {
            return Err(TrainingError::Config(format!(
                "{} fixed labels for {} clips",
                self.fixed_labels.len(),
                self.n_clips
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One labelled example.
#[derive(Debug, Clone)]
pub struct Item {
    pub id: usize,
    pub seed: u64,
    pub label: Label,
    pub split: Split,
    pub input: ModelInput,
    /// Frames fully inside the silent gap of a quiet clip.
    pub gap_frames: Option<Range<usize>>,
}

impl Item {
    pub fn target(&self) -> [f32; super::N_TAGS] {
        self.label.multi_hot()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<Item>,
}

/// Per-clip (label, seed) draws and the split assignment of a spec.
pub fn sample_labels(spec: &SynthSpec) -> Vec<(Label, u64, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draws: Vec<(Label, u64)> = (0..spec.n_clips)
        .map(|_| {
            let label = Label::from_index(rng.gen_range(0..16));
            (label, rng.gen())
        })
        .collect();
    for (d, l) in draws.iter_mut().zip(&spec.fixed_labels) {
        d.0 = *l;
    }
    let mut order: Vec<usize> = (0..spec.n_clips).collect();
    order.shuffle(&mut rng);
    let n_train = spec.n_clips * 8 / 10;
    let n_valid = spec.n_clips / 10;
    let mut splits = vec![Split::Test; spec.n_clips];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            splits[i] = Split::Train;
        } else if rank < n_train + n_valid {
            splits[i] = Split::Valid;
        }
    }
    draws.into_iter().zip(splits).map(|((l, s), sp)| (l, s, sp)).collect()
}

/// Log-mel window of a clip as the model sees it.
pub fn clip_to_input(clip: &PcmClip, cfg: &DspConfig) -> Result<ModelInput, TrainingError> {
    Ok(extract_window(&log_mel(clip, cfg)?, 0)?)
}

/// Renders every clip of the spec (in parallel) and converts it to a model
/// input.
pub fn make_dataset(spec: &SynthSpec) -> Result<Dataset, TrainingError> {
    spec.validate()?;
    let cfg = DspConfig::default();
    let items = sample_labels(spec)
        .into_par_iter()
        .enumerate()
        .map(|(id, (label, seed, split))| {
            let s = synth_labeled(label, seed);
            Ok(Item {
                id,
                seed,
                label,
                split,
                input: clip_to_input(&s.clip, &cfg)?,
                gap_frames: s.gap_frames(&cfg),
            })
        })
        .collect::<Result<Vec<_>, TrainingError>>()?;
    Ok(Dataset { items })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |it| it.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Manifest CSV: `clip_id,seed,<8 label columns>,split`.
    pub fn manifest_csv(&self) -> String {
        let mut out = format!("clip_id,seed,{},split\n", TAGS.join(","));
        for it in &self.items {
            let labels: Vec<String> = it.label.multi_hot().iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{},{},{},{}", it.id, it.seed, labels.join(","), it.split.name()).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(n: usize) -> SynthSpec {
        SynthSpec {
            n_clips: n,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let draws = sample_labels(&spec(160));
        let count = |s| draws.iter().filter(|d| d.2 == s).count();
        assert_eq!((count(Split::Train), count(Split::Valid), count(Split::Test)), (128, 16, 16));
    }

    #[test]
    fn default_seed_covers_all_sixteen_labels() {
        let draws = sample_labels(&spec(160));
        let seen: HashSet<usize> = draws.iter().map(|d| d.0.index()).collect();
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn pair_marginals_are_balanced() {
        let draws = sample_labels(&spec(1000));
        for pair in 0..4 {
            let on = draws.iter().filter(|d| d.0.multi_hot()[2 * pair] == 1.0).count();
            let frac = on as f64 / 1000.0;
            assert!((frac - 0.5).abs() <= 0.05, "pair {pair}: {frac}");
        }
    }

    #[test]
    fn dataset_is_deterministic_and_shaped() {
        let a = make_dataset(&spec(10)).unwrap();
        let b = make_dataset(&spec(10)).unwrap();
        assert_eq!(a.manifest_csv(), b.manifest_csv());
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.input, y.input);
            assert_eq!((x.input.n_mels(), x.input.frames()), (96, 256));
            assert_eq!(x.gap_frames.is_some(), !x.label.loud);
        }
        let header = a.manifest_csv().lines().next().unwrap().to_owned();
        assert_eq!(header, "clip_id,seed,loud,quiet,vocal,no_vocal,fast,slow,low,high,split");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(spec(0).validate().is_err());
        let s = SynthSpec {
            clip_seconds: 3.0,
            ..spec(10)
        };
        assert!(s.validate().is_err());
    }
}
