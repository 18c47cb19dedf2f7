//! Synthetic tagged corpus, optimisation loop and evaluation metrics.

mod dataset;
mod metrics;
mod optim;
mod synth;

pub use dataset::{clip_to_input, make_dataset, sample_labels, Dataset, Item, Split, SynthSpec};
pub use metrics::{evaluate_auc, macro_auc, roc_auc};
pub use optim::{bce_loss, train, train_with_progress, EpochRecord, TrainConfig, TrainOutcome};
pub use synth::{clip_samples, synth_clip, synth_labeled, SynthClip, CLIP_SECONDS, GAP_SECONDS, SYNTH_RATE};

use crate::dsp::DspError;
use crate::model::ModelError;

/// Tag vocabulary: four contrastive pairs, each clip carries exactly one
/// tag of every pair.
pub const TAGS: [&str; 8] = ["loud", "quiet", "vocal", "no_vocal", "fast", "slow", "low", "high"];
pub const N_TAGS: usize = TAGS.len();

pub fn tag_index(name: &str) -> Option<usize> {
    TAGS.iter().position(|t| *t == name)
}

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch} (items {items:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        items: Vec<usize>,
        loss: f32,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One valid label: which side of each pair is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Label {
    pub loud: bool,
    pub vocal: bool,
    pub fast: bool,
    pub low: bool,
}

impl Label {
    /// The 16 valid labels enumerated by the bits of `i` (loud, vocal,
    /// fast, low from the highest bit down); `from_index(0)` is all second
    /// tags.
    pub fn from_index(i: usize) -> Self {
        assert!(i < 16, "label index {i} out of range");
        Self {
            loud: i & 8 != 0,
            vocal: i & 4 != 0,
            fast: i & 2 != 0,
            low: i & 1 != 0,
        }
    }

    pub fn index(&self) -> usize {
        (self.loud as usize) << 3 | (self.vocal as usize) << 2 | (self.fast as usize) << 1 | self.low as usize
    }

    fn sides(&self) -> [bool; 4] {
        [self.loud, self.vocal, self.fast, self.low]
    }

    pub fn multi_hot(&self) -> [f32; N_TAGS] {
        let mut out = [0.0; N_TAGS];
        for (pair, first) in self.sides().into_iter().enumerate() {
            out[2 * pair + usize::from(!first)] = 1.0;
        }
        out
    }

    pub fn from_multi_hot(v: &[f32]) -> Result<Self, TrainingError> {
        if v.len() != N_TAGS {
            return Err(TrainingError::Contract(format!(
                "label has {} entries, expected {N_TAGS}",
                v.len()
            )));
        }
        let mut sides = [false; 4];
        for (pair, side) in sides.iter_mut().enumerate() {
            match (v[2 * pair], v[2 * pair + 1]) {
                (a, b) if a == 1.0 && b == 0.0 => *side = true,
                (a, b) if a == 0.0 && b == 1.0 => *side = false,
                (a, b) => {
                    return Err(TrainingError::Contract(format!(
                        "pair ({}, {}) must have exactly one active tag, got ({a}, {b})",
                        TAGS[2 * pair],
                        TAGS[2 * pair + 1]
                    )))
                }
            }
        }
        let [loud, vocal, fast, low] = sides;
        Ok(Self { loud, vocal, fast, low })
    }

    /// Builds a label from tag names; every pair must be named exactly once.
    pub fn from_tags<S: AsRef<str>>(names: &[S]) -> Result<Self, TrainingError> {
        let mut v = [0.0f32; N_TAGS];
        for n in names {
            let n = n.as_ref();
            let i = tag_index(n).ok_or_else(|| {
                TrainingError::Contract(format!("unknown tag {n:?}; vocabulary: {}", TAGS.join(", ")))
            })?;
            v[i] += 1.0;
        }
        Self::from_multi_hot(&v)
    }

    pub fn tag_names(&self) -> [&'static str; 4] {
        let mut out = [""; 4];
        for (pair, first) in self.sides().into_iter().enumerate() {
            out[pair] = TAGS[2 * pair + usize::from(!first)];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_encodings_round_trip() {
        for i in 0..16 {
            let l = Label::from_index(i);
            assert_eq!(l.index(), i);
            let mh = l.multi_hot();
            assert_eq!(mh.iter().sum::<f32>(), 4.0);
            assert_eq!(Label::from_multi_hot(&mh).unwrap(), l);
            assert_eq!(Label::from_tags(&l.tag_names()).unwrap(), l);
        }
        let l = Label::from_tags(&["quiet", "vocal", "slow", "high"]).unwrap();
        assert_eq!(l.multi_hot(), [0., 1., 1., 0., 0., 1., 0., 1.]);
    }

    #[test]
    fn bad_labels_are_contract_errors() {
        assert!(Label::from_tags(&["loud", "quiet", "vocal", "fast", "low"]).is_err());
        assert!(Label::from_tags(&["loud", "vocal", "fast"]).is_err());
        let e = Label::from_tags(&["loud", "vocal", "fast", "bass"]).unwrap_err();
        assert!(e.to_string().contains("no_vocal"), "{e}");
    }
}
