//! Attention heat maps, tag-wise contribution maps and the two-clip
//! concatenation probe, plus plain-file exporters.

mod contribution;
mod heatmap;
mod pgm;

pub use contribution::{concat_probe, tagwise_contribution, tagwise_contribution_column, ConcatProbe, ContributionMap};
pub use heatmap::{attention_heatmap, min_max_normalize, HeatMap};
pub use pgm::{parse_pgm, render_pgm, PgmImage};

use std::fmt::Write as _;

use crate::dsp::DspError;
use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum IntrospectionError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown tag {tag:?}; vocabulary: {}", vocabulary.join(", "))]
    Vocabulary { tag: String, vocabulary: Vec<String> },
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Tag names for a model with `n_tags` outputs: the synthetic vocabulary
/// when the width matches it, generic names otherwise.
pub fn tag_names(n_tags: usize) -> Vec<String> {
    if n_tags == crate::training::N_TAGS {
        crate::training::TAGS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_tags).map(|k| format!("tag{k}")).collect()
    }
}

/// Comma-joined values in shortest round-trip form.
pub(crate) fn csv_values(values: &[f32]) -> String {
    let mut out = String::with_capacity(values.len() * 12);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v}").unwrap();
    }
    out
}
