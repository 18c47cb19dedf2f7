use rayon::prelude::*;

use super::{csv_values, tag_names, IntrospectionError};
use crate::dsp::{concat_spectrograms, extract_window, log_mel, DspConfig, ModelInput, PcmClip};
use crate::model::{AttentionOverride, LastLayerInput, Model};

/// Per-tag, per-frame probabilities from the one-hot override sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMap {
    pub tag_names: Vec<String>,
    pub frames: usize,
    /// `n_tags x frames`, row-major; entry `(k, t)` is the probability of
    /// tag `k` when every last-layer query attends only to frame `t`.
    pub values: Vec<f32>,
    /// Matching logits, same layout.
    pub logits: Vec<f32>,
}

impl ContributionMap {
    pub fn n_tags(&self) -> usize {
        self.tag_names.len()
    }

    pub fn row(&self, tag: usize) -> &[f32] {
        &self.values[tag * self.frames..(tag + 1) * self.frames]
    }

    pub fn logit_row(&self, tag: usize) -> &[f32] {
        &self.logits[tag * self.frames..(tag + 1) * self.frames]
    }

    pub fn tag_index(&self, name: &str) -> Result<usize, IntrospectionError> {
        self.tag_names
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| IntrospectionError::Vocabulary {
                tag: name.to_owned(),
                vocabulary: self.tag_names.clone(),
            })
    }

    /// Header `tag,0,1,..,T-1`, then one row of raw probabilities per tag.
    pub fn to_csv(&self) -> String {
        self.csv_rows(&self.values, 0..self.n_tags())
    }

    pub fn logits_csv(&self) -> String {
        self.csv_rows(&self.logits, 0..self.n_tags())
    }

    /// CSV restricted to the given tag rows.
    pub fn rows_csv(&self, tags: &[usize]) -> String {
        self.csv_rows(&self.values, tags.iter().copied())
    }

    fn csv_rows(&self, data: &[f32], tags: impl Iterator<Item = usize>) -> String {
        let header: Vec<String> = (0..self.frames).map(|t| t.to_string()).collect();
        let mut out = format!("tag,{}\n", header.join(","));
        for k in tags {
            out.push_str(&format!(
                "{},{}\n",
                self.tag_names[k],
                csv_values(&data[k * self.frames..(k + 1) * self.frames])
            ));
        }
        out
    }
}

fn check_input(model: &Model, input: &ModelInput) -> Result<(), IntrospectionError> {
    let cfg = model.config();
    if (input.n_mels(), input.frames()) != (cfg.n_mels, cfg.frames) {
        return Err(IntrospectionError::Contract(format!(
            "input is {}x{} but the model expects {}x{}",
            input.n_mels(),
            input.frames(),
            cfg.n_mels,
            cfg.frames
        )));
    }
    Ok(())
}

/// Probabilities and logits with every last-layer head replaced by a
/// one-hot-at-`t` score matrix. Identical to `predict_tags` with
/// [`AttentionOverride::one_hot`].
pub fn tagwise_contribution_column(
    model: &Model,
    cached: &LastLayerInput,
    t: usize,
) -> Result<(Vec<f32>, Vec<f32>), IntrospectionError> {
    let ov = AttentionOverride::one_hot(model.config().frames, t)?;
    let p = cached.predict(model, &ov)?;
    Ok((p.probabilities, p.logits))
}

/// Runs one override pass per frame. The layers before the last are
/// evaluated once; the passes run in parallel and are assembled by frame
/// index.
pub fn tagwise_contribution(model: &Model, input: &ModelInput) -> Result<ContributionMap, IntrospectionError> {
    check_input(model, input)?;
    let frames = model.config().frames;
    let n_tags = model.config().n_tags;
    let cached = LastLayerInput::compute(model, input)?;
    let columns = (0..frames)
        .into_par_iter()
        .map(|t| tagwise_contribution_column(model, &cached, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut values = vec![0.0f32; n_tags * frames];
    let mut logits = vec![0.0f32; n_tags * frames];
    for (t, (p, l)) in columns.into_iter().enumerate() {
        for k in 0..n_tags {
            values[k * frames + t] = p[k];
            logits[k * frames + t] = l[k];
        }
    }
    Ok(ContributionMap {
        tag_names: tag_names(n_tags),
        frames,
        values,
        logits,
    })
}

/// Result of feeding `a ⊕ b` through the contribution sweep.
#[derive(Debug, Clone)]
pub struct ConcatProbe {
    pub tags: [String; 2],
    /// Contribution rows for the two requested tags.
    pub rows: [Vec<f32>; 2],
    /// First frame that comes from the second clip.
    pub boundary_frame: usize,
    pub input: ModelInput,
    pub map: ContributionMap,
}

/// Crops each clip's spectrogram to half the model window, concatenates
/// them and runs [`tagwise_contribution`] on the result.
pub fn concat_probe(
    model: &Model,
    clip_a: &PcmClip,
    clip_b: &PcmClip,
    tag_a: &str,
    tag_b: &str,
) -> Result<ConcatProbe, IntrospectionError> {
    let names = tag_names(model.config().n_tags);
    let find = |tag: &str| {
        names.iter().position(|n| n == tag).ok_or_else(|| IntrospectionError::Vocabulary {
            tag: tag.to_owned(),
            vocabulary: names.clone(),
        })
    };
    let (ka, kb) = (find(tag_a)?, find(tag_b)?);
    let frames = model.config().frames;
    if frames % 2 != 0 {
        return Err(IntrospectionError::Contract(format!("model window of {frames} frames cannot be halved")));
    }
    let half = frames / 2;
    let cfg = DspConfig {
        n_mels: model.config().n_mels,
        ..DspConfig::default()
    };
    let mut halves = Vec::with_capacity(2);
    for (which, clip) in [("first", clip_a), ("second", clip_b)] {
        let spec = log_mel(clip, &cfg)?;
        if spec.n_frames() < half {
            return Err(IntrospectionError::Contract(format!(
                "{which} clip has {} frames, the probe needs at least {half}",
                spec.n_frames()
            )));
        }
        halves.push(spec.crop(0, half)?);
    }
    let joined = concat_spectrograms(&halves[0], &halves[1])?;
    let input = extract_window(&joined, 0)?;
    let map = tagwise_contribution(model, &input)?;
    Ok(ConcatProbe {
        tags: [tag_a.to_owned(), tag_b.to_owned()],
        rows: [map.row(ka).to_vec(), map.row(kb).to_vec()],
        boundary_frame: half,
        input,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::{build_model, predict_tags, ModelConfig};

    fn input(cfg: &ModelConfig, seed: usize) -> ModelInput {
        let values = (0..cfg.n_mels * cfg.frames)
            .map(|j| (((seed * 7919 + j * 104_729) % 1000) as f32 / 250.0) - 2.0)
            .collect();
        ModelInput::new(values, cfg.n_mels, cfg.frames).unwrap()
    }

    #[test]
    fn columns_match_public_override_api_bitwise() {
        let cfg = ModelConfig::tiny();
        let m = build_model(&cfg, 4).unwrap();
        let x = input(&cfg, 1);
        let map = tagwise_contribution(&m, &x).unwrap();
        assert_eq!(map.values.len(), cfg.n_tags * cfg.frames);
        for t in 0..cfg.frames {
            let ov = AttentionOverride::one_hot(cfg.frames, t).unwrap();
            let (p, _) = predict_tags(&m, &x, Some(&ov)).unwrap();
            for k in 0..cfg.n_tags {
                assert_eq!(map.row(k)[t].to_bits(), p.probabilities[k].to_bits(), "t={t} k={k}");
            }
            // A column recomputed in isolation matches the sweep.
            let cached = LastLayerInput::compute(&m, &x).unwrap();
            let (alone, _) = tagwise_contribution_column(&m, &cached, t).unwrap();
            assert_eq!(alone, p.probabilities);
        }
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn random_model_rows_vary() {
        let cfg = ModelConfig::tiny();
        let m = build_model(&cfg, 8).unwrap();
        let map = tagwise_contribution(&m, &input(&cfg, 2)).unwrap();
        for k in 0..cfg.n_tags {
            let row = map.row(k);
            let mean = row.iter().sum::<f32>() / row.len() as f32;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>();
            assert!(var > 0.0, "row {k} is constant");
        }
    }

    #[test]
    fn nulled_override_path_gives_constant_rows() {
        let cfg = ModelConfig::tiny();
        let mut m = build_model(&cfg, 8).unwrap();
        let last = cfg.n_layers - 1;
        for name in ["attn.wv", "attn.bv", "attn.wo"] {
            let full = format!("encoder.{last}.{name}");
            let shape = m.param(&full).unwrap().shape().to_vec();
            m.set_param(&full, Tensor::zeros(&shape)).unwrap();
        }
        let map = tagwise_contribution(&m, &input(&cfg, 3)).unwrap();
        for k in 0..cfg.n_tags {
            let row = map.row(k);
            assert!(row.iter().all(|v| v.to_bits() == row[0].to_bits()), "row {k}: {row:?}");
        }
    }

    #[test]
    fn csv_layout() {
        let cfg = ModelConfig::tiny();
        let m = build_model(&cfg, 8).unwrap();
        let map = tagwise_contribution(&m, &input(&cfg, 3)).unwrap();
        let csv = map.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + cfg.n_tags);
        assert_eq!(lines[0], "tag,0,1,2,3,4,5,6,7");
        assert!(lines[1].starts_with("tag0,"));
        let parsed: Vec<f32> = lines[1].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, map.row(0));
    }
}
