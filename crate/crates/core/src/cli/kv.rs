//! Flat `key = value` config files.

use std::collections::BTreeMap;

use super::CliError;
use crate::model::ModelConfig;
use crate::training::{Label, SynthSpec, TrainConfig};

/// Parsed entries in file order. `#` starts a comment; blank lines are
/// skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::input(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::input(format!("{key}: cannot parse {v:?}")))
}

/// `86x7` style filter shape.
fn shape(key: &str, v: &str) -> Result<(usize, usize), CliError> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| CliError::input(format!("{key}: expected HxW, got {v:?}")))?;
    Ok((value(key, a.trim())?, value(key, b.trim())?))
}

fn no_duplicates(entries: &[(String, String)], repeatable: &[&str]) -> Result<(), CliError> {
    let mut seen = BTreeMap::new();
    for (k, _) in entries {
        if !repeatable.contains(&k.as_str()) && seen.insert(k.as_str(), ()).is_some() {
            return Err(CliError::input(format!("key {k} given twice")));
        }
    }
    Ok(())
}

/// Keys: `n_clips`, `seed`, `clip_seconds` and repeatable `clip`, a
/// comma-separated tag list pinning the label of the next clip.
pub fn synth_spec(text: &str) -> Result<SynthSpec, CliError> {
    let entries = parse_kv(text)?;
    no_duplicates(&entries, &["clip"])?;
    let mut spec = SynthSpec::default();
    for (k, v) in &entries {
        match k.as_str() {
            "n_clips" => spec.n_clips = value(k, v)?,
            "seed" => spec.seed = value(k, v)?,
            "clip_seconds" => spec.clip_seconds = value(k, v)?,
            "clip" => {
                let tags: Vec<&str> = v.split(',').map(str::trim).collect();
                let label = Label::from_tags(&tags)
                    .map_err(|e| CliError::input(format!("clip {}: {e}", spec.fixed_labels.len())))?;
                spec.fixed_labels.push(label);
            }
            _ => return Err(CliError::input(format!("unknown synth spec key {k:?}"))),
        }
    }
    spec.validate().map_err(|e| CliError::input(e.to_string()))?;
    Ok(spec)
}

/// Model and optimiser settings; any key left out keeps its default.
pub fn train_config(text: &str) -> Result<(ModelConfig, TrainConfig), CliError> {
    let entries = parse_kv(text)?;
    no_duplicates(&entries, &[])?;
    let mut m = ModelConfig::default();
    let mut t = TrainConfig::default();
    for (k, v) in &entries {
        match k.as_str() {
            "n_mels" => m.n_mels = value(k, v)?,
            "frames" => m.frames = value(k, v)?,
            "vert_filter" => m.vert_filter = shape(k, v)?,
            "horiz_filter" => m.horiz_filter = shape(k, v)?,
            "channels_per_branch" => m.channels_per_branch = value(k, v)?,
            "d_model" => m.d_model = value(k, v)?,
            "n_layers" => m.n_layers = value(k, v)?,
            "n_heads" => m.n_heads = value(k, v)?,
            "d_ff" => m.d_ff = value(k, v)?,
            "n_tags" => m.n_tags = value(k, v)?,
            "dropout" => m.dropout = value(k, v)?,
            "epochs" => t.epochs = value(k, v)?,
            "batch_size" => t.batch_size = value(k, v)?,
            "learning_rate" => t.learning_rate = value(k, v)?,
            "beta1" => t.beta1 = value(k, v)?,
            "beta2" => t.beta2 = value(k, v)?,
            "eps" => t.eps = value(k, v)?,
            "seed" => t.seed = value(k, v)?,
            _ => return Err(CliError::input(format!("unknown training config key {k:?}"))),
        }
    }
    m.validate().map_err(|e| CliError::input(e.to_string()))?;
    t.validate().map_err(|e| CliError::input(e.to_string()))?;
    Ok((m, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse_kv("# header\n a = 1 \n\nb=two # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two".into())]);
        assert!(parse_kv("novalue\n").is_err());
    }

    #[test]
    fn synth_spec_keys() {
        let s = synth_spec("n_clips = 160\nseed = 4\nclip = quiet, vocal, slow, high\n").unwrap();
        assert_eq!((s.n_clips, s.seed), (160, 4));
        assert_eq!(s.fixed_labels[0].tag_names(), ["quiet", "vocal", "slow", "high"]);
        assert!(synth_spec("clip = loud,quiet,vocal,fast,low\n").is_err());
        assert!(synth_spec("n_clips = 0\n").is_err());
        assert!(synth_spec("colour = red\n").is_err());
        assert!(synth_spec("seed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn train_config_keys() {
        let (m, t) = train_config("vert_filter = 80x5\nepochs = 3\nlearning_rate = 0\n").unwrap();
        assert_eq!(m.vert_filter, (80, 5));
        assert_eq!((t.epochs, t.learning_rate), (3, 0.0));
        assert!(train_config("dropout = 0.1\n").is_err());
        assert!(train_config("epochs = many\n").is_err());
    }
}
