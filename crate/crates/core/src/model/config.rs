use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters.
///
/// Filter shapes are `(frequency, time)`. The horizontal branch runs on
/// the frequency-averaged signal, so its filter height must be 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub frames: usize,
    pub vert_filter: (usize, usize),
    pub horiz_filter: (usize, usize),
    pub channels_per_branch: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_tags: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 96,
            frames: 256,
            vert_filter: (86, 7),
            horiz_filter: (1, 129),
            channels_per_branch: 64,
            d_model: 128,
            n_layers: 2,
            n_heads: 8,
            d_ff: 256,
            n_tags: 8,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            n_mels: 8,
            frames: 8,
            vert_filter: (5, 3),
            horiz_filter: (1, 5),
            channels_per_branch: 4,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            n_tags: 3,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        let positive = [
            self.n_mels,
            self.frames,
            self.vert_filter.0,
            self.vert_filter.1,
            self.horiz_filter.0,
            self.horiz_filter.1,
            self.channels_per_branch,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.n_tags,
        ];
        if positive.contains(&0) {
            return fail("every extent must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if 2 * self.channels_per_branch != self.d_model {
            return fail(format!(
                "two branches of {} channels do not make d_model {}",
                self.channels_per_branch, self.d_model
            ));
        }
        if self.vert_filter.0 > self.n_mels {
            return fail(format!("vertical filter height {} exceeds {} mel bins", self.vert_filter.0, self.n_mels));
        }
        if self.horiz_filter.0 != 1 {
            return fail("horizontal filter must be one bin tall".into());
        }
        if self.horiz_filter.1 > self.frames || self.vert_filter.1 > self.frames {
            return fail(format!("filter width exceeds {} frames", self.frames));
        }
        if self.dropout != 0.0 {
            return fail("dropout is not supported; use 0".into());
        }
        Ok(())
    }

    /// Every parameter name with its shape, in sorted name order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, d, f) = (self.channels_per_branch, self.d_model, self.d_ff);
        let mut v = vec![
            ("frontend.vert.kernel".to_owned(), vec![c, 1, self.vert_filter.0, self.vert_filter.1]),
            ("frontend.vert.bias".to_owned(), vec![c]),
            ("frontend.horiz.kernel".to_owned(), vec![c, 1, 1, self.horiz_filter.1]),
            ("frontend.horiz.bias".to_owned(), vec![c]),
            ("head.w".to_owned(), vec![d, self.n_tags]),
            ("head.b".to_owned(), vec![self.n_tags]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("encoder.{l}.{s}");
            for m in ["wq", "wk", "wv", "wo"] {
                v.push((p(&format!("attn.{m}")), vec![d, d]));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                v.push((p(&format!("attn.{b}")), vec![d]));
            }
            for ln in ["ln1", "ln2"] {
                v.push((p(&format!("{ln}.gamma")), vec![d]));
                v.push((p(&format!("{ln}.beta")), vec![d]));
            }
            v.push((p("ff.w1"), vec![d, f]));
            v.push((p("ff.b1"), vec![f]));
            v.push((p("ff.w2"), vec![f, d]));
            v.push((p("ff.b2"), vec![d]));
        }
        v.sort();
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}
