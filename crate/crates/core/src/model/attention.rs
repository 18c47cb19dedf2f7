use crate::autodiff::Tensor;

use super::ModelError;

/// Row-sum tolerance accepted for an override matrix.
pub const OVERRIDE_ROW_TOL: f32 = 1e-6;

/// Captured attention scores, indexed layer x head x query x key.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    n_layers: usize,
    n_heads: usize,
    frames: usize,
    scores: Vec<f32>,
}

impl AttentionTensor {
    pub(crate) fn from_heads(frames: usize, layers: Vec<Vec<Tensor>>) -> Self {
        let n_layers = layers.len();
        let n_heads = layers.first().map_or(0, Vec::len);
        let mut scores = Vec::with_capacity(n_layers * n_heads * frames * frames);
        for layer in &layers {
            assert_eq!(layer.len(), n_heads);
            for head in layer {
                assert_eq!(head.shape(), &[frames, frames]);
                scores.extend_from_slice(head.data());
            }
        }
        Self {
            n_layers,
            n_heads,
            frames,
            scores,
        }
    }

    /// Builds a tensor from explicit per-layer, per-head matrices.
    pub fn new(frames: usize, layers: Vec<Vec<Vec<f32>>>) -> Result<Self, ModelError> {
        let n_heads = layers.first().map_or(0, Vec::len);
        if layers.is_empty() || n_heads == 0 {
            return Err(ModelError::Shape("attention needs at least one layer and head".into()));
        }
        let mut tensors = Vec::with_capacity(layers.len());
        for layer in layers {
            if layer.len() != n_heads {
                return Err(ModelError::Shape("every layer needs the same head count".into()));
            }
            let heads = layer
                .into_iter()
                .map(|m| Tensor::new(vec![frames, frames], m).map_err(|e| ModelError::Shape(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            tensors.push(heads);
        }
        Ok(Self::from_heads(frames, tensors))
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Row-major `frames x frames` scores of one head.
    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        let sz = self.frames * self.frames;
        let at = (layer * self.n_heads + head) * sz;
        &self.scores[at..at + sz]
    }

    pub fn raw(&self) -> &[f32] {
        &self.scores
    }
}

/// Replacement attention matrix injected into every head of the last
/// encoder layer, after the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOverride {
    matrix: Tensor,
}

impl AttentionOverride {
    /// Accepts a square, non-negative, row-stochastic matrix.
    pub fn new(matrix: Tensor) -> Result<Self, ModelError> {
        check_row_stochastic(&matrix)?;
        Ok(Self { matrix })
    }

    /// Every query attends only to key `t`.
    pub fn one_hot(frames: usize, t: usize) -> Result<Self, ModelError> {
        if t >= frames {
            return Err(ModelError::Contract(format!("bin {t} outside {frames} frames")));
        }
        let mut m = Tensor::zeros(&[frames, frames]);
        for q in 0..frames {
            m.data_mut()[q * frames + t] = 1.0;
        }
        Ok(Self { matrix: m })
    }

    pub fn identity(frames: usize) -> Self {
        let mut m = Tensor::zeros(&[frames, frames]);
        for q in 0..frames {
            m.data_mut()[q * frames + q] = 1.0;
        }
        Self { matrix: m }
    }

    pub fn uniform(frames: usize) -> Self {
        Self {
            matrix: Tensor::full(&[frames, frames], 1.0 / frames as f32),
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn frames(&self) -> usize {
        self.matrix.shape()[0]
    }
}

pub(crate) fn check_row_stochastic(m: &Tensor) -> Result<(), ModelError> {
    let (r, c) = m.dims2().map_err(|e| ModelError::Contract(e.to_string()))?;
    if r != c {
        return Err(ModelError::Contract(format!("override must be square, got {r} x {c}")));
    }
    for q in 0..r {
        let row = m.row(q);
        if row.iter().any(|&v| !(v >= 0.0)) {
            return Err(ModelError::Contract(format!("override row {q} has a negative or NaN entry")));
        }
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > OVERRIDE_ROW_TOL as f64 {
            return Err(ModelError::Contract(format!("override row {q} sums to {sum}, not 1")));
        }
    }
    Ok(())
}
