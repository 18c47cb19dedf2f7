//! Spectrogram CNN front-end, Transformer-encoder back-end and a
//! mean-pool sigmoid tagging head.

mod attention;
mod checkpoint;
mod config;
mod forward;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, TensorError};

pub use attention::{AttentionOverride, AttentionTensor, OVERRIDE_ROW_TOL};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use forward::{
    encoder_forward, encoder_forward_traced, frontend_forward, predict_from_features, predict_tags,
    EncoderTrace, ForwardGraph, LastLayerInput,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape(m) => ModelError::Shape(m),
            TensorError::Contract(m) => ModelError::Contract(m),
        }
    }
}

/// One feature vector per time frame, `frames x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Tensor,
}

impl FeatureSequence {
    pub fn new(values: Tensor) -> Result<Self, ModelError> {
        values.dims2()?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Per-tag sigmoid outputs together with the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TagPrediction {
    pub probabilities: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Learned parameters plus architecture configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    positional: Tensor,
}

/// Sinusoidal table, `frames x d_model`:
/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_table(frames: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0f32; frames * d_model];
    for pos in 0..frames {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            data[pos * d_model + i] = angle.sin() as f32;
            if i + 1 < d_model {
                data[pos * d_model + i + 1] = angle.cos() as f32;
            }
        }
    }
    Tensor::new(vec![frames, d_model], data).expect("positive extents")
}

/// Glorot fan-in and fan-out of a named parameter shape.
fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [cout, cin, kh, kw] => (cin * kh * kw, cout * kh * kw),
        [rows, cols] => (*rows, *cols),
        [n] => (*n, *n),
        _ => unreachable!("parameters are rank 1, 2 or 4"),
    }
}

/// Fresh model: weight tensors uniform in `±sqrt(6/(fan_in+fan_out))`,
/// biases and layer-norm shifts zero, layer-norm scales one.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let t = if name.ends_with(".gamma") {
            Tensor::full(&shape, 1.0)
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            let (fi, fo) = fans(&shape);
            let bound = (6.0 / (fi + fo) as f64).sqrt() as f32;
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, t);
    }
    Model::from_parts(config.clone(), params)
}

impl Model {
    /// Assembles a model from explicit parameters; the name set and shapes
    /// must match the configuration exactly.
    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let want = config.parameter_shapes();
        if want.len() != params.len() {
            return Err(ModelError::Contract(format!(
                "expected {} parameters, got {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape) in &want {
            match params.get(name) {
                Some(t) if t.shape() == &shape[..] => {
                    if !t.is_finite() {
                        return Err(ModelError::Contract(format!("parameter {name} is not finite")));
                    }
                }
                Some(t) => {
                    return Err(ModelError::Shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Contract(format!("missing parameter {name}"))),
            }
        }
        let positional = positional_table(config.frames, config.d_model);
        Ok(Self {
            config,
            params,
            positional,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| ModelError::Contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(ModelError::Shape(format!(
                "parameter {name} has shape {:?}, replacement has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Swaps in a different positional table of the same shape.
    pub fn set_positional(&mut self, table: Tensor) -> Result<(), ModelError> {
        if table.shape() != self.positional.shape() {
            return Err(ModelError::Shape(format!(
                "positional table must be {:?}, got {:?}",
                self.positional.shape(),
                table.shape()
            )));
        }
        self.positional = table;
        Ok(())
    }

    /// Bitwise parameter and config equality.
    pub fn bits_eq(&self, other: &Model) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bits_eq(b))
    }
}
