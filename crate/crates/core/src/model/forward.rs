//! Graph construction for the tagger's forward pass.

use std::collections::HashMap;

use super::attention::check_row_stochastic;
use super::{AttentionOverride, AttentionTensor, FeatureSequence, Model, ModelError, TagPrediction};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::dsp::ModelInput;

/// Inserts model parameters into a graph on first use.
struct Binder<'m> {
    model: &'m Model,
    trainable: bool,
    ids: HashMap<String, NodeId>,
}

impl<'m> Binder<'m> {
    fn new(model: &'m Model, trainable: bool) -> Self {
        Self {
            model,
            trainable,
            ids: HashMap::new(),
        }
    }

    fn get(&mut self, g: &mut Graph, name: &str) -> NodeId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let value = self
            .model
            .param(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
            .clone();
        let id = if self.trainable {
            g.param(name, value)
        } else {
            g.constant(value)
        };
        self.ids.insert(name.to_owned(), id);
        id
    }
}

/// Nodes produced by one encoder layer.
struct LayerNodes {
    out: NodeId,
    scores: Vec<NodeId>,
    values: NodeId,
    heads_concat: NodeId,
}

fn frontend_nodes(g: &mut Graph, b: &mut Binder<'_>, input: NodeId) -> Result<NodeId, ModelError> {
    let cfg = b.model.config();
    let c = cfg.channels_per_branch;
    let t = cfg.frames;
    let freq_out = cfg.n_mels - cfg.vert_filter.0 + 1;

    let kv = b.get(g, "frontend.vert.kernel");
    let bv = b.get(g, "frontend.vert.bias");
    let vert = g.conv2d_same_time(input, kv, bv)?;
    let vert = g.relu(vert)?;
    let vert = g.maxpool2d(vert, freq_out, 1)?;
    let vert = g.reshape(vert, &[c, t])?;

    let kh = b.get(g, "frontend.horiz.kernel");
    let bh = b.get(g, "frontend.horiz.bias");
    let pooled = g.mean_axis(input, 1)?;
    let horiz = g.conv2d_same_time(pooled, kh, bh)?;
    let horiz = g.relu(horiz)?;
    let horiz = g.reshape(horiz, &[c, t])?;

    let both = g.concat(&[vert, horiz], 0)?;
    Ok(g.transpose(both)?)
}

fn dense(g: &mut Graph, b: &mut Binder<'_>, x: NodeId, w: &str, bias: &str) -> Result<NodeId, ModelError> {
    let w = b.get(g, w);
    let bias = b.get(g, bias);
    let y = g.matmul(x, w)?;
    Ok(g.add(y, bias)?)
}

fn encoder_layer_nodes(
    g: &mut Graph,
    b: &mut Binder<'_>,
    layer: usize,
    x: NodeId,
    override_node: Option<NodeId>,
) -> Result<LayerNodes, ModelError> {
    let cfg = b.model.config().clone();
    let dk = cfg.head_dim();
    let p = |s: &str| format!("encoder.{layer}.{s}");

    let values = dense(g, b, x, &p("attn.wv"), &p("attn.bv"))?;
    // Queries are scaled by 1/sqrt(d_k) before the per-head products, which
    // equals scaling the T x T logits and touches far fewer values.
    let qk = match override_node {
        Some(_) => None,
        None => {
            let q = dense(g, b, x, &p("attn.wq"), &p("attn.bq"))?;
            let q = g.scale(q, 1.0 / (dk as f32).sqrt())?;
            Some((q, dense(g, b, x, &p("attn.wk"), &p("attn.bk"))?))
        }
    };
    let mut scores = Vec::with_capacity(cfg.n_heads);
    let mut head_outs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let s = match (override_node, qk) {
            (Some(ov), _) => ov,
            (None, Some((q, k))) => {
                let qh = g.slice(q, 1, h * dk, dk)?;
                let kh = g.slice(k, 1, h * dk, dk)?;
                let logits = g.matmul_nt(qh, kh)?;
                g.softmax_lastdim(logits)?
            }
            (None, None) => unreachable!(),
        };
        let vh = g.slice(values, 1, h * dk, dk)?;
        head_outs.push(g.matmul(s, vh)?);
        scores.push(s);
    }
    let heads_concat = g.concat(&head_outs, 1)?;
    let proj = dense(g, b, heads_concat, &p("attn.wo"), &p("attn.bo"))?;
    let r1 = g.add(x, proj)?;
    let (g1, b1) = (b.get(g, &p("ln1.gamma")), b.get(g, &p("ln1.beta")));
    let n1 = g.layer_norm(r1, g1, b1)?;

    let hidden = dense(g, b, n1, &p("ff.w1"), &p("ff.b1"))?;
    let hidden = g.relu(hidden)?;
    let ff = dense(g, b, hidden, &p("ff.w2"), &p("ff.b2"))?;
    let r2 = g.add(n1, ff)?;
    let (g2, b2) = (b.get(g, &p("ln2.gamma")), b.get(g, &p("ln2.beta")));
    let out = g.layer_norm(r2, g2, b2)?;
    Ok(LayerNodes {
        out,
        scores,
        values,
        heads_concat,
    })
}

fn head_nodes(g: &mut Graph, b: &mut Binder<'_>, x: NodeId) -> Result<(NodeId, NodeId), ModelError> {
    let pooled = g.mean_axis(x, 0)?;
    let logits = dense(g, b, pooled, "head.w", "head.b")?;
    let probs = g.sigmoid(logits)?;
    Ok((logits, probs))
}

fn check_input(model: &Model, input: &ModelInput) -> Result<(), ModelError> {
    let cfg = model.config();
    if input.n_mels() != cfg.n_mels || input.frames() != cfg.frames {
        return Err(ModelError::Shape(format!(
            "input is {} x {}, model expects {} x {}",
            input.n_mels(),
            input.frames(),
            cfg.n_mels,
            cfg.frames
        )));
    }
    Ok(())
}

fn check_override(model: &Model, ov: Option<&AttentionOverride>) -> Result<(), ModelError> {
    if let Some(ov) = ov {
        if ov.frames() != model.config().frames {
            return Err(ModelError::Contract(format!(
                "override is {} frames, model uses {}",
                ov.frames(),
                model.config().frames
            )));
        }
        check_row_stochastic(ov.matrix())?;
    }
    Ok(())
}

fn check_features(model: &Model, features: &FeatureSequence) -> Result<(), ModelError> {
    let cfg = model.config();
    if features.values().shape() != [cfg.frames, cfg.d_model] {
        return Err(ModelError::Shape(format!(
            "features are {:?}, model expects [{}, {}]",
            features.values().shape(),
            cfg.frames,
            cfg.d_model
        )));
    }
    Ok(())
}

/// A recorded forward pass with handles to the interesting nodes.
pub struct ForwardGraph {
    pub graph: Graph,
    pub features: NodeId,
    pub encoded: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    /// Score nodes per layer and head.
    pub scores: Vec<Vec<NodeId>>,
}

impl ForwardGraph {
    /// Records the full pipeline. With `trainable`, parameters are graph
    /// parameters (so [`Graph::backward`] reaches them); otherwise they are
    /// constants.
    pub fn build(
        model: &Model,
        input: &ModelInput,
        ov: Option<&AttentionOverride>,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        check_input(model, input)?;
        check_override(model, ov)?;
        let cfg = model.config();
        let mut g = Graph::new();
        let mut b = Binder::new(model, trainable);
        let x = g.constant(Tensor::new(vec![1, cfg.n_mels, cfg.frames], input.values().to_vec())?);
        let features = frontend_nodes(&mut g, &mut b, x)?;
        let (encoded, scores) = encoder_nodes(&mut g, &mut b, features, ov)?;
        let (logits, probs) = head_nodes(&mut g, &mut b, encoded)?;
        Ok(Self {
            graph: g,
            features,
            encoded,
            logits,
            probs,
            scores,
        })
    }

    /// Appends a mean binary cross-entropy against `target`.
    pub fn bce_loss(&mut self, target: &[f32]) -> Result<NodeId, ModelError> {
        let n = self.graph.value(self.probs).len();
        let t = self.graph.constant(Tensor::new(vec![1, n], target.to_vec())?);
        Ok(self.graph.bce_mean(self.probs, t)?)
    }

    pub fn prediction(&self) -> TagPrediction {
        TagPrediction {
            probabilities: self.graph.value(self.probs).data().to_vec(),
            logits: self.graph.value(self.logits).data().to_vec(),
        }
    }

    pub fn attention(&self) -> AttentionTensor {
        let frames = self.graph.value(self.encoded).shape()[0];
        let layers = self
            .scores
            .iter()
            .map(|hs| hs.iter().map(|&s| self.graph.value(s).clone()).collect())
            .collect();
        AttentionTensor::from_heads(frames, layers)
    }
}

fn encoder_nodes(
    g: &mut Graph,
    b: &mut Binder<'_>,
    features: NodeId,
    ov: Option<&AttentionOverride>,
) -> Result<(NodeId, Vec<Vec<NodeId>>), ModelError> {
    let n_layers = b.model.config().n_layers;
    let pe = g.constant(b.model.positional().clone());
    let mut x = g.add(features, pe)?;
    let mut scores = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let ov_node = match ov {
            Some(ov) if layer + 1 == n_layers => Some(g.constant(ov.matrix().clone())),
            _ => None,
        };
        let nodes = encoder_layer_nodes(g, b, layer, x, ov_node)?;
        scores.push(nodes.scores);
        x = nodes.out;
    }
    Ok((x, scores))
}

/// Front-end features, one row per input frame.
pub fn frontend_forward(model: &Model, input: &ModelInput) -> Result<FeatureSequence, ModelError> {
    check_input(model, input)?;
    let cfg = model.config();
    let mut g = Graph::new();
    let mut b = Binder::new(model, false);
    let x = g.constant(Tensor::new(vec![1, cfg.n_mels, cfg.frames], input.values().to_vec())?);
    let f = frontend_nodes(&mut g, &mut b, x)?;
    FeatureSequence::new(g.value(f).clone())
}

/// Per-layer intermediates of an encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Input to each layer (the first already includes the positional table).
    pub layer_inputs: Vec<Tensor>,
    /// Value projections `x Wv + bv` per layer.
    pub values: Vec<Tensor>,
    /// Concatenated head outputs `scores_h V_h`, before the output
    /// projection and residual.
    pub attention_outputs: Vec<Tensor>,
    pub encoded: FeatureSequence,
    pub attention: AttentionTensor,
}

pub fn encoder_forward_traced(
    model: &Model,
    features: &FeatureSequence,
    ov: Option<&AttentionOverride>,
) -> Result<EncoderTrace, ModelError> {
    check_features(model, features)?;
    check_override(model, ov)?;
    let cfg = model.config();
    let mut g = Graph::new();
    let mut b = Binder::new(model, false);
    let f = g.constant(features.values().clone());
    let pe = g.constant(model.positional().clone());
    let mut x = g.add(f, pe)?;
    let mut trace = EncoderTrace {
        layer_inputs: Vec::new(),
        values: Vec::new(),
        attention_outputs: Vec::new(),
        encoded: features.clone(),
        attention: AttentionTensor::from_heads(cfg.frames, Vec::new()),
    };
    let mut scores = Vec::new();
    for layer in 0..cfg.n_layers {
        let ov_node = match ov {
            Some(ov) if layer + 1 == cfg.n_layers => Some(g.constant(ov.matrix().clone())),
            _ => None,
        };
        trace.layer_inputs.push(g.value(x).clone());
        let nodes = encoder_layer_nodes(&mut g, &mut b, layer, x, ov_node)?;
        trace.values.push(g.value(nodes.values).clone());
        trace.attention_outputs.push(g.value(nodes.heads_concat).clone());
        scores.push(nodes.scores.iter().map(|&s| g.value(s).clone()).collect());
        x = nodes.out;
    }
    trace.encoded = FeatureSequence::new(g.value(x).clone())?;
    trace.attention = AttentionTensor::from_heads(cfg.frames, scores);
    Ok(trace)
}

/// Positional encoding plus the encoder stack. With an override, every
/// head of the last layer uses the override matrix in place of its
/// softmax scores; the captured tensor holds the scores actually used.
pub fn encoder_forward(
    model: &Model,
    features: &FeatureSequence,
    ov: Option<&AttentionOverride>,
) -> Result<(FeatureSequence, AttentionTensor), ModelError> {
    let t = encoder_forward_traced(model, features, ov)?;
    Ok((t.encoded, t.attention))
}

/// Encoder plus tagging head on precomputed front-end features.
pub fn predict_from_features(
    model: &Model,
    features: &FeatureSequence,
    ov: Option<&AttentionOverride>,
) -> Result<(TagPrediction, AttentionTensor), ModelError> {
    check_features(model, features)?;
    check_override(model, ov)?;
    let mut g = Graph::new();
    let mut b = Binder::new(model, false);
    let f = g.constant(features.values().clone());
    let (encoded, scores) = encoder_nodes(&mut g, &mut b, f, ov)?;
    let (logits, probs) = head_nodes(&mut g, &mut b, encoded)?;
    let fg = ForwardGraph {
        graph: g,
        features: f,
        encoded,
        logits,
        probs,
        scores,
    };
    Ok((fg.prediction(), fg.attention()))
}

/// Full pipeline: front-end, encoder, mean over time, dense, sigmoid.
pub fn predict_tags(
    model: &Model,
    input: &ModelInput,
    ov: Option<&AttentionOverride>,
) -> Result<(TagPrediction, AttentionTensor), ModelError> {
    let fg = ForwardGraph::build(model, input, ov, false)?;
    Ok((fg.prediction(), fg.attention()))
}

/// Activations entering the last encoder layer, cached so that many
/// overrides of that layer can be evaluated without repeating the
/// front-end and earlier layers.
#[derive(Debug, Clone)]
pub struct LastLayerInput {
    value: Tensor,
}

impl LastLayerInput {
    pub fn compute(model: &Model, input: &ModelInput) -> Result<Self, ModelError> {
        check_input(model, input)?;
        let cfg = model.config();
        let mut g = Graph::new();
        let mut b = Binder::new(model, false);
        let x = g.constant(Tensor::new(vec![1, cfg.n_mels, cfg.frames], input.values().to_vec())?);
        let features = frontend_nodes(&mut g, &mut b, x)?;
        let pe = g.constant(model.positional().clone());
        let mut h = g.add(features, pe)?;
        for layer in 0..cfg.n_layers - 1 {
            h = encoder_layer_nodes(&mut g, &mut b, layer, h, None)?.out;
        }
        Ok(Self {
            value: g.value(h).clone(),
        })
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Runs the last layer with `ov` and the tagging head. Bitwise equal to
    /// the probabilities of [`predict_tags`] with the same override.
    pub fn predict(&self, model: &Model, ov: &AttentionOverride) -> Result<TagPrediction, ModelError> {
        check_override(model, Some(ov))?;
        let mut g = Graph::new();
        let mut b = Binder::new(model, false);
        let x = g.constant(self.value.clone());
        let ovn = g.constant(ov.matrix().clone());
        let last = model.config().n_layers - 1;
        let nodes = encoder_layer_nodes(&mut g, &mut b, last, x, Some(ovn))?;
        let (logits, probs) = head_nodes(&mut g, &mut b, nodes.out)?;
        Ok(TagPrediction {
            probabilities: g.value(probs).data().to_vec(),
            logits: g.value(logits).data().to_vec(),
        })
    }
}
