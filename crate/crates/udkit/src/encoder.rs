//! Transformer encoder exposing all intermediate layer outputs, plus
//! per-task scalar layer attention with layer dropout.
//!
//! The encoder is a standard post-norm self-attention stack (embedding sum
//! with learned positions, multi-head attention, GELU feedforward,
//! residuals with layer normalization). Every layer's output is returned,
//! because the task heads consume a learned softmax-weighted mixture of
//! all layers rather than just the last one. Each task owns one mixture
//! (a weight per layer plus a scale), and during training whole layers are
//! dropped from the mixture by forcing their weight to negative infinity.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    load_checkpoint, save_checkpoint, CheckpointError, Graph, ParamGroup, ParamId, ParamStore,
    Tensor, Var,
};

/// Architecture of the encoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// Dropout on attention probabilities (training mode).
    pub attention_dropout: f64,
    /// Dropout on embeddings, attention output, and feedforward output
    /// (training mode).
    pub hidden_dropout: f64,
}

impl EncoderConfig {
    /// Reference full-scale configuration (12 layers, 12 heads, 768 wide).
    pub fn full_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 12,
            num_heads: 12,
            hidden_dim: 768,
            ff_dim: 3072,
            max_positions: 512,
            vocab_size,
            attention_dropout: 0.2,
            hidden_dropout: 0.2,
        }
    }

    /// Small configuration for CPU-scale experiments and property tests.
    pub fn desk_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 64,
            ff_dim: 256,
            max_positions: 128,
            vocab_size,
            attention_dropout: 0.2,
            hidden_dropout: 0.2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) {
        assert!(
            self.hidden_dim % self.num_heads == 0,
            "hidden_dim {} must be divisible by num_heads {}",
            self.hidden_dim,
            self.num_heads
        );
        assert!(self.num_layers >= 1, "need at least one layer");
    }
}

struct LayerParams {
    query_w: ParamId,
    query_b: ParamId,
    key_w: ParamId,
    key_b: ParamId,
    value_w: ParamId,
    value_b: ParamId,
    output_w: ParamId,
    output_b: ParamId,
    attn_norm_gain: ParamId,
    attn_norm_bias: ParamId,
    ff_expand_w: ParamId,
    ff_expand_b: ParamId,
    ff_contract_w: ParamId,
    ff_contract_b: ParamId,
    ff_norm_gain: ParamId,
    ff_norm_bias: ParamId,
}

/// Parameter handles for one encoder stack.
pub struct EncoderParams {
    word_embeddings: ParamId,
    position_embeddings: ParamId,
    embed_norm_gain: ParamId,
    embed_norm_bias: ParamId,
    layers: Vec<LayerParams>,
}

const INIT_STD: f64 = 0.02;

fn add_gain(store: &mut ParamStore, name: String, len: usize) -> ParamId {
    store.add(
        &name,
        Tensor::from_vec(&[len], vec![1.0; len]),
        ParamGroup::Encoder,
        false,
    )
}

fn add_bias(store: &mut ParamStore, name: String, len: usize) -> ParamId {
    store.add(&name, Tensor::zeros(&[len]), ParamGroup::Encoder, false)
}

/// Register all encoder parameters (group [`ParamGroup::Encoder`]) with
/// Gaussian initialization.
pub fn init_encoder_params(
    store: &mut ParamStore,
    config: &EncoderConfig,
    rng: &mut impl Rng,
) -> EncoderParams {
    config.validate();
    let h = config.hidden_dim;

    let word_embeddings = store.add(
        "encoder.word_embeddings",
        Tensor::randn(&[config.vocab_size, h], INIT_STD, rng),
        ParamGroup::Encoder,
        true,
    );
    let position_embeddings = store.add(
        "encoder.position_embeddings",
        Tensor::randn(&[config.max_positions, h], INIT_STD, rng),
        ParamGroup::Encoder,
        true,
    );
    let embed_norm_gain = add_gain(store, "encoder.embed_norm.gain".into(), h);
    let embed_norm_bias = add_bias(store, "encoder.embed_norm.bias".into(), h);

    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        let name = |suffix: &str| format!("encoder.layer{i}.{suffix}");
        let mut weight = |store: &mut ParamStore, suffix: &str, shape: &[usize]| {
            store.add(
                &name(suffix),
                Tensor::randn(shape, INIT_STD, rng),
                ParamGroup::Encoder,
                true,
            )
        };
        let query_w = weight(store, "attn.query.weight", &[h, h]);
        let key_w = weight(store, "attn.key.weight", &[h, h]);
        let value_w = weight(store, "attn.value.weight", &[h, h]);
        let output_w = weight(store, "attn.output.weight", &[h, h]);
        let ff_expand_w = weight(store, "ff.expand.weight", &[h, config.ff_dim]);
        let ff_contract_w = weight(store, "ff.contract.weight", &[config.ff_dim, h]);
        layers.push(LayerParams {
            query_w,
            key_w,
            value_w,
            output_w,
            ff_expand_w,
            ff_contract_w,
            query_b: add_bias(store, name("attn.query.bias"), h),
            key_b: add_bias(store, name("attn.key.bias"), h),
            value_b: add_bias(store, name("attn.value.bias"), h),
            output_b: add_bias(store, name("attn.output.bias"), h),
            ff_expand_b: add_bias(store, name("ff.expand.bias"), config.ff_dim),
            ff_contract_b: add_bias(store, name("ff.contract.bias"), h),
            attn_norm_gain: add_gain(store, name("attn_norm.gain"), h),
            attn_norm_bias: add_bias(store, name("attn_norm.bias"), h),
            ff_norm_gain: add_gain(store, name("ff_norm.gain"), h),
            ff_norm_bias: add_bias(store, name("ff_norm.bias"), h),
        });
    }

    EncoderParams {
        word_embeddings,
        position_embeddings,
        embed_norm_gain,
        embed_norm_bias,
        layers,
    }
}

/// All per-layer hidden states of one forward pass, embedding layer
/// excluded: `states[i]` is the output of layer `i`, each of shape
/// `(sequence length, hidden_dim)`.
pub struct EncoderOutput {
    pub states: Vec<Var>,
}

/// Run the encoder over a piece-id sequence, returning every layer's
/// output. Dropout fires only when an RNG is supplied (training mode);
/// eval mode is deterministic. The input must already fit `max_positions`
/// (longer sentences are windowed by the caller).
pub fn encode(
    graph: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    config: &EncoderConfig,
    piece_ids: &[u32],
    mut rng: Option<&mut impl Rng>,
) -> EncoderOutput {
    assert!(
        piece_ids.len() <= config.max_positions,
        "input length {} exceeds max positions {}; window it first",
        piece_ids.len(),
        config.max_positions
    );
    let ids: Vec<usize> = piece_ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();

    macro_rules! maybe_dropout {
        ($graph:expr, $x:expr, $prob:expr) => {
            match rng.as_deref_mut() {
                Some(r) => $graph.dropout($x, $prob, r),
                None => $x,
            }
        };
    }

    let word_table = graph.param(store, params.word_embeddings);
    let pos_table = graph.param(store, params.position_embeddings);
    let words = graph.embedding(word_table, &ids);
    let posit = graph.embedding(pos_table, &positions);
    let summed = graph.add(words, posit);
    let gain = graph.param(store, params.embed_norm_gain);
    let bias = graph.param(store, params.embed_norm_bias);
    let mut hidden = graph.layer_norm(summed, gain, bias);
    hidden = maybe_dropout!(graph, hidden, config.hidden_dropout);

    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut states = Vec::with_capacity(config.num_layers);

    for layer in &params.layers {
        let linear = |graph: &mut Graph, x: Var, w: ParamId, b: ParamId| {
            let w = graph.param(store, w);
            let b = graph.param(store, b);
            let xw = graph.matmul(x, w);
            graph.add_row_broadcast(xw, b)
        };

        let q = linear(graph, hidden, layer.query_w, layer.query_b);
        let k = linear(graph, hidden, layer.key_w, layer.key_b);
        let v = linear(graph, hidden, layer.value_w, layer.value_b);

        let mut head_outputs = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let from = head * head_dim;
            let to = from + head_dim;
            let qh = graph.slice_cols(q, from, to);
            let kh = graph.slice_cols(k, from, to);
            let vh = graph.slice_cols(v, from, to);
            let kt = graph.transpose(kh);
            let raw = graph.matmul(qh, kt);
            let scaled = graph.scale(raw, scale);
            let mut attn = graph.softmax_rows(scaled);
            attn = maybe_dropout!(graph, attn, config.attention_dropout);
            head_outputs.push(graph.matmul(attn, vh));
        }
        let merged = graph.concat_cols(&head_outputs);
        let mut attn_out = linear(graph, merged, layer.output_w, layer.output_b);
        attn_out = maybe_dropout!(graph, attn_out, config.hidden_dropout);

        let residual = graph.add(hidden, attn_out);
        let g1 = graph.param(store, layer.attn_norm_gain);
        let b1 = graph.param(store, layer.attn_norm_bias);
        hidden = graph.layer_norm(residual, g1, b1);

        let expanded = linear(graph, hidden, layer.ff_expand_w, layer.ff_expand_b);
        let activated = graph.gelu(expanded);
        let mut ff_out = linear(graph, activated, layer.ff_contract_w, layer.ff_contract_b);
        ff_out = maybe_dropout!(graph, ff_out, config.hidden_dropout);

        let residual = graph.add(hidden, ff_out);
        let g2 = graph.param(store, layer.ff_norm_gain);
        let b2 = graph.param(store, layer.ff_norm_bias);
        hidden = graph.layer_norm(residual, g2, b2);
        states.push(hidden);
    }

    EncoderOutput { states }
}

/// One task's layer-mixture parameters: a trainable weight per layer and
/// a trainable scale.
pub struct LayerAttention {
    pub weights: ParamId,
    pub gamma: ParamId,
}

/// Register one `(gamma, weights)` set; weights start at zero (a uniform
/// mixture) and gamma at one.
pub fn init_layer_attention(
    store: &mut ParamStore,
    task: &str,
    num_layers: usize,
) -> LayerAttention {
    LayerAttention {
        weights: store.add(
            &format!("attention.{task}.weights"),
            Tensor::zeros(&[num_layers]),
            ParamGroup::Task,
            true,
        ),
        gamma: store.add(
            &format!("attention.{task}.gamma"),
            Tensor::scalar(1.0),
            ParamGroup::Task,
            true,
        ),
    }
}

/// Mix all layer outputs into per-position embeddings:
/// `gamma * sum_i states[i] * softmax(weights)_i`, where dropped layers
/// are removed from the softmax and contribute exactly zero. `dropped`
/// must leave at least one layer alive.
pub fn layer_attention_forward(
    graph: &mut Graph,
    store: &ParamStore,
    attention: &LayerAttention,
    states: &[Var],
    dropped: &[bool],
) -> Var {
    let alive: Vec<bool> = dropped.iter().map(|&d| !d).collect();
    let w = graph.param(store, attention.weights);
    let gamma = graph.param(store, attention.gamma);
    graph.scalar_mix(states, w, gamma, &alive)
}

/// Sample a layer-dropout mask: each of the `num_layers` entries is true
/// (dropped) independently with probability `prob`, resampling in the
/// rare case that every layer would be dropped.
pub fn sample_layer_dropout(num_layers: usize, prob: f64, rng: &mut impl Rng) -> Vec<bool> {
    assert!((0.0..1.0).contains(&prob), "layer dropout {prob} not in [0, 1)");
    loop {
        let mask: Vec<bool> = (0..num_layers).map(|_| rng.gen::<f64>() < prob).collect();
        if mask.iter().any(|&dropped| !dropped) {
            return mask;
        }
    }
}

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint is missing array {name:?} of shape {expected:?}")]
    Missing { name: String, expected: Vec<usize> },
    #[error("array {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint array {name:?} does not exist in this model")]
    Unknown { name: String },
}

/// Save every parameter of the store, in registration order.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let arrays: Vec<(&str, &Tensor)> = store
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .collect();
    save_checkpoint(path, arrays.into_iter())
}

/// Load values for every parameter of the store from a checkpoint that
/// contains exactly those arrays.
pub fn load_params(store: &mut ParamStore, path: &Path) -> Result<(), WeightsError> {
    load_filtered(store, path, None)
}

/// Load only the encoder parameters (arrays named `encoder.*`) from a
/// checkpoint; other arrays in the file are ignored, so a full-model
/// checkpoint can seed a new model's encoder.
pub fn load_pretrained_encoder(store: &mut ParamStore, path: &Path) -> Result<(), WeightsError> {
    load_filtered(store, path, Some("encoder."))
}

fn load_filtered(
    store: &mut ParamStore,
    path: &Path,
    prefix: Option<&str>,
) -> Result<(), WeightsError> {
    let arrays = load_checkpoint(path)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = arrays.into_iter().collect();

    let wanted: Vec<(ParamId, String, Vec<usize>)> = store
        .iter()
        .filter(|(_, p)| prefix.map_or(true, |pre| p.name.starts_with(pre)))
        .map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()))
        .collect();

    for (id, name, expected) in &wanted {
        let tensor = by_name.remove(name).ok_or_else(|| WeightsError::Missing {
            name: name.clone(),
            expected: expected.clone(),
        })?;
        if tensor.shape() != expected.as_slice() {
            return Err(WeightsError::ShapeMismatch {
                name: name.clone(),
                expected: expected.clone(),
                found: tensor.shape().to_vec(),
            });
        }
        store.get_mut(*id).value = tensor;
    }

    // Arrays within the filtered namespace that the model does not know
    // indicate a config mismatch.
    if let Some(name) = by_name
        .keys()
        .filter(|n| prefix.map_or(true, |pre| n.starts_with(pre)))
        .min()
    {
        return Err(WeightsError::Unknown { name: name.clone() });
    }
    Ok(())
}
