//! Transformer-encoder / Bi-LSTM fusion network.
//!
//! A block of `[block_size × 3]` samples is cut into patches, each patch is
//! linearly embedded and summed with a trainable positional row, passed
//! through a stack of self-attention encoder layers, then two bidirectional
//! LSTM layers, and finally a dense sigmoid head with one output per event
//! class and patch.

mod checkpoint;
mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::{SeededRng, Tensor, TensorError};

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{
    bilstm_layer, embed_patches, encoder_layer, forward, forward_on_tape, lstm_direction, multi_head_attention,
    params_on_tape, AttentionOutput,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("input does not match config: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Samples per input block.
    pub block_size: usize,
    /// Samples per patch.
    pub patch_size: usize,
    /// Embedding width.
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    /// Inner width of the encoder feed-forward network.
    pub ffn_dim: usize,
    /// Per-direction LSTM hidden width.
    pub lstm_hidden: usize,
    pub first_dropout: f64,
    pub encoder_dropout: f64,
    pub mha_dropout: f64,
    /// Layer-normalize before each residual branch instead of after.
    pub pre_norm: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            block_size: 864,
            patch_size: 18,
            model_dim: 320,
            num_heads: 4,
            num_encoder_layers: 2,
            ffn_dim: 640,
            lstm_hidden: 160,
            first_dropout: 0.1,
            encoder_dropout: 0.1,
            mha_dropout: 0.1,
            pre_norm: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for whole-model gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            block_size: 8,
            patch_size: 4,
            model_dim: 8,
            num_heads: 2,
            num_encoder_layers: 1,
            ffn_dim: 16,
            lstm_hidden: 4,
            first_dropout: 0.0,
            encoder_dropout: 0.0,
            mha_dropout: 0.0,
            pre_norm: false,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.block_size / self.patch_size
    }

    /// Flattened width of one patch (3 channels × patch_size samples).
    pub fn patch_width(&self) -> usize {
        3 * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("block_size", self.block_size),
            ("patch_size", self.patch_size),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("num_encoder_layers", self.num_encoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("lstm_hidden", self.lstm_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::ConfigInvalid(format!("{name} must be at least 1")));
        }
        if self.block_size % self.patch_size != 0 {
            return Err(ModelError::ConfigInvalid(format!(
                "block_size {} is not divisible by patch_size {}",
                self.block_size, self.patch_size
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ModelError::ConfigInvalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        for (name, rate) in [
            ("first_dropout", self.first_dropout),
            ("encoder_dropout", self.encoder_dropout),
            ("mha_dropout", self.mha_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::ConfigInvalid(format!("{name} {rate} outside [0, 1)")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ModelError::ConfigInvalid("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub q_weight: T,
    pub q_bias: T,
    pub k_weight: T,
    pub k_bias: T,
    pub v_weight: T,
    pub v_bias: T,
    pub out_weight: T,
    pub out_bias: T,
    pub norm1_gamma: T,
    pub norm1_beta: T,
    pub ffn1_weight: T,
    pub ffn1_bias: T,
    pub ffn2_weight: T,
    pub ffn2_bias: T,
    pub norm2_gamma: T,
    pub norm2_beta: T,
}

/// One LSTM direction. Gate blocks along the `4H` axis are ordered i, f, g, o.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub input_weight: T,
    pub recurrent_weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams<T> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
}

/// Every learnable tensor of the network. `T` is [`Tensor`] for stored
/// weights, a tape handle during a forward pass, or a shape during layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embed_weight: T,
    pub embed_bias: T,
    pub pos_encoding: T,
    pub encoders: Vec<EncoderParams<T>>,
    pub lstm: Vec<BiLstmParams<T>>,
    pub head_weight: T,
    pub head_bias: T,
}

impl<T> EncoderParams<T> {
    fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> EncoderParams<U> {
        let mut g = |name: &str, t: &'a T| f(&format!("{prefix}.{name}"), t);
        EncoderParams {
            q_weight: g("attn.q.weight", &self.q_weight),
            q_bias: g("attn.q.bias", &self.q_bias),
            k_weight: g("attn.k.weight", &self.k_weight),
            k_bias: g("attn.k.bias", &self.k_bias),
            v_weight: g("attn.v.weight", &self.v_weight),
            v_bias: g("attn.v.bias", &self.v_bias),
            out_weight: g("attn.out.weight", &self.out_weight),
            out_bias: g("attn.out.bias", &self.out_bias),
            norm1_gamma: g("norm1.gamma", &self.norm1_gamma),
            norm1_beta: g("norm1.beta", &self.norm1_beta),
            ffn1_weight: g("ffn.0.weight", &self.ffn1_weight),
            ffn1_bias: g("ffn.0.bias", &self.ffn1_bias),
            ffn2_weight: g("ffn.1.weight", &self.ffn2_weight),
            ffn2_bias: g("ffn.1.bias", &self.ffn2_bias),
            norm2_gamma: g("norm2.gamma", &self.norm2_gamma),
            norm2_beta: g("norm2.beta", &self.norm2_beta),
        }
    }
}

impl<T> LstmParams<T> {
    fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LstmParams<U> {
        LstmParams {
            input_weight: f(&format!("{prefix}.input_weight"), &self.input_weight),
            recurrent_weight: f(&format!("{prefix}.recurrent_weight"), &self.recurrent_weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<T> ModelParams<T> {
    /// Applies `f` to every tensor in canonical order, passing its stable
    /// name. Names: `embed.weight`, `embed.bias`, `pos_encoding`,
    /// `encoder.{i}.attn.{q,k,v,out}.{weight,bias}`,
    /// `encoder.{i}.norm{1,2}.{gamma,beta}`, `encoder.{i}.ffn.{0,1}.{weight,bias}`,
    /// `lstm.{l}.{forward,backward}.{input_weight,recurrent_weight,bias}`,
    /// `head.weight`, `head.bias`.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> ModelParams<U> {
        let f = &mut f;
        ModelParams {
            embed_weight: f("embed.weight", &self.embed_weight),
            embed_bias: f("embed.bias", &self.embed_bias),
            pos_encoding: f("pos_encoding", &self.pos_encoding),
            encoders: self
                .encoders
                .iter()
                .enumerate()
                .map(|(i, e)| e.map(&format!("encoder.{i}"), f))
                .collect(),
            lstm: self
                .lstm
                .iter()
                .enumerate()
                .map(|(l, p)| BiLstmParams {
                    forward: p.forward.map(&format!("lstm.{l}.forward"), f),
                    backward: p.backward.map(&format!("lstm.{l}.backward"), f),
                })
                .collect(),
            head_weight: f("head.weight", &self.head_weight),
            head_bias: f("head.bias", &self.head_bias),
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn len(&self) -> usize {
        self.named().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Rebuilds a parameter set with the structure of `self` from values in
    /// canonical order.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Option<ModelParams<U>> {
        if values.len() != self.len() {
            return None;
        }
        let mut it = values.into_iter();
        Some(self.map(|_, _| it.next().expect("length checked")))
    }
}

impl ModelParams<Tensor> {
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed_weight, &mut self.embed_bias, &mut self.pos_encoding];
        for e in &mut self.encoders {
            out.extend([
                &mut e.q_weight,
                &mut e.q_bias,
                &mut e.k_weight,
                &mut e.k_bias,
                &mut e.v_weight,
                &mut e.v_bias,
                &mut e.out_weight,
                &mut e.out_bias,
                &mut e.norm1_gamma,
                &mut e.norm1_beta,
                &mut e.ffn1_weight,
                &mut e.ffn1_bias,
                &mut e.ffn2_weight,
                &mut e.ffn2_bias,
                &mut e.norm2_gamma,
                &mut e.norm2_beta,
            ]);
        }
        for l in &mut self.lstm {
            for d in [&mut l.forward, &mut l.backward] {
                out.extend([&mut d.input_weight, &mut d.recurrent_weight, &mut d.bias]);
            }
        }
        out.extend([&mut self.head_weight, &mut self.head_bias]);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Tensor shapes implied by a config, in the parameter structure.
pub fn layout(config: &ModelConfig) -> ModelParams<Vec<usize>> {
    let d = config.model_dim;
    let f = config.ffn_dim;
    let h = config.lstm_hidden;
    let encoder = EncoderParams {
        q_weight: vec![d, d],
        q_bias: vec![d],
        k_weight: vec![d, d],
        k_bias: vec![d],
        v_weight: vec![d, d],
        v_bias: vec![d],
        out_weight: vec![d, d],
        out_bias: vec![d],
        norm1_gamma: vec![d],
        norm1_beta: vec![d],
        ffn1_weight: vec![d, f],
        ffn1_bias: vec![f],
        ffn2_weight: vec![f, d],
        ffn2_bias: vec![d],
        norm2_gamma: vec![d],
        norm2_beta: vec![d],
    };
    let direction = |input: usize| LstmParams {
        input_weight: vec![input, 4 * h],
        recurrent_weight: vec![h, 4 * h],
        bias: vec![4 * h],
    };
    let bilstm = |input: usize| BiLstmParams { forward: direction(input), backward: direction(input) };
    ModelParams {
        embed_weight: vec![config.patch_width(), d],
        embed_bias: vec![d],
        pos_encoding: vec![config.num_patches(), d],
        encoders: vec![encoder; config.num_encoder_layers],
        lstm: vec![bilstm(d), bilstm(2 * h)],
        head_weight: vec![2 * h, 3],
        head_bias: vec![3],
    }
}

/// Glorot-uniform bound `√(6/(fan_in+fan_out))` for a 2-D weight.
pub fn glorot_limit(shape: &[usize]) -> f64 {
    (6.0 / (shape[0] + shape[1]) as f64).sqrt()
}

/// Glorot-uniform weights, zero biases and positional encoding, unit
/// layer-norm gains, and LSTM forget-gate bias 1. Tensors are drawn in
/// canonical order from one generator seeded with `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let h = config.lstm_hidden;
    Ok(layout(config).map(|name, shape| {
        if name.ends_with(".gamma") {
            Tensor::ones(shape)
        } else if name.starts_with("lstm.") && name.ends_with(".bias") {
            let mut t = Tensor::zeros(shape);
            t.data_mut()[h..2 * h].fill(1.0);
            t
        } else if shape.len() == 2 && name != "pos_encoding" {
            let limit = glorot_limit(shape);
            let n = shape[0] * shape[1];
            Tensor::new(shape.clone(), (0..n).map(|_| rng.uniform_in(-limit, limit)).collect())
                .expect("layout shape")
        } else {
            Tensor::zeros(shape)
        }
    }))
}

/// Checks that `params` has exactly the shapes `config` implies.
pub fn check_params(params: &ModelParams, config: &ModelConfig) -> Result<(), ModelError> {
    let expected = layout(config);
    if params.encoders.len() != expected.encoders.len() || params.lstm.len() != expected.lstm.len() {
        return Err(ModelError::ConfigMismatch("layer count differs from config".into()));
    }
    for ((name, t), (_, shape)) in params.named().into_iter().zip(expected.named()) {
        if t.shape() != shape.as_slice() {
            return Err(ModelError::ConfigMismatch(format!(
                "{name} has shape {:?}, config implies {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}
