use crate::nncore::{SeededRng, Tape, Tensor, Var};
use crate::preprocess::Block;

use super::{check_params, BiLstmParams, EncoderParams, LstmParams, ModelConfig, ModelError, ModelParams};

/// Flattens each patch (time-major, 3 channels per sample) and projects it
/// to the model width, then adds the positional row of that patch.
pub fn embed_patches(
    tape: &mut Tape,
    features: &[f64],
    params: &ModelParams<Var>,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    if features.len() != config.block_size * 3 {
        return Err(ModelError::ConfigMismatch(format!(
            "block has {} feature values, config expects {}",
            features.len(),
            config.block_size * 3
        )));
    }
    // Row-major [block_size × 3] already lays each patch out contiguously.
    let patches = Tensor::new(vec![config.num_patches(), config.patch_width()], features.to_vec())?;
    let x = tape.constant(patches);
    let projected = tape.matmul(x, params.embed_weight)?;
    let projected = tape.add_bias(projected, params.embed_bias)?;
    Ok(tape.add(projected, params.pos_encoding)?)
}

/// Output of self-attention plus the per-head attention weights `[L × L]`
/// (before attention dropout).
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Bidirectional multi-head self-attention over the rows of `x`.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    p: &EncoderParams<Var>,
    config: &ModelConfig,
    rng: &mut SeededRng,
    train: bool,
) -> Result<AttentionOutput, ModelError> {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let project = |tape: &mut Tape, w: Var, b: Var| -> Result<Var, ModelError> {
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    };
    let q = project(tape, p.q_weight, p.q_bias)?;
    let k = project(tape, p.k_weight, p.k_bias)?;
    let v = project(tape, p.v_weight, p.v_bias)?;

    let mut heads = Vec::with_capacity(config.num_heads);
    let mut weights = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        weights.push(attn);
        let attn = tape.dropout(attn, config.mha_dropout, rng, train)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    let out = tape.matmul(merged, p.out_weight)?;
    let output = tape.add_bias(out, p.out_bias)?;
    Ok(AttentionOutput { output, weights })
}

/// One encoder layer. Post-norm by default:
/// `y = LN(x + drop(MHA(x)))`, `z = LN(y + drop(FFN(y)))` with a relu FFN.
/// With `pre_norm` the branches read `LN(x)` and the residual sum is left
/// unnormalized.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    p: &EncoderParams<Var>,
    config: &ModelConfig,
    rng: &mut SeededRng,
    train: bool,
) -> Result<Var, ModelError> {
    let eps = config.layer_norm_eps;
    let rate = config.encoder_dropout;

    let attn_in = if config.pre_norm { tape.layer_norm(x, p.norm1_gamma, p.norm1_beta, eps)? } else { x };
    let attn = multi_head_attention(tape, attn_in, p, config, rng, train)?.output;
    let attn = tape.dropout(attn, rate, rng, train)?;
    let sum = tape.add(x, attn)?;
    let y = if config.pre_norm { sum } else { tape.layer_norm(sum, p.norm1_gamma, p.norm1_beta, eps)? };

    let ffn_in = if config.pre_norm { tape.layer_norm(y, p.norm2_gamma, p.norm2_beta, eps)? } else { y };
    let hidden = tape.matmul(ffn_in, p.ffn1_weight)?;
    let hidden = tape.add_bias(hidden, p.ffn1_bias)?;
    let hidden = tape.relu(hidden);
    let ffn = tape.matmul(hidden, p.ffn2_weight)?;
    let ffn = tape.add_bias(ffn, p.ffn2_bias)?;
    let ffn = tape.dropout(ffn, rate, rng, train)?;
    let sum = tape.add(y, ffn)?;
    Ok(if config.pre_norm { sum } else { tape.layer_norm(sum, p.norm2_gamma, p.norm2_beta, eps)? })
}

/// Runs one LSTM direction over the rows of `x` (`[L × d_in]`) from a zero
/// state and returns the hidden states `[L × H]` in input row order.
pub fn lstm_direction(tape: &mut Tape, x: Var, p: &LstmParams<Var>, reverse: bool) -> Result<Var, ModelError> {
    let len = tape.value(x).shape()[0];
    let hidden = tape.value(p.recurrent_weight).shape()[0];
    let projected = tape.matmul(x, p.input_weight)?;
    let projected = tape.add_bias(projected, p.bias)?;

    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut outputs: Vec<Option<Var>> = vec![None; len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..len).rev()) } else { Box::new(0..len) };
    for t in order {
        let input = tape.slice(projected, 0, t, 1)?;
        let recurrent = tape.matmul(h, p.recurrent_weight)?;
        let gates = tape.add(input, recurrent)?;
        let i = tape.slice(gates, 1, 0, hidden)?;
        let i = tape.sigmoid(i);
        let f = tape.slice(gates, 1, hidden, hidden)?;
        let f = tape.sigmoid(f);
        let g = tape.slice(gates, 1, 2 * hidden, hidden)?;
        let g = tape.tanh(g);
        let o = tape.slice(gates, 1, 3 * hidden, hidden)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        h = tape.mul(o, squashed)?;
        outputs[t] = Some(h);
    }
    let rows: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step visited")).collect();
    Ok(tape.concat(&rows, 0)?)
}

/// Bidirectional LSTM: row `t` of the output is `[h_t^fwd, h_t^bwd]`.
pub fn bilstm_layer(tape: &mut Tape, x: Var, p: &BiLstmParams<Var>) -> Result<Var, ModelError> {
    let fwd = lstm_direction(tape, x, &p.forward, false)?;
    let bwd = lstm_direction(tape, x, &p.backward, true)?;
    Ok(tape.concat(&[fwd, bwd], 1)?)
}

/// Full network on one block's features (`[block_size × 3]`, row-major),
/// returning sigmoid confidences `[num_patches × 3]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: &[f64],
    params: &ModelParams<Var>,
    config: &ModelConfig,
    rng: &mut SeededRng,
    train: bool,
) -> Result<Var, ModelError> {
    let mut x = embed_patches(tape, features, params, config)?;
    x = tape.dropout(x, config.first_dropout, rng, train)?;
    for layer in &params.encoders {
        x = encoder_layer(tape, x, layer, config, rng, train)?;
    }
    for layer in &params.lstm {
        x = bilstm_layer(tape, x, layer)?;
    }
    let logits = tape.matmul(x, params.head_weight)?;
    let logits = tape.add_bias(logits, params.head_bias)?;
    Ok(tape.sigmoid(logits))
}

/// Registers every parameter on `tape` as a differentiable leaf.
pub fn params_on_tape(tape: &mut Tape, params: &ModelParams) -> ModelParams<Var> {
    params.map(|_, t| tape.param(t.clone()))
}

/// Per-patch confidences for one block on a fresh tape.
pub fn forward(
    block: &Block,
    params: &ModelParams,
    config: &ModelConfig,
    rng: &mut SeededRng,
    train: bool,
) -> Result<Vec<[f64; 3]>, ModelError> {
    if block.block_size() != config.block_size || block.patch_size != config.patch_size {
        return Err(ModelError::ConfigMismatch(format!(
            "block of {} samples with patch {} does not fit config block {} patch {}",
            block.block_size(),
            block.patch_size,
            config.block_size,
            config.patch_size
        )));
    }
    check_params(params, config)?;
    let mut tape = Tape::new();
    let vars = params.map(|_, t| tape.constant(t.clone()));
    let out = forward_on_tape(&mut tape, &block.features, &vars, config, rng, train)?;
    Ok(tape.value(out).data().chunks(3).map(|r| [r[0], r[1], r[2]]).collect())
}
