//! The space-time video transformer: patch tokenization with a class token
//! and learned positional embeddings, a stack of pre-norm encoder blocks,
//! and a single linear layer plus softmax on the final class token.

mod attention;
mod config;
mod params;

use std::rc::Rc;

pub use attention::{
    attend, factorized_attention, full_space_time_attention, spatial_mask, temporal_mask,
    AttentionOutput, AttentionWorkspace,
};
pub use config::{AttentionMode, ModelConfig, ScoreScale};
pub use params::{AttentionParams, BlockParams, ParamVars, Params};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Flat indices into a `[T×C×H×W]` input that lay out its patches as
/// `[T·N × P·P·C]`. Patches are enumerated frame by frame, row-major within
/// a frame; each patch is flattened channel-major (`c`, then row, then column).
pub fn patch_index(config: &ModelConfig) -> Vec<usize> {
    let (t_len, c_len, h, w, p) = (config.frames, config.channels, config.height, config.width, config.patch);
    let mut idx = Vec::with_capacity(t_len * c_len * h * w);
    for t in 0..t_len {
        for py in 0..h / p {
            for px in 0..w / p {
                for c in 0..c_len {
                    for i in 0..p {
                        for j in 0..p {
                            idx.push(((t * c_len + c) * h + py * p + i) * w + px * p + j);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// `[T×C×H×W]` input to the `[(T·N+1)×d]` token sequence: class token in row
/// 0, projected patch `(t, p)` in row `1 + t·N + p`, positional embedding
/// added to every row.
pub fn tokenize<'t>(x: Var<'t>, params: &ParamVars<'t>, config: &ModelConfig) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape != config.input_shape() {
        return Err(Error::dim("tokenize", &shape, &config.input_shape()));
    }
    let tokens = config.frames * config.patches_per_frame();
    let index: Rc<[usize]> = patch_index(config).into();
    let patches = x.gather(index, &[tokens, config.patch_len()])?;
    let embedded = patches.matmul(params.patch_projection)?;
    let cls = params.cls_token.reshape(&[1, config.dim])?;
    Var::concat_rows(&[cls, embedded])?.add(params.pos_embed)
}

/// One encoder block: attention (full or factorized, per `config`) with
/// residual, then LayerNorm → MLP → residual.
pub fn encoder_block<'t>(tokens: Var<'t>, block: &BlockParams<Var<'t>>, config: &ModelConfig) -> Result<Var<'t>> {
    let mixed = match config.attention {
        AttentionMode::FullSpaceTime => {
            let p = block
                .attention
                .first()
                .ok_or_else(|| Error::Contract("block has no attention weights".into()))?;
            tokens.add(full_space_time_attention(tokens, p, config)?)?
        }
        mode => factorized_attention(tokens, block, config, mode)?,
    };
    let hidden = mixed
        .layer_norm(block.mlp_ln_gain, block.mlp_ln_bias, config.ln_eps)?
        .matmul(block.mlp_w1)?
        .add_row(block.mlp_b1)?
        .gelu();
    let out = hidden.matmul(block.mlp_w2)?.add_row(block.mlp_b2)?;
    mixed.add(out)
}

/// Unnormalized class scores `[n_bins]`.
pub fn forward_logits<'t>(x: Var<'t>, params: &ParamVars<'t>, config: &ModelConfig) -> Result<Var<'t>> {
    let mut z = tokenize(x, params, config)?;
    for block in &params.blocks {
        z = encoder_block(z, block, config)?;
    }
    let cls = z.rows(0, 1)?;
    cls.matmul(params.head_w)?
        .add_row(params.head_b)?
        .reshape(&[config.n_bins])
}

/// Class probabilities `[n_bins]`.
pub fn forward<'t>(x: Var<'t>, params: &ParamVars<'t>, config: &ModelConfig) -> Result<Var<'t>> {
    let probs = forward_logits(x, params, config)?.softmax();
    let values = probs.to_vec();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite probability for class {i}")));
    }
    Ok(probs)
}

/// Inference without gradient tracking.
pub fn predict(params: &Params, config: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::unchecked();
    let vars = params.register_frozen(&tape);
    let input = tape.leaf(x);
    Ok(forward(input, &vars, config)?.value())
}
