//! Multi-head self-attention over the token sequence, in the full
//! space-time form and the two factorized (spatial/temporal) orders.
//!
//! Token 0 is the class token; token `1 + t·N + p` is patch `p` of frame `t`.

use super::config::{AttentionMode, ModelConfig};
use super::params::{AttentionParams, BlockParams};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Intermediate values of one attention sub-step, kept for inspection.
pub struct AttentionOutput<'t> {
    /// `[S×d]` query, key and value projections of the normalized tokens.
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    /// One `[S×S]` weight matrix per head; row `i` is the distribution of
    /// token `i` over keys.
    pub weights: Vec<Var<'t>>,
    /// `[S×d]` head outputs concatenated, before the output projection.
    pub values: Var<'t>,
    /// `values · W_out`, ready for the residual add.
    pub projected: Var<'t>,
}

/// Materialized attention tensors, split per head.
#[derive(Clone, Debug)]
pub struct AttentionWorkspace {
    /// `[heads×S×head_dim]`
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `[heads×S×S]`
    pub a: Tensor,
    /// `[S×d]`
    pub s: Tensor,
}

impl AttentionOutput<'_> {
    pub fn workspace(&self, config: &ModelConfig) -> AttentionWorkspace {
        let (heads, hd, seq) = (config.heads, config.head_dim(), self.q.shape()[0]);
        let split = |v: &Var<'_>| {
            let flat = v.to_vec();
            let d = heads * hd;
            let mut out = Vec::with_capacity(flat.len());
            for h in 0..heads {
                for r in 0..seq {
                    out.extend_from_slice(&flat[r * d + h * hd..r * d + (h + 1) * hd]);
                }
            }
            Tensor::new(&[heads, seq, hd], out).expect("head split")
        };
        let a = self.weights.iter().flat_map(|w| w.to_vec()).collect();
        AttentionWorkspace {
            q: split(&self.q),
            k: split(&self.k),
            v: split(&self.v),
            a: Tensor::new(&[heads, seq, seq], a).expect("weights"),
            s: self.values.value(),
        }
    }
}

/// `(frame, patch)` of a non-class token index.
fn position(token: usize, patches: usize) -> (usize, usize) {
    ((token - 1) / patches, (token - 1) % patches)
}

fn mask_where(config: &ModelConfig, same: impl Fn((usize, usize), (usize, usize)) -> bool) -> Vec<bool> {
    let seq = config.seq_len();
    let n = config.patches_per_frame();
    let mut mask = vec![false; seq * seq];
    for i in 0..seq {
        for j in 0..seq {
            mask[i * seq + j] = i == 0 || j == 0 || same(position(i, n), position(j, n));
        }
    }
    mask
}

/// Token (t,p) may attend to (t,p′) for any p′, plus the class token. The
/// class token attends to everything.
pub fn spatial_mask(config: &ModelConfig) -> Vec<bool> {
    mask_where(config, |(t, _), (t2, _)| t == t2)
}

/// Token (t,p) may attend to (t′,p) for any t′, plus the class token.
pub fn temporal_mask(config: &ModelConfig) -> Vec<bool> {
    mask_where(config, |(_, p), (_, p2)| p == p2)
}

/// One multi-head attention sub-step over `tokens` (`[S×d]`), optionally
/// restricted by a `[S×S]` mask.
pub fn attend<'t>(
    tokens: Var<'t>,
    p: &AttentionParams<Var<'t>>,
    config: &ModelConfig,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput<'t>> {
    let shape = tokens.shape();
    if shape != [config.seq_len(), config.dim] {
        return Err(Error::dim("attention", &shape, &[config.seq_len(), config.dim]));
    }
    let normed = tokens.layer_norm(p.ln_gain, p.ln_bias, config.ln_eps)?;
    let q = normed.matmul(p.w_q)?;
    let k = normed.matmul(p.w_k)?;
    let v = normed.matmul(p.w_v)?;

    let hd = config.head_dim();
    let scale = config.score_scale_factor();
    let mut weights = Vec::with_capacity(config.heads);
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = q.slice_cols(h * hd, hd)?;
        let kh = k.slice_cols(h * hd, hd)?;
        let vh = v.slice_cols(h * hd, hd)?;
        let scores = qh.matmul(kh.transpose()?)?.scale(scale);
        let a = match mask {
            Some(m) => scores.masked_softmax(m)?,
            None => scores.softmax(),
        };
        heads.push(a.matmul(vh)?);
        weights.push(a);
    }
    let values = Var::concat_cols(&heads)?;
    let projected = values.matmul(p.w_out)?;
    Ok(AttentionOutput {
        q,
        k,
        v,
        weights,
        values,
        projected,
    })
}

/// Joint attention over all `T·N + 1` tokens. Returns `s·W_out`; the caller
/// adds the residual.
pub fn full_space_time_attention<'t>(
    tokens: Var<'t>,
    p: &AttentionParams<Var<'t>>,
    config: &ModelConfig,
) -> Result<Var<'t>> {
    Ok(attend(tokens, p, config, None)?.projected)
}

/// Two masked sub-steps in the order given by `mode`, each with its own
/// weights and residual connection. Returns the token stream after both
/// residual adds.
pub fn factorized_attention<'t>(
    tokens: Var<'t>,
    block: &BlockParams<Var<'t>>,
    config: &ModelConfig,
    mode: AttentionMode,
) -> Result<Var<'t>> {
    let masks = match mode {
        AttentionMode::SpaceThenTime => [spatial_mask(config), temporal_mask(config)],
        AttentionMode::TimeThenSpace => [temporal_mask(config), spatial_mask(config)],
        AttentionMode::FullSpaceTime => {
            return Err(Error::Contract(
                "factorized attention called with the full space-time mode".into(),
            ))
        }
    };
    if block.attention.len() != 2 {
        return Err(Error::Contract(format!(
            "factorized attention needs 2 sub-step weight sets, block has {}",
            block.attention.len()
        )));
    }
    let mut z = tokens;
    for (p, mask) in block.attention.iter().zip(&masks) {
        z = z.add(attend(z, p, config, Some(mask))?.projected)?;
    }
    Ok(z)
}
