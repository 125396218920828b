use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Weights of one attention sub-step: pre-norm, QKV projections and the
/// output projection. None of the projections carry a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub ln_gain: T,
    pub ln_bias: T,
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_out: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = Tensor> {
    /// One entry for full attention, two for the factorized modes (in
    /// execution order).
    pub attention: Vec<AttentionParams<T>>,
    pub mlp_ln_gain: T,
    pub mlp_ln_bias: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
}

/// All trainable weights. Generic so the same layout can hold tape handles
/// ([`ParamVars`]) or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T = Tensor> {
    pub patch_projection: T,
    pub cls_token: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: T,
    pub head_b: T,
}

/// Parameters registered on a tape.
pub type ParamVars<'t> = Params<Var<'t>>;

impl<T> AttentionParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AttentionParams<U> {
        AttentionParams {
            ln_gain: f(&format!("{prefix}.ln_gain"), &self.ln_gain),
            ln_bias: f(&format!("{prefix}.ln_bias"), &self.ln_bias),
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            w_out: f(&format!("{prefix}.w_out"), &self.w_out),
        }
    }

    fn slots_mut(&mut self) -> [&mut T; 6] {
        [
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_out,
        ]
    }
}

impl<T> BlockParams<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BlockParams<U> {
        BlockParams {
            attention: self
                .attention
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(&format!("{prefix}.attn{i}"), f))
                .collect(),
            mlp_ln_gain: f(&format!("{prefix}.mlp.ln_gain"), &self.mlp_ln_gain),
            mlp_ln_bias: f(&format!("{prefix}.mlp.ln_bias"), &self.mlp_ln_bias),
            mlp_w1: f(&format!("{prefix}.mlp.w1"), &self.mlp_w1),
            mlp_b1: f(&format!("{prefix}.mlp.b1"), &self.mlp_b1),
            mlp_w2: f(&format!("{prefix}.mlp.w2"), &self.mlp_w2),
            mlp_b2: f(&format!("{prefix}.mlp.b2"), &self.mlp_b2),
        }
    }
}

impl<T> Params<T> {
    /// Applies `f` to every slot in canonical order, passing its name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        Params {
            patch_projection: f("patch_projection", &self.patch_projection),
            cls_token: f("cls_token", &self.cls_token),
            pos_embed: f("pos_embed", &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| b.map(&format!("blocks.{l}"), &mut f))
                .collect(),
            head_w: f("head.weight", &self.head_w),
            head_b: f("head.bias", &self.head_b),
        }
    }

    /// Every slot in canonical order.
    pub fn slots(&self) -> Vec<&T> {
        let mut out = vec![&self.patch_projection, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            for a in &b.attention {
                out.extend([&a.ln_gain, &a.ln_bias, &a.w_q, &a.w_k, &a.w_v, &a.w_out]);
            }
            out.extend([&b.mlp_ln_gain, &b.mlp_ln_bias, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    /// Every slot in canonical order, mutably.
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.patch_projection, &mut self.cls_token, &mut self.pos_embed];
        for b in &mut self.blocks {
            for a in &mut b.attention {
                out.extend(a.slots_mut());
            }
            out.extend([
                &mut b.mlp_ln_gain,
                &mut b.mlp_ln_bias,
                &mut b.mlp_w1,
                &mut b.mlp_b1,
                &mut b.mlp_w2,
                &mut b.mlp_b2,
            ]);
        }
        out.extend([&mut self.head_w, &mut self.head_b]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        names
    }
}

fn truncated_normal(rng: &mut impl Rng, numel: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; numel];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(v);
        }
    }
    data
}

fn normal(rng: &mut impl Rng, numel: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; numel];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..numel).map(|_| dist.sample(rng)).collect()
}

impl Params<Vec<usize>> {
    /// Tensor shapes implied by a config.
    pub fn layout(config: &ModelConfig) -> Self {
        let d = config.dim;
        let hidden = config.mlp_hidden();
        Params {
            patch_projection: vec![config.patch_len(), d],
            cls_token: vec![d],
            pos_embed: vec![config.seq_len(), d],
            blocks: (0..config.depth)
                .map(|_| BlockParams {
                    attention: (0..config.attention.sub_steps())
                        .map(|_| AttentionParams {
                            ln_gain: vec![d],
                            ln_bias: vec![d],
                            w_q: vec![d, d],
                            w_k: vec![d, d],
                            w_v: vec![d, d],
                            w_out: vec![d, d],
                        })
                        .collect(),
                    mlp_ln_gain: vec![d],
                    mlp_ln_bias: vec![d],
                    mlp_w1: vec![d, hidden],
                    mlp_b1: vec![hidden],
                    mlp_w2: vec![hidden, d],
                    mlp_b2: vec![d],
                })
                .collect(),
            head_w: vec![d, config.n_bins],
            head_b: vec![config.n_bins],
        }
    }
}

impl Params {
    /// Weights from a truncated normal (±2σ, σ = `init_std`); biases, layer
    /// norm shifts and the class token at zero; layer norm gains at one;
    /// positional embeddings from a plain normal with the same σ.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        Ok(Params::layout(config).map(|name, shape| {
            let numel = shape.iter().product();
            let data = if name.ends_with("ln_gain") {
                vec![1.0; numel]
            } else if name == "pos_embed" {
                normal(rng, numel, std)
            } else if shape.len() == 2 {
                truncated_normal(rng, numel, std)
            } else {
                vec![0.0; numel]
            };
            Tensor::new(shape, data).expect("layout shapes are positive").trained()
        }))
    }

    /// Scalar count over every tensor.
    pub fn count(&self) -> usize {
        self.slots().iter().map(|t| t.numel()).sum()
    }

    /// Registers every tensor on the tape as a trainable leaf.
    pub fn register<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.map(|_, t| tape.leaf(t))
    }

    /// Registers every tensor as a constant (inference only).
    pub fn register_frozen<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        self.map(|_, t| {
            let mut c = t.clone();
            c.requires_grad = false;
            c.grad = None;
            tape.leaf(&c)
        })
    }

    /// Gradients for every slot after a backward pass, in canonical order.
    pub fn collect_grads(vars: &ParamVars<'_>) -> Vec<Vec<f64>> {
        vars.slots()
            .into_iter()
            .map(|v| {
                v.tape()
                    .grad(*v)
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; v.value().numel()])
            })
            .collect()
    }

    /// Zeroes the params then sets every entry of every tensor to `f(name, i)`.
    pub fn overwrite(&mut self, mut f: impl FnMut(&str, usize) -> f64) {
        let names = self.names();
        for (name, t) in names.iter().zip(self.slots_mut()) {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = f(name, i);
            }
        }
    }

    /// Checks that every tensor matches the layout `config` implies.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = Params::layout(config);
        if self.blocks.len() != layout.blocks.len()
            || self.blocks.iter().zip(&layout.blocks).any(|(a, b)| a.attention.len() != b.attention.len())
        {
            return Err(Error::Config("parameter block layout does not match config".into()));
        }
        for (have, want) in self.slots().into_iter().zip(layout.slots()) {
            if have.shape() != want.as_slice() {
                return Err(Error::dim("params", have.shape(), want));
            }
        }
        Ok(())
    }
}
