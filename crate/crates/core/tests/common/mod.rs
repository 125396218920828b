//! Shared test helpers: toy configurations, randomized parameters and a
//! loop-based reference forward pass that shares no code with the tape.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satformer::model::{AttentionMode, ModelConfig, Params};
use satformer::numerics::gradcheck::{max_relative_error, numeric_gradient, DEFAULT_FLOOR};
use satformer::{Tape, Tensor, Var};

pub fn toy_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        frames: 2,
        channels: 3,
        height: 16,
        width: 16,
        patch: 4,
        dim: 32,
        heads: 2,
        depth: 2,
        n_bins: 8,
        attention: mode,
        ..ModelConfig::full_size()
    }
}

/// A smaller shape for loops that run many forwards.
pub fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        frames: 3,
        channels: 2,
        height: 4,
        width: 4,
        patch: 2,
        dim: 8,
        heads: 2,
        depth: 2,
        n_bins: 5,
        attention: mode,
        ..ModelConfig::full_size()
    }
}

/// Every entry drawn uniformly from `±scale`, layer norm gains around 1.
pub fn random_params(config: &ModelConfig, seed: u64, scale: f64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::init(config, &mut rng).unwrap();
    p.overwrite(|name, _| {
        let u = rng.random_range(-scale..scale);
        if name.ends_with("ln_gain") {
            1.0 + u
        } else {
            u
        }
    });
    p
}

pub fn random_input(config: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let shape = config.input_shape();
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn softmax_over(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(&s, &a)| if a { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Which key tokens each query may see in a factorized sub-step.
#[derive(Clone, Copy, PartialEq)]
pub enum Restriction {
    None,
    SameFrame,
    SamePatch,
}

pub fn allowed(config: &ModelConfig, i: usize, j: usize, r: Restriction) -> bool {
    if i == 0 || j == 0 {
        return true;
    }
    let n = config.patches_per_frame();
    let (fi, pi) = ((i - 1) / n, (i - 1) % n);
    let (fj, pj) = ((j - 1) / n, (j - 1) % n);
    match r {
        Restriction::None => true,
        Restriction::SameFrame => fi == fj,
        Restriction::SamePatch => pi == pj,
    }
}

pub struct OracleAttention {
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_out: Mat,
}

/// Multi-head attention sub-step: returns `(weights[h][i][j], projected)`.
pub fn oracle_attention(config: &ModelConfig, x: &Mat, p: &OracleAttention, r: Restriction) -> (Vec<Mat>, Mat) {
    let z = layer_norm(x, &p.ln_gain, &p.ln_bias, config.ln_eps);
    let (q, k, v) = (matmul(&z, &p.w_q), matmul(&z, &p.w_k), matmul(&z, &p.w_v));
    let s = x.len();
    let hd = config.dim / config.heads;
    let scale = config.score_scale_factor();
    let mut weights = Vec::new();
    let mut concat = vec![vec![0.0; config.dim]; s];
    for h in 0..config.heads {
        let mut a = vec![vec![0.0; s]; s];
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() * scale)
                .collect();
            let mask: Vec<bool> = (0..s).map(|j| allowed(config, i, j, r)).collect();
            a[i] = softmax_over(&scores, &mask);
            for c in 0..hd {
                concat[i][h * hd + c] = (0..s).map(|j| a[i][j] * v[j][h * hd + c]).sum();
            }
        }
        weights.push(a);
    }
    (weights, matmul(&concat, &p.w_out))
}

fn attention_of(params: &Params, block: usize, sub: usize) -> OracleAttention {
    let a = &params.blocks[block].attention[sub];
    OracleAttention {
        ln_gain: a.ln_gain.data().to_vec(),
        ln_bias: a.ln_bias.data().to_vec(),
        w_q: mat(&a.w_q),
        w_k: mat(&a.w_k),
        w_v: mat(&a.w_v),
        w_out: mat(&a.w_out),
    }
}

/// Tokens after patch projection, class token and positional embedding.
pub fn oracle_tokens(config: &ModelConfig, params: &Params, x: &Tensor) -> Mat {
    let (c_len, h, w, p) = (config.channels, config.height, config.width, config.patch);
    let xd = x.data();
    let proj = mat(&params.patch_projection);
    let pos = mat(&params.pos_embed);
    let mut tokens = vec![params.cls_token.data().to_vec()];
    for t in 0..config.frames {
        for py in 0..h / p {
            for px in 0..w / p {
                let mut flat = Vec::new();
                for c in 0..c_len {
                    for i in 0..p {
                        for j in 0..p {
                            flat.push(xd[((t * c_len + c) * h + py * p + i) * w + px * p + j]);
                        }
                    }
                }
                tokens.push(matmul(&vec![flat], &proj).remove(0));
            }
        }
    }
    add(&tokens, &pos)
}

pub fn oracle_block(config: &ModelConfig, params: &Params, l: usize, x: &Mat) -> Mat {
    let steps: &[Restriction] = match config.attention {
        AttentionMode::FullSpaceTime => &[Restriction::None],
        AttentionMode::SpaceThenTime => &[Restriction::SameFrame, Restriction::SamePatch],
        AttentionMode::TimeThenSpace => &[Restriction::SamePatch, Restriction::SameFrame],
    };
    let mut z = x.clone();
    for (sub, &r) in steps.iter().enumerate() {
        let (_, out) = oracle_attention(config, &z, &attention_of(params, l, sub), r);
        z = add(&z, &out);
    }
    let b = &params.blocks[l];
    let n = layer_norm(&z, b.mlp_ln_gain.data(), b.mlp_ln_bias.data(), config.ln_eps);
    let mut hidden = matmul(&n, &mat(&b.mlp_w1));
    for row in &mut hidden {
        for (v, bias) in row.iter_mut().zip(b.mlp_b1.data()) {
            *v = gelu(*v + bias);
        }
    }
    let mut out = matmul(&hidden, &mat(&b.mlp_w2));
    for row in &mut out {
        for (v, bias) in row.iter_mut().zip(b.mlp_b2.data()) {
            *v += bias;
        }
    }
    add(&z, &out)
}

/// Class probabilities.
pub fn oracle_forward(config: &ModelConfig, params: &Params, x: &Tensor) -> Vec<f64> {
    let mut z = oracle_tokens(config, params, x);
    for l in 0..config.depth {
        z = oracle_block(config, params, l, &z);
    }
    let logits: Vec<f64> = matmul(&vec![z[0].clone()], &mat(&params.head_w))
        .remove(0)
        .iter()
        .zip(params.head_b.data())
        .map(|(a, b)| a + b)
        .collect();
    softmax_over(&logits, &vec![true; logits.len()])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Loss used for end-to-end gradient checks: class-weighted cross-entropy
/// of the forward pass against a fixed label.
pub fn model_loss(config: &ModelConfig, params: &Params, x: &Tensor, label: usize) -> f64 {
    let weights = satformer::ClassWeights {
        weights: (0..config.n_bins).map(|i| 0.5 + i as f64 / config.n_bins as f64).collect(),
        histogram: vec![1; config.n_bins],
        total: config.n_bins,
    };
    let tape = satformer::Tape::unchecked();
    let vars = params.register_frozen(&tape);
    let probs = satformer::model::forward(tape.leaf(x), &vars, config).unwrap();
    satformer::metrics::weighted_cce(probs, &[label], &weights).unwrap().item().unwrap()
}

/// Worst relative error between tape and central-difference gradients over
/// `per_tensor` random coordinates of every parameter tensor and of the input.
pub fn model_gradient_error(config: &ModelConfig, seed: u64, per_tensor: usize) -> f64 {
    use satformer::numerics::gradcheck::{relative_error, DEFAULT_FLOOR};
    let params = random_params(config, seed, 0.3);
    let x = random_input(config, seed);
    let label = seed as usize % config.n_bins;
    let weights = satformer::ClassWeights {
        weights: (0..config.n_bins).map(|i| 0.5 + i as f64 / config.n_bins as f64).collect(),
        histogram: vec![1; config.n_bins],
        total: config.n_bins,
    };
    let tape = satformer::Tape::new();
    let vars = params.register(&tape);
    let input = tape.leaf(&x.clone().trained());
    let probs = satformer::model::forward(input, &vars, config).unwrap();
    let loss = satformer::metrics::weighted_cce(probs, &[label], &weights).unwrap();
    tape.backward(loss).unwrap();
    let grads = Params::collect_grads(&vars);
    let input_grad = tape.grad(input).unwrap().into_data();

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6EAD);
    let mut worst: f64 = 0.0;
    for (slot, g) in grads.iter().enumerate() {
        for _ in 0..per_tensor.min(g.len()) {
            let i = rng.random_range(0..g.len());
            let at = |delta: f64| {
                let mut p = params.clone();
                p.slots_mut()[slot].data_mut()[i] += delta;
                model_loss(config, &p, &x, label)
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            worst = worst.max(relative_error(g[i], numeric, DEFAULT_FLOOR));
        }
    }
    for _ in 0..per_tensor {
        let i = rng.random_range(0..x.numel());
        let at = |delta: f64| {
            let mut xx = x.clone();
            xx.data_mut()[i] += delta;
            model_loss(config, &params, &xx, label)
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max(relative_error(input_grad[i], numeric, DEFAULT_FLOOR));
    }
    worst
}

pub const H: f64 = 1e-5;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Checks d(Σ c·op(inputs))/d(inputs) from the tape against central
/// differences. `op` receives one var per input.
pub fn check_op(
    shapes: &[Vec<usize>],
    seed: u64,
    tol: f64,
    op: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| random_vec(&mut rng, s.iter().product()))
        .collect();

    let eval = |vals: &[Vec<f64>], coeffs: Option<&[f64]>| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
        let tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(shapes)
            .map(|(v, s)| tape.leaf(&Tensor::new(s, v.clone()).unwrap().trained()))
            .collect();
        let out = op(&vars);
        let n = out.value().numel();
        let c: Vec<f64> = match coeffs {
            Some(c) => c.to_vec(),
            None => (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect(),
        };
        let loss = out.mul_const(&c).unwrap().sum();
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|v| tape.grad(*v).unwrap().into_data()).collect();
        (loss.item().unwrap(), grads, c)
    };

    let (_, analytic, coeffs) = eval(&inputs, None);
    let mut worst: f64 = 0.0;
    for (which, grad) in analytic.iter().enumerate() {
        let numeric = numeric_gradient(
            |x| {
                let mut vals = inputs.clone();
                vals[which] = x.to_vec();
                eval(&vals, Some(&coeffs)).0
            },
            &inputs[which],
            H,
        );
        worst = worst.max(max_relative_error(grad, &numeric, DEFAULT_FLOOR));
    }
    assert!(worst <= tol, "seed {seed}: relative error {worst:e} > {tol:e}");
    worst
}


/// Worst relative gradient error of every differentiable op on random
/// shapes drawn from `seed`.
pub fn every_op_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let m = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let n = rng.random_range(2..6);
    let tol = f64::INFINITY;
    let coeffs: Vec<f64> = (0..m * n).map(|i| 0.5 + i as f64 * 0.25).collect();
    [
        check_op(&[vec![m, k], vec![k, n]], seed, tol, |v| v[0].matmul(v[1]).unwrap()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].transpose().unwrap()),
        check_op(&[vec![m, n], vec![m, n]], seed, tol, |v| v[0].add(v[1]).unwrap()),
        check_op(&[vec![m, n], vec![n]], seed, tol, |v| v[0].add_row(v[1]).unwrap()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].scale(-1.7)),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].mul_const(&coeffs).unwrap()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].sum()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].mean()),
        check_op(&[vec![m, n], vec![n], vec![n]], seed, tol, |v| v[0].layer_norm(v[1], v[2], 1e-5).unwrap()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].softmax()),
        check_op(&[vec![m, n]], seed, tol, |v| {
            let mask: Vec<bool> = (0..m * n).map(|i| i % n == 0 || i % 3 != 1).collect();
            v[0].masked_softmax(&mask).unwrap()
        }),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].gelu()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].softmax().log_floor(1e-12)),
        check_op(&[vec![m, n]], seed, tol, |v| {
            let idx: Vec<usize> = (0..m * n).rev().step_by(2).collect();
            let len = idx.len();
            v[0].gather(idx.into(), &[len]).unwrap()
        }),
        check_op(&[vec![m + 1, n]], seed, tol, |v| v[0].rows(1, m).unwrap()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].slice_cols(1, n - 1).unwrap()),
        check_op(&[vec![m, n], vec![m, k]], seed, tol, |v| Var::concat_cols(&[v[0], v[1]]).unwrap()),
        check_op(&[vec![m, n], vec![k, n]], seed, tol, |v| Var::concat_rows(&[v[0], v[1]]).unwrap()),
        check_op(&[vec![m, n]], seed, tol, |v| v[0].reshape(&[n, m]).unwrap()),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
