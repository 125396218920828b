//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to the
//! owning [`Tape`]. [`Tape::backward`] walks the nodes in reverse order and
//! applies each node's vector-Jacobian product. Gradients land only on
//! trainable leaves (tensors registered with `requires_grad`). They
//! accumulate across backward passes until [`Tape::zero_grad`] is called.
//!
//! A tape is single-threaded (`!Sync`). Independent forward passes use
//! independent tapes.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Rc<[f64]>),
    Sum(usize),
    Gather(usize, Rc<[usize]>),
    Reshape(usize),
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Gelu(usize),
    LogFloor(usize, f64),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    /// Gradient flows through this node.
    tracked: bool,
    /// Leaf whose gradient is reported.
    trainable: bool,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    /// A tape that asserts (in debug builds) that every recorded value is finite.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            check_finite: true,
        }
    }

    /// A tape without the debug finiteness assertion, for callers that
    /// report non-finite results as errors themselves.
    pub fn unchecked() -> Self {
        Self {
            check_finite: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. It is trainable iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let trainable = tensor.requires_grad;
        self.push_node(Node {
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
            op: Op::Leaf,
            tracked: trainable,
            trainable,
        })
    }

    /// Records a non-trainable leaf, taking ownership of the data.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        let shape = tensor.shape().to_vec();
        self.push_node(Node {
            shape,
            data: tensor.into_data(),
            op: Op::Leaf,
            tracked: false,
            trainable: false,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        if cfg!(debug_assertions) && self.check_finite {
            assert!(
                node.data.iter().all(|v| v.is_finite()),
                "non-finite value produced by {:?}",
                std::mem::discriminant(&node.op)
            );
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        self.leaf_grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Var<'_> {
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        self.push_node(Node {
            shape,
            data,
            op,
            tracked,
            trainable: false,
        })
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Populates gradients of every trainable leaf reachable from `loss`.
    /// Trainable leaves not reachable get a zero gradient. Gradients add to
    /// whatever earlier backward passes left behind.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let mut send = |to: usize, delta: Vec<f64>| {
                if !nodes[to].tracked {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => kernels::add_assign(acc, &delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if node.trainable {
                        match &mut leaf_grads[id] {
                            Some(acc) => kernels::add_assign(acc, &g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    if nodes[*a].tracked {
                        let mut ga = vec![0.0; m * k];
                        kernels::matmul_nt_acc(&g, &nodes[*b].data, &mut ga, m, k, n);
                        send(*a, ga);
                    }
                    if nodes[*b].tracked {
                        let mut gb = vec![0.0; k * n];
                        kernels::matmul_tn_acc(&nodes[*a].data, &g, &mut gb, m, k, n);
                        send(*b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    send(*a, kernels::transpose(&g, c, r));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, bias) => {
                    let n = nodes[*bias].data.len();
                    if nodes[*bias].tracked {
                        let mut gb = vec![0.0; n];
                        for row in g.chunks_exact(n) {
                            kernels::add_assign(&mut gb, row);
                        }
                        send(*bias, gb);
                    }
                    send(*a, g);
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
                Op::MulConst(a, c) => send(*a, g.iter().zip(c.iter()).map(|(v, c)| v * c).collect()),
                Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].data.len()]),
                Op::Gather(a, idx) => {
                    let mut ga = vec![0.0; nodes[*a].data.len()];
                    for (gv, &i) in g.iter().zip(idx.iter()) {
                        ga[i] += gv;
                    }
                    send(*a, ga);
                }
                Op::Reshape(a) => send(*a, g),
                Op::SliceCols { src, start } => {
                    let (rows, cols) = (nodes[*src].shape[0], nodes[*src].shape[1]);
                    let width = node.shape[1];
                    let mut gs = vec![0.0; rows * cols];
                    for r in 0..rows {
                        gs[r * cols + start..r * cols + start + width]
                            .copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    send(*src, gs);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let width = nodes[p].shape[1];
                        let mut gp = vec![0.0; rows * width];
                        for r in 0..rows {
                            gp[r * width..(r + 1) * width]
                                .copy_from_slice(&g[r * total + col..r * total + col + width]);
                        }
                        col += width;
                        send(p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].data.len();
                        send(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[*gain].data.len();
                    let gamma = &nodes[*gain].data;
                    let mut gx = vec![0.0; g.len()];
                    let mut g_gain = vec![0.0; d];
                    let mut g_bias = vec![0.0; d];
                    for (row, ((gr, xr), gxr)) in g
                        .chunks_exact(d)
                        .zip(xhat.chunks_exact(d))
                        .zip(gx.chunks_exact_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            g_gain[j] += gr[j] * xr[j];
                            g_bias[j] += gr[j];
                            let dxhat = gr[j] * gamma[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xr[j];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        let s = inv_std[row];
                        for j in 0..d {
                            let dxhat = gr[j] * gamma[j];
                            gxr[j] = s * (dxhat - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                    send(*x, gx);
                    send(*gain, g_gain);
                    send(*bias, g_bias);
                }
                Op::Softmax(a) => {
                    let k = *node.shape.last().unwrap();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), gar) in g
                        .chunks_exact(k)
                        .zip(node.data.chunks_exact(k))
                        .zip(ga.chunks_exact_mut(k))
                    {
                        let s = kernels::dot(gr, yr);
                        for j in 0..k {
                            gar[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    send(*a, ga);
                }
                Op::Gelu(a) => {
                    let x = &nodes[*a].data;
                    send(
                        *a,
                        g.iter().zip(x).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect(),
                    );
                }
                Op::LogFloor(a, floor) => {
                    let x = &nodes[*a].data;
                    send(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(gv, &xv)| if xv > *floor { gv / xv } else { 0.0 })
                            .collect(),
                    );
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.trainable && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass has run.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(&self.shape_of(var.id), g.clone()).expect("grad matches shape"))
    }

    pub fn zero_grad(&self) {
        for g in self.leaf_grads.borrow_mut().iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn expect_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Contract(format!("{op} expects a 2-D tensor, got {shape:?}"))),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.data.clone()).expect("recorded shapes are valid")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn with_data<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        f(&n.shape, &n.data)
    }

    fn unary(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var<'t> {
        self.tape.push(shape, data, op, &[self.id])
    }

    /// Matrix product of 2-D tensors.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (out_shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (m, k) = expect_2d("matmul", &a.shape)?;
            let (k2, n) = expect_2d("matmul", &b.shape)?;
            if k != k2 {
                return Err(Error::dim("matmul", &a.shape, &b.shape));
            }
            (vec![m, n], kernels::matmul(&a.data, &b.data, m, k, n))
        };
        Ok(self.tape.push(out_shape, data, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (r, c, data) = self.with_data(|shape, data| {
            let (r, c) = expect_2d("transpose", shape)?;
            Ok::<_, Error>((r, c, kernels::transpose(data, r, c)))
        })?;
        Ok(self.unary(vec![c, r], data, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::dim("add", &a.shape, &b.shape));
            }
            let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
            (a.shape.clone(), data)
        };
        Ok(self.tape.push(shape, data, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a vector to every slice along the last axis.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[bias.id]);
            let n = *a.shape.last().unwrap();
            if b.data.len() != n {
                return Err(Error::dim("add_row", &a.shape, &b.shape));
            }
            let mut data = a.data.clone();
            for row in data.chunks_exact_mut(n) {
                kernels::add_assign(row, &b.data);
            }
            (a.shape.clone(), data)
        };
        Ok(self.tape.push(shape, data, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let (shape, data) = self.with_data(|s, d| (s.to_vec(), d.iter().map(|v| v * c).collect()));
        self.unary(shape, data, Op::Scale(self.id, c))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&self, c: &[f64]) -> Result<Var<'t>> {
        let (shape, data) = self.with_data(|s, d| {
            if d.len() != c.len() {
                return Err(Error::dim("mul_const", s, &[c.len()]));
            }
            Ok((s.to_vec(), d.iter().zip(c).map(|(x, y)| x * y).collect()))
        })?;
        Ok(self.unary(shape, data, Op::MulConst(self.id, c.into())))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.with_data(|_, d| d.iter().sum());
        self.unary(vec![1], vec![total], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.with_data(|_, d| d.len());
        self.sum().scale(1.0 / n as f64)
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let data = self.with_data(|s, d| {
            if shape.iter().product::<usize>() != index.len() {
                return Err(Error::dim("gather", shape, &[index.len()]));
            }
            index
                .iter()
                .map(|&i| {
                    d.get(i)
                        .copied()
                        .ok_or_else(|| Error::Contract(format!("gather index {i} out of range for {s:?}")))
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        Ok(self.unary(shape.to_vec(), data, Op::Gather(self.id, index)))
    }

    /// Rows `[start, start+count)` of a 2-D tensor.
    pub fn rows(&self, start: usize, count: usize) -> Result<Var<'t>> {
        let (r, c) = expect_2d("rows", &self.shape())?;
        if start + count > r || count == 0 {
            return Err(Error::Contract(format!("rows {start}..{} of {r}", start + count)));
        }
        let index: Rc<[usize]> = (start * c..(start + count) * c).collect();
        self.gather(index, &[count, c])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (old, data) = self.with_data(|s, d| (s.to_vec(), d.to_vec()));
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &old, shape));
        }
        Ok(self.unary(shape.to_vec(), data, Op::Reshape(self.id)))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let (rows, data) = self.with_data(|s, d| {
            let (rows, cols) = expect_2d("slice_cols", s)?;
            if width == 0 || start + width > cols {
                return Err(Error::Contract(format!("columns {start}..{} of {cols}", start + width)));
            }
            let data = (0..rows)
                .flat_map(|r| d[r * cols + start..r * cols + start + width].iter().copied())
                .collect::<Vec<_>>();
            Ok((rows, data))
        })?;
        Ok(self.unary(vec![rows, width], data, Op::SliceCols { src: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?.tape;
        let (rows, total, data) = {
            let nodes = tape.nodes.borrow();
            let rows = expect_2d("concat_cols", &nodes[parts[0].id].shape)?.0;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = expect_2d("concat_cols", &nodes[p.id].shape)?;
                if r != rows {
                    return Err(Error::dim("concat_cols", &nodes[parts[0].id].shape, &nodes[p.id].shape));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.id].data[r * w..(r + 1) * w]);
                }
            }
            (rows, total, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(vec![rows, total], data, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?.tape;
        let (rows, cols, data) = {
            let nodes = tape.nodes.borrow();
            let cols = expect_2d("concat_rows", &nodes[parts[0].id].shape)?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let (r, c) = expect_2d("concat_rows", &nodes[p.id].shape)?;
                if c != cols {
                    return Err(Error::dim("concat_rows", &nodes[parts[0].id].shape, &nodes[p.id].shape));
                }
                rows += r;
                data.extend_from_slice(&nodes[p.id].data);
            }
            (rows, cols, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(vec![rows, cols], data, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (shape, out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *x.shape.last().unwrap();
            if g.data.len() != d || b.data.len() != d {
                return Err(Error::dim("layer_norm", &x.shape, &g.shape));
            }
            let mut xhat = vec![0.0; x.data.len()];
            let mut out = vec![0.0; x.data.len()];
            let mut inv_std = Vec::with_capacity(x.data.len() / d);
            for ((xr, hr), or) in x
                .data
                .chunks_exact(d)
                .zip(xhat.chunks_exact_mut(d))
                .zip(out.chunks_exact_mut(d))
            {
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + eps).sqrt();
                inv_std.push(s);
                for j in 0..d {
                    hr[j] = (xr[j] - mean) * s;
                    or[j] = hr[j] * g.data[j] + b.data[j];
                }
            }
            (x.shape.clone(), out, xhat, inv_std)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.push(shape, out, op, &[self.id, gain.id, bias.id]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let (shape, out) = self.with_data(|s, d| {
            let k = *s.last().unwrap();
            let mut out = vec![0.0; d.len()];
            for (xr, or) in d.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
                kernels::softmax_slice(xr, None, or);
            }
            (s.to_vec(), out)
        });
        self.unary(shape, out, Op::Softmax(self.id))
    }

    /// Softmax along the last axis restricted to entries where `mask` is
    /// true; masked entries get probability zero. `mask` has one flag per
    /// element and every slice must allow at least one entry.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Var<'t>> {
        let (shape, out) = self.with_data(|s, d| {
            if mask.len() != d.len() {
                return Err(Error::dim("masked_softmax", s, &[mask.len()]));
            }
            let k = *s.last().unwrap();
            let mut out = vec![0.0; d.len()];
            for ((xr, mr), or) in d.chunks_exact(k).zip(mask.chunks_exact(k)).zip(out.chunks_exact_mut(k)) {
                if !mr.iter().any(|&m| m) {
                    return Err(Error::Contract("softmax slice with every entry masked".into()));
                }
                kernels::softmax_slice(xr, Some(mr), or);
            }
            Ok((s.to_vec(), out))
        })?;
        Ok(self.unary(shape, out, Op::Softmax(self.id)))
    }

    pub fn gelu(&self) -> Var<'t> {
        let (shape, out) = self.with_data(|s, d| (s.to_vec(), d.iter().map(|&v| kernels::gelu(v)).collect()));
        self.unary(shape, out, Op::Gelu(self.id))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&self, floor: f64) -> Var<'t> {
        let (shape, out) = self.with_data(|s, d| (s.to_vec(), d.iter().map(|&v| v.max(floor).ln()).collect()));
        self.unary(shape, out, Op::LogFloor(self.id, floor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(vec![0.3, -1.0, 2.0]).trained());
        tape.backward(w.sum()).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn scaled_sum_gives_twos() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(vec![0.3, -1.0]).trained());
        tape.backward(w.scale(2.0).sum()).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).trained());
        let loss = w.scale(3.0).sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[6.0, 6.0]);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).trained());
        let unused = tape.leaf(&Tensor::from_vec(vec![5.0]).trained());
        tape.backward(w.sum()).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).trained());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let w = tape.leaf(&Tensor::from_vec(vec![1.0, 1.0]).trained());
        tape.backward(c.add(w).unwrap().sum()).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(err.to_string(), "dimension mismatch in matmul: [2, 3] vs [2, 3]");
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "non-finite")]
    fn non_finite_values_trip_the_debug_assertion() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![f64::MAX]));
        let _ = a.scale(10.0);
    }

    #[test]
    fn unchecked_tape_lets_non_finite_through() {
        let tape = Tape::unchecked();
        let a = tape.constant(Tensor::from_vec(vec![f64::MAX]));
        assert!(a.scale(10.0).item().unwrap().is_infinite());
    }
}
