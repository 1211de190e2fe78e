//! Define-by-run reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its [`Tensor`] handles. Leaves are
//! either trainable parameters (tagged with a [`ParamId`]) or constants. After the
//! forward pass, [`Graph::backprop`] walks the tape backwards from a scalar loss and
//! returns the gradient of every parameter leaf that the loss depends on.
//!
//! The graph is rebuilt for every training step. Values are never mutated in place,
//! so a handle observed during the forward pass keeps its value until the graph is
//! dropped.

mod array;
mod backward;
mod gradcheck;
mod kernels;

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use array::Array;
pub use gradcheck::{check_gradients, GradCheck};

use kernels::{gemm, softmax_row};

/// Variance floor used by layer normalization.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backprop needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph was built without gradient recording")]
    NotRecorded,
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Identifier of a trainable parameter leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Gradients of every parameter leaf reached from the loss.
#[derive(Debug, Clone, Default)]
pub struct GradientTable {
    grads: BTreeMap<ParamId, Array>,
}

impl GradientTable {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Array)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, shape: &[usize], grad: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, b)| *a += b),
            None => {
                let arr = Array::new(shape.to_vec(), grad.to_vec()).expect("leaf shape");
                self.grads.insert(id, arr);
            }
        }
    }
}

/// Which key positions each query may attend to, shared across heads.
///
/// Scores of shape `[groups * heads, tq, tk]` consult entry `[n / heads, q, k]`.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    groups: usize,
    tq: usize,
    tk: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(groups: usize, tq: usize, tk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != groups * tq * tk {
            return Err(TensorError::Invalid {
                op: "attention_mask",
                msg: format!(
                    "expected {} entries for [{groups}, {tq}, {tk}], got {}",
                    groups * tq * tk,
                    allowed.len()
                ),
            });
        }
        Ok(Self {
            groups,
            tq,
            tk,
            allowed,
        })
    }

    /// Key-padding mask: query `q` of group `g` may see key `k` iff `k < key_lens[g]`,
    /// and additionally `k <= q` when `causal` is set.
    pub fn padding(key_lens: &[usize], tq: usize, tk: usize, causal: bool) -> Self {
        let mut allowed = Vec::with_capacity(key_lens.len() * tq * tk);
        for &len in key_lens {
            for q in 0..tq {
                for k in 0..tk {
                    allowed.push(k < len && (!causal || k <= q));
                }
            }
        }
        Self {
            groups: key_lens.len(),
            tq,
            tk,
            allowed,
        }
    }

    fn row(&self, group: usize, q: usize) -> &[bool] {
        let start = (group * self.tq + q) * self.tk;
        &self.allowed[start..start + self.tk]
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        alpha: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        bias: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Relu {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        x: usize,
        keep: Vec<f64>,
    },
    Reshape {
        x: usize,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Log {
        x: usize,
        floor: f64,
    },
    Sum {
        x: usize,
    },
    WeightedSum {
        x: usize,
        weights: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Tape of operations for one forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records operations for backprop.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// Graph for gradient-free evaluation. `backprop` on it is rejected.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf. Its gradient is reported under `id`.
    pub fn param(&self, id: ParamId, value: &Array) -> Tensor<'_> {
        self.push_leaf(value.shape().to_vec(), value.data().to_vec(), Some(id))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: &Array) -> Tensor<'_> {
        self.push_leaf(value.shape().to_vec(), value.data().to_vec(), None)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor<'_>> {
        let arr = Array::new(shape, data)?;
        Ok(self.push_leaf(arr.shape().to_vec(), arr.into_data(), None))
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, param: Option<ParamId>) -> Tensor<'_> {
        let needs_grad = self.record && param.is_some();
        let id = self.push(Node {
            shape,
            value,
            op: Op::Leaf { param },
            needs_grad,
        });
        Tensor { graph: self, id }
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        if !self.record {
            return false;
        }
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn emit(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Tensor<'_>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self.any_grad(inputs);
        let id = self.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Tensor { graph: self, id })
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.node(self.id).value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Array {
        let node = self.graph.node(self.id);
        Array::new(node.shape.clone(), node.value.clone()).expect("node shape")
    }

    /// Borrow the forward value without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.node(self.id).value)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let node = self.graph.node(self.id);
        assert_eq!(node.value.len(), 1, "item() on non-scalar tensor");
        node.value[0]
    }

    /// `[..., k] x [k, n] -> [..., n]`
    pub fn matmul(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        let (value, shape, rows, k, n) = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(rhs.id);
            let k = *a.shape.last().unwrap();
            if b.shape.len() != 2 || b.shape[0] != k {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let n = b.shape[1];
            let rows = a.value.len() / k;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, 1.0, &a.value, false, &b.value, false, 0.0, &mut out);
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = n;
            (out, shape, rows, k, n)
        };
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            rows,
            k,
            n,
        };
        self.graph
            .emit("matmul", shape, value, op, &[self.id, rhs.id])
    }

    /// Batched product `alpha * A[i] * B[i]` (or `B[i]^T` with `trans_b`) over a leading batch axis.
    pub fn bmm(self, rhs: Tensor<'g>, trans_b: bool, alpha: f64) -> Result<Tensor<'g>> {
        let (value, shape, batch, m, k, n) = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(rhs.id);
            if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] {
                return Err(mismatch("bmm", &a.shape, &b.shape));
            }
            let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
            let (bk, n) = if trans_b {
                (b.shape[2], b.shape[1])
            } else {
                (b.shape[1], b.shape[2])
            };
            if bk != k {
                return Err(mismatch("bmm", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &a.value[i * m * k..(i + 1) * m * k],
                    false,
                    &b.value[i * k * n..(i + 1) * k * n],
                    trans_b,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            (out, vec![batch, m, n], batch, m, k, n)
        };
        let op = Op::BatchMatMul {
            a: self.id,
            b: rhs.id,
            batch,
            m,
            k,
            n,
            trans_b,
            alpha,
        };
        self.graph.emit("bmm", shape, value, op, &[self.id, rhs.id])
    }

    fn zip_same(
        self,
        rhs: Tensor<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let a = self.graph.node(self.id);
        let b = self.graph.node(rhs.id);
        if a.shape != b.shape {
            return Err(mismatch(name, &a.shape, &b.shape));
        }
        let out = a.value.iter().zip(&b.value).map(|(x, y)| f(*x, *y)).collect();
        Ok((out, a.shape.clone()))
    }

    pub fn add(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        let (value, shape) = self.zip_same(rhs, "add", |x, y| x + y)?;
        let op = Op::Add {
            a: self.id,
            b: rhs.id,
        };
        self.graph.emit("add", shape, value, op, &[self.id, rhs.id])
    }

    pub fn mul(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        let (value, shape) = self.zip_same(rhs, "mul", |x, y| x * y)?;
        let op = Op::Mul {
            a: self.id,
            b: rhs.id,
        };
        self.graph.emit("mul", shape, value, op, &[self.id, rhs.id])
    }

    pub fn sub(self, rhs: Tensor<'g>) -> Result<Tensor<'g>> {
        self.add(rhs.scale(-1.0)?)
    }

    /// Adds a `[n]` vector to every row of a `[..., n]` tensor.
    pub fn add_row(self, bias: Tensor<'g>) -> Result<Tensor<'g>> {
        let (value, shape) = {
            let x = self.graph.node(self.id);
            let b = self.graph.node(bias.id);
            let n = *x.shape.last().unwrap();
            if b.value.len() != n || b.shape.len() != 1 {
                return Err(mismatch("add_row", &x.shape, &b.shape));
            }
            let mut out = x.value.clone();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(&b.value).for_each(|(o, v)| *o += v);
            }
            (out, x.shape.clone())
        };
        let op = Op::AddRow {
            x: self.id,
            bias: bias.id,
        };
        self.graph
            .emit("add_row", shape, value, op, &[self.id, bias.id])
    }

    pub fn scale(self, factor: f64) -> Result<Tensor<'g>> {
        let (value, shape) = {
            let x = self.graph.node(self.id);
            (x.value.iter().map(|v| v * factor).collect(), x.shape.clone())
        };
        let op = Op::Scale { x: self.id, factor };
        self.graph.emit("scale", shape, value, op, &[self.id])
    }

    pub fn relu(self) -> Result<Tensor<'g>> {
        let (value, shape) = {
            let x = self.graph.node(self.id);
            (x.value.iter().map(|v| v.max(0.0)).collect(), x.shape.clone())
        };
        self.graph
            .emit("relu", shape, value, Op::Relu { x: self.id }, &[self.id])
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Tensor<'g>> {
        let (value, shape) = {
            let x = self.graph.node(self.id);
            let d = *x.shape.last().unwrap();
            let mut out = vec![0.0; x.value.len()];
            for (xr, or) in x.value.chunks(d).zip(out.chunks_mut(d)) {
                softmax_row(xr, None, or);
            }
            (out, x.shape.clone())
        };
        self.graph
            .emit("softmax", shape, value, Op::Softmax { x: self.id }, &[self.id])
    }

    /// Softmax over attention scores `[groups * heads, tq, tk]`; disallowed keys get exactly 0.
    pub fn masked_softmax(self, mask: &AttentionMask) -> Result<Tensor<'g>> {
        let (value, shape) = {
            let x = self.graph.node(self.id);
            let ok = x.shape.len() == 3
                && x.shape[1] == mask.tq
                && x.shape[2] == mask.tk
                && mask.groups > 0
                && x.shape[0] % mask.groups == 0;
            if !ok {
                return Err(mismatch(
                    "masked_softmax",
                    &x.shape,
                    &[mask.groups, mask.tq, mask.tk],
                ));
            }
            let heads = x.shape[0] / mask.groups;
            let (tq, tk) = (mask.tq, mask.tk);
            let mut out = vec![0.0; x.value.len()];
            for n in 0..x.shape[0] {
                for q in 0..tq {
                    let s = (n * tq + q) * tk;
                    softmax_row(
                        &x.value[s..s + tk],
                        Some(mask.row(n / heads, q)),
                        &mut out[s..s + tk],
                    );
                }
            }
            (out, x.shape.clone())
        };
        self.graph.emit(
            "masked_softmax",
            shape,
            value,
            Op::Softmax { x: self.id },
            &[self.id],
        )
    }

    /// Layer normalization over the last axis with learned gain and offset.
    pub fn layer_norm(self, gain: Tensor<'g>, bias: Tensor<'g>) -> Result<Tensor<'g>> {
        let (value, shape, xhat, inv_std, floored) = {
            let x = self.graph.node(self.id);
            let g = self.graph.node(gain.id);
            let b = self.graph.node(bias.id);
            let d = *x.shape.last().unwrap();
            if g.value.len() != d || b.value.len() != d {
                return Err(mismatch("layer_norm", &x.shape, &g.shape));
            }
            let rows = x.value.len() / d;
            let mut out = vec![0.0; x.value.len()];
            let mut xhat = vec![0.0; x.value.len()];
            let mut inv_std = vec![0.0; rows];
            let mut floored = vec![false; rows];
            for r in 0..rows {
                let xr = &x.value[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                floored[r] = var < LAYER_NORM_VAR_FLOOR;
                let is = 1.0 / var.max(LAYER_NORM_VAR_FLOOR).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (xr[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.value[j] + b.value[j];
                }
            }
            (out, x.shape.clone(), xhat, inv_std, floored)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
            floored,
        };
        self.graph
            .emit("layer_norm", shape, value, op, &[self.id, gain.id, bias.id])
    }

    /// Row lookup into a `[vocab, d]` table; output is `[ids.len(), d]`.
    pub fn embedding(self, ids: &[usize]) -> Result<Tensor<'g>> {
        let (value, shape) = {
            let t = self.graph.node(self.id);
            if t.shape.len() != 2 {
                return Err(mismatch("embedding", &t.shape, &[ids.len()]));
            }
            let (vocab, d) = (t.shape[0], t.shape[1]);
            if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                return Err(TensorError::Invalid {
                    op: "embedding",
                    msg: format!("id {bad} outside table of {vocab} rows"),
                });
            }
            if ids.is_empty() {
                return Err(TensorError::Invalid {
                    op: "embedding",
                    msg: "no ids to look up".into(),
                });
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&t.value[i * d..(i + 1) * d]);
            }
            (out, vec![ids.len(), d])
        };
        let op = Op::Embedding {
            table: self.id,
            ids: ids.to_vec(),
        };
        self.graph.emit("embedding", shape, value, op, &[self.id])
    }

    /// Inverted dropout. `rng = None` (evaluation mode) or `p = 0` returns the input unchanged.
    pub fn dropout(self, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        let rng = match rng {
            Some(rng) if p > 0.0 => rng,
            _ => return Ok(self),
        };
        let (value, shape, keep) = {
            let x = self.graph.node(self.id);
            let scale = 1.0 / (1.0 - p);
            let keep: Vec<f64> = (0..x.value.len())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
                .collect();
            let out = x.value.iter().zip(&keep).map(|(v, k)| v * k).collect();
            (out, x.shape.clone(), keep)
        };
        let op = Op::Dropout { x: self.id, keep };
        self.graph.emit("dropout", shape, value, op, &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'g>> {
        let value = {
            let x = self.graph.node(self.id);
            if shape.iter().product::<usize>() != x.value.len() || shape.contains(&0) {
                return Err(mismatch("reshape", &x.shape, shape));
            }
            x.value.clone()
        };
        self.graph.emit(
            "reshape",
            shape.to_vec(),
            value,
            Op::Reshape { x: self.id },
            &[self.id],
        )
    }

    /// `[batch * len, heads * dh] -> [batch * heads, len, dh]`
    pub fn split_heads(self, batch: usize, len: usize, heads: usize) -> Result<Tensor<'g>> {
        let (value, dh) = {
            let x = self.graph.node(self.id);
            let d = *x.shape.last().unwrap();
            if x.value.len() != batch * len * d || heads == 0 || d % heads != 0 {
                return Err(mismatch("split_heads", &x.shape, &[batch, len, heads]));
            }
            let dh = d / heads;
            let mut out = vec![0.0; x.value.len()];
            for b in 0..batch {
                for t in 0..len {
                    let src = (b * len + t) * d;
                    for h in 0..heads {
                        let dst = ((b * heads + h) * len + t) * dh;
                        out[dst..dst + dh].copy_from_slice(&x.value[src + h * dh..src + (h + 1) * dh]);
                    }
                }
            }
            (out, dh)
        };
        let op = Op::SplitHeads {
            x: self.id,
            batch,
            len,
            heads,
        };
        self.graph.emit(
            "split_heads",
            vec![batch * heads, len, dh],
            value,
            op,
            &[self.id],
        )
    }

    /// `[batch * heads, len, dh] -> [batch * len, heads * dh]`
    pub fn merge_heads(self, batch: usize, len: usize, heads: usize) -> Result<Tensor<'g>> {
        let (value, d) = {
            let x = self.graph.node(self.id);
            if x.shape.len() != 3 || x.shape[0] != batch * heads || x.shape[1] != len {
                return Err(mismatch("merge_heads", &x.shape, &[batch, len, heads]));
            }
            let dh = x.shape[2];
            let d = heads * dh;
            let mut out = vec![0.0; x.value.len()];
            for b in 0..batch {
                for t in 0..len {
                    let dst = (b * len + t) * d;
                    for h in 0..heads {
                        let src = ((b * heads + h) * len + t) * dh;
                        out[dst + h * dh..dst + (h + 1) * dh].copy_from_slice(&x.value[src..src + dh]);
                    }
                }
            }
            (out, d)
        };
        let op = Op::MergeHeads {
            x: self.id,
            batch,
            len,
            heads,
        };
        self.graph
            .emit("merge_heads", vec![batch * len, d], value, op, &[self.id])
    }

    /// Selects rows of a tensor viewed as `[rows, last_dim]`.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Tensor<'g>> {
        let (value, d) = {
            let x = self.graph.node(self.id);
            let d = *x.shape.last().unwrap();
            let n = x.value.len() / d;
            if rows.is_empty() {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: "empty row selection".into(),
                });
            }
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {bad} outside {n} rows"),
                });
            }
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                out.extend_from_slice(&x.value[r * d..(r + 1) * d]);
            }
            (out, d)
        };
        let op = Op::GatherRows {
            x: self.id,
            rows: rows.to_vec(),
        };
        self.graph
            .emit("gather_rows", vec![rows.len(), d], value, op, &[self.id])
    }

    /// Elementwise `ln(max(x, floor))`; no gradient flows where the floor is active.
    pub fn log(self, floor: f64) -> Result<Tensor<'g>> {
        let (value, shape) = {
            let x = self.graph.node(self.id);
            (
                x.value.iter().map(|v| v.max(floor).ln()).collect(),
                x.shape.clone(),
            )
        };
        self.graph
            .emit("log", shape, value, Op::Log { x: self.id, floor }, &[self.id])
    }

    pub fn sum(self) -> Result<Tensor<'g>> {
        let value = self.with_data(|d| d.iter().sum::<f64>());
        self.graph
            .emit("sum", vec![1], vec![value], Op::Sum { x: self.id }, &[self.id])
    }

    /// `sum(x * weights)` with constant weights of the same length.
    pub fn weighted_sum(self, weights: Vec<f64>) -> Result<Tensor<'g>> {
        let value = {
            let x = self.graph.node(self.id);
            if weights.len() != x.value.len() {
                return Err(mismatch("weighted_sum", &x.shape, &[weights.len()]));
            }
            x.value.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let op = Op::WeightedSum { x: self.id, weights };
        self.graph.emit("weighted_sum", vec![1], vec![value], op, &[self.id])
    }
}

#[cfg(test)]
mod tests;
