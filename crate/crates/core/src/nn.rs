//! Dense tensors, a reverse-mode tape over row-major matrices, named
//! parameters and the two adaptive optimizers used by the pipeline.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, o: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// `a · b` for row-major matrices.
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let av = a.data[i * a.cols + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`.
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`.
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let mut out = Tensor::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (k, av) in ar.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors; insertion order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter `{name}`");
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform ±1/√fan_in initialization.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let b = bias.then(|| store.add_uniform(&format!("{name}.b"), 1, fan_out, fan_in, rng));
        Self { w, b }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(fan_in, fan_out));
        Self { w, b: None }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    SegmentMax(NodeId, Vec<usize>),
    SegmentMean(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        tokens: usize,
        heads: usize,
        weights: Vec<f64>,
    },
    Mse(NodeId, Tensor),
    BceLogits(NodeId, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass recorded for differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    /// Dense per-parameter gradients (zeros where the parameter was unused).
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| self.params[id.0].clone().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn input_var(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        let n = self.push(self.params.get(id).clone(), Op::Param(id), true);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.rows == 1 && rv.cols == av.cols, "add_row shape mismatch");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shape mismatch");
        let mut v = av.clone();
        v.add_assign(bv);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let av = self.value(a);
        let v = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| x * s).collect());
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| x * sigmoid(*x)).collect());
        let ng = self.ng(&[a]);
        self.push(v, Op::Silu(a), ng)
    }

    /// Column-wise max over consecutive row groups of size `group`.
    pub fn segment_max(&mut self, a: NodeId, group: usize) -> NodeId {
        let av = self.value(a);
        assert!(group > 0 && av.rows.is_multiple_of(group), "segment_max group does not divide rows");
        let segs = av.rows / group;
        let mut v = Tensor::zeros(segs, av.cols);
        let mut arg = vec![0usize; segs * av.cols];
        for s in 0..segs {
            for c in 0..av.cols {
                let mut best = s * group;
                for r in s * group + 1..(s + 1) * group {
                    // first maximal row wins, so ties route gradient deterministically
                    if av.get(r, c) > av.get(best, c) {
                        best = r;
                    }
                }
                v.data[s * av.cols + c] = av.get(best, c);
                arg[s * av.cols + c] = best;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SegmentMax(a, arg), ng)
    }

    /// Column-wise mean over consecutive row groups of size `group`.
    pub fn segment_mean(&mut self, a: NodeId, group: usize) -> NodeId {
        let av = self.value(a);
        assert!(group > 0 && av.rows.is_multiple_of(group), "segment_mean group does not divide rows");
        let segs = av.rows / group;
        let mut v = Tensor::zeros(segs, av.cols);
        for r in 0..av.rows {
            let s = r / group;
            for c in 0..av.cols {
                v.data[s * av.cols + c] += av.get(r, c) / group as f64;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SegmentMean(a, group), ng)
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut v = Tensor::zeros(idx.len(), av.cols);
        for (i, r) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(av.row(*r));
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::Gather(a, idx.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let cols = av.cols + bv.cols;
        let mut v = Tensor::zeros(av.rows, cols);
        for r in 0..av.rows {
            v.row_mut(r)[..av.cols].copy_from_slice(av.row(r));
            v.row_mut(r)[av.cols..].copy_from_slice(bv.row(r));
        }
        let ng = self.ng(&[a, b]);
        self.push(v, Op::ConcatCols(a, b), ng)
    }

    /// Multi-head scaled dot-product attention: one query row per sample
    /// against `tokens` key/value rows per sample.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, tokens: usize, heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, d) = (qv.rows, qv.cols);
        assert!(kv.rows == b * tokens && vv.rows == b * tokens, "attention token count mismatch");
        assert!(kv.cols == d && vv.cols == d && d % heads == 0, "attention width mismatch");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(b, d);
        let mut weights = vec![0.0; b * heads * tokens];
        for s in 0..b {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qrow = &qv.row(s)[cols.clone()];
                let w = &mut weights[(s * heads + h) * tokens..(s * heads + h + 1) * tokens];
                for (j, wj) in w.iter_mut().enumerate() {
                    let krow = &kv.row(s * tokens + j)[cols.clone()];
                    *wj = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - m).exp();
                    z += *wj;
                }
                for wj in w.iter_mut() {
                    *wj /= z;
                }
                let orow = &mut out.row_mut(s)[cols.clone()];
                for (j, wj) in w.iter().enumerate() {
                    for (o, x) in orow.iter_mut().zip(&vv.row(s * tokens + j)[cols.clone()]) {
                        *o += wj * x;
                    }
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                weights,
            },
            ng,
        )
    }

    /// Σ (pred − target)² / rows: squared error summed per row, averaged over rows.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> NodeId {
        let pv = self.value(pred);
        assert_eq!((pv.rows, pv.cols), (target.rows, target.cols), "mse shape mismatch");
        let s: f64 = pv.data.iter().zip(&target.data).map(|(p, t)| (p - t) * (p - t)).sum();
        let v = Tensor::from_vec(1, 1, vec![s / pv.rows as f64]);
        let ng = self.ng(&[pred]);
        self.push(v, Op::Mse(pred, target.clone()), ng)
    }

    /// Mean binary cross-entropy of an n×1 logit column against 0/1 targets.
    pub fn bce_logits(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let lv = self.value(logits);
        assert!(lv.cols == 1 && lv.rows == targets.len(), "bce shape mismatch");
        let mut s = 0.0;
        for (x, y) in lv.data.iter().zip(targets) {
            // softplus(x) − y·x, written to avoid overflow
            s += x.max(0.0) + (-x.abs()).exp().ln_1p() - y * x;
        }
        let v = Tensor::from_vec(1, 1, vec![s / targets.len() as f64]);
        let ng = self.ng(&[logits]);
        self.push(v, Op::BceLogits(logits, targets.to_vec()), ng)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, out: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let ov = self.value(out);
        assert_eq!(ov.data.len(), 1, "backward needs a scalar output");
        grads[out.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let want = |id: &NodeId| self.nodes[id.0].needs_grad;
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if want(a) {
                        acc(&mut grads, *a, matmul_bt(&g, self.value(*b)));
                    }
                    if want(b) {
                        acc(&mut grads, *b, matmul_at(self.value(*a), &g));
                    }
                }
                Op::AddRow(a, r) => {
                    if want(r) {
                        let mut s = Tensor::zeros(1, g.cols);
                        for row in 0..g.rows {
                            for (x, y) in s.data.iter_mut().zip(g.row(row)) {
                                *x += y;
                            }
                        }
                        acc(&mut grads, *r, s);
                    }
                    if want(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if want(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if want(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if want(a) {
                        let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                        acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                    }
                    if want(b) {
                        let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                        acc(&mut grads, *b, Tensor::from_vec(g.rows, g.cols, d));
                    }
                }
                Op::Scale(a, s) => {
                    let d = g.data.iter().map(|x| x * s).collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let d = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .map(|(gy, x)| {
                            let s = sigmoid(*x);
                            gy * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    acc(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
                Op::SegmentMax(a, arg) => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.rows, av.cols);
                    for (k, r) in arg.iter().enumerate() {
                        let c = k % av.cols;
                        d.data[r * av.cols + c] += g.data[k];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SegmentMean(a, group) => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        let s = r / group;
                        for c in 0..av.cols {
                            d.data[r * av.cols + c] = g.data[s * av.cols + c] / *group as f64;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Gather(a, idx) => {
                    let av = self.value(*a);
                    let mut d = Tensor::zeros(av.rows, av.cols);
                    for (i, r) in idx.iter().enumerate() {
                        for (x, y) in d.row_mut(*r).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols;
                    if want(a) {
                        let mut d = Tensor::zeros(g.rows, ac);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        }
                        acc(&mut grads, *a, d);
                    }
                    if want(b) {
                        let mut d = Tensor::zeros(g.rows, g.cols - ac);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                        }
                        acc(&mut grads, *b, d);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    tokens,
                    heads,
                    weights,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (b, d) = (qv.rows, qv.cols);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(b, d);
                    let mut gk = Tensor::zeros(kv.rows, d);
                    let mut gv = Tensor::zeros(vv.rows, d);
                    for s in 0..b {
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let w = &weights[(s * heads + h) * tokens..(s * heads + h + 1) * tokens];
                            let go = &g.row(s)[cols.clone()];
                            // dL/dw_j = go · v_j ; softmax backward gives dL/dscore_j
                            let gw: Vec<f64> = (0..*tokens)
                                .map(|j| go.iter().zip(&vv.row(s * tokens + j)[cols.clone()]).map(|(x, y)| x * y).sum())
                                .collect();
                            let dot: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
                            for j in 0..*tokens {
                                let gs = w[j] * (gw[j] - dot) * scale;
                                let row = s * tokens + j;
                                for (c, col) in cols.clone().enumerate() {
                                    gq.data[s * d + col] += gs * kv.get(row, col);
                                    gk.data[row * d + col] += gs * qv.get(s, col);
                                    gv.data[row * d + col] += w[j] * go[c];
                                }
                            }
                        }
                    }
                    if want(q) {
                        acc(&mut grads, *q, gq);
                    }
                    if want(k) {
                        acc(&mut grads, *k, gk);
                    }
                    if want(v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::Mse(p, target) => {
                    let pv = self.value(*p);
                    let f = 2.0 * g.scalar() / pv.rows as f64;
                    let d = pv.data.iter().zip(&target.data).map(|(a, b)| f * (a - b)).collect();
                    acc(&mut grads, *p, Tensor::from_vec(pv.rows, pv.cols, d));
                }
                Op::BceLogits(l, targets) => {
                    let lv = self.value(*l);
                    let f = g.scalar() / targets.len() as f64;
                    let d = lv.data.iter().zip(targets).map(|(x, y)| f * (sigmoid(*x) - y)).collect();
                    acc(&mut grads, *l, Tensor::from_vec(lv.rows, 1, d));
                }
            }
        }

        let mut params = vec![None; self.params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                params[id.0] = grads[i].clone();
            }
        }
        Gradients { params, nodes: grads }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over every tensor of a store.
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let z: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.data.len()]).collect();
        Self {
            cfg,
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c = self.cfg;
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(ParamId(i));
            for (j, gj) in g.data.iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = c.beta1 * *m + (1.0 - c.beta1) * gj;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gj * gj;
                p.data[j] -= c.lr * (*m / b1t) / ((*v / b2t).sqrt() + c.eps);
            }
        }
    }
}

/// Adamax (infinity-norm Adam) over a flat parameter vector with per-coordinate rates.
#[derive(Clone, Debug)]
pub struct Adamax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    u: Vec<f64>,
    t: u64,
}

impl Adamax {
    pub fn new(dim: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            u: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) {
        self.t += 1;
        let corr = 1.0 - self.beta1.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.u[i] = (self.beta2 * self.u[i]).max(grad[i].abs());
            x[i] -= lr[i] / corr * self.m[i] / (self.u[i] + self.eps);
        }
    }
}

/// Rejects a non-finite loss with the step it occurred at.
pub fn check_loss(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite {
            step,
            what: format!("loss is {loss}"),
        })
    }
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(store: &ParamStore, id: ParamId, j: usize, f: &dyn Fn(&ParamStore) -> f64) -> f64 {
        let h = 1e-5;
        let mut s = store.clone();
        s.get_mut(id).data[j] += h;
        let up = f(&s);
        s.get_mut(id).data[j] -= 2.0 * h;
        let dn = f(&s);
        (up - dn) / (2.0 * h)
    }

    fn check_all(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64, grads: &Gradients) {
        for (id, name, t) in store.iter() {
            for j in 0..t.data.len() {
                let an = grads.param(id).map_or(0.0, |g| g.data[j]);
                let fd = numeric_grad(store, id, j, f);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5 || (an - fd).abs() < 1e-9, "{name}[{j}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 3, 4, true, &mut rng);
        let l2 = Linear::new(&mut store, "l2", 8, 4, true, &mut rng);
        let qk = Linear::new(&mut store, "qk", 4, 4, false, &mut rng);
        let emb = store.add_uniform("emb", 5, 4, 1, &mut rng);
        let x = Tensor::from_vec(6, 3, (0..18).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect());
        let target = Tensor::from_vec(2, 4, (0..8).map(|i| i as f64 / 8.0).collect());
        let f = |s: &ParamStore| -> (f64, Gradients) {
            let mut g = Graph::new(s);
            let xi = g.input(x.clone());
            let h = l1.forward(&mut g, xi);
            let h = g.silu(h);
            let mx = g.segment_max(h, 3);
            let mn = g.segment_mean(h, 3);
            let cat = g.concat_cols(mx, mn);
            let y = l2.forward(&mut g, cat);
            let e = g.param(emb);
            let toks = g.gather(e, &[0, 2, 4, 1, 1, 3]);
            let keys = qk.forward(&mut g, toks);
            let att = g.attention(y, keys, toks, 3, 2);
            let prod = g.mul(att, y);
            let sc = g.scale(prod, 0.7);
            let sum = g.add(sc, y);
            let loss = g.mse(sum, &target);
            let logits = g.gather(sum, &[0, 1]);
            let logits = {
                let w = g.param(qk.w);
                let z = g.matmul(logits, w);
                let one = g.input(Tensor::from_vec(4, 1, vec![0.5, -0.25, 1.0, 0.1]));
                g.matmul(z, one)
            };
            let bce = g.bce_logits(logits, &[1.0, 0.0]);
            let total = g.add(loss, bce);
            let v = g.value(total).scalar();
            (v, g.backward(total))
        };
        let (_, grads) = f(&store);
        check_all(&store, &|s| f(s).0, &grads);
    }

    #[test]
    fn single_token_attention_returns_the_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.input(Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]));
        let k = g.input(Tensor::from_vec(2, 4, vec![0.3; 8]));
        let v = g.input(Tensor::from_vec(2, 4, (0..8).map(|i| i as f64).collect()));
        let o = g.attention(q, k, v, 1, 2);
        assert_eq!(g.value(o), g.value(v));
    }

    #[test]
    fn input_gradients_are_reported() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input_var(Tensor::from_vec(1, 2, vec![1.0, -2.0]));
        let l = g.mse(x, &Tensor::zeros(1, 2));
        let gr = g.backward(l);
        assert_eq!(gr.node(x).unwrap().data, vec![2.0, -4.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(1, 3, vec![3.0, -2.0, 0.5]));
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(p);
                let l = g.mse(x, &Tensor::from_vec(1, 3, vec![1.0, 1.0, 1.0]));
                g.backward(l).dense(&store)
            };
            opt.step(&mut store, &grads);
        }
        for v in &store.get(p).data {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adamax_first_step_moves_by_the_rate() {
        let mut opt = Adamax::new(2);
        let mut x = vec![1.0, 1.0];
        opt.step(&mut x, &[3.0, -0.5], &[0.1, 0.01]);
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] - 1.01).abs() < 1e-6);
    }
}
