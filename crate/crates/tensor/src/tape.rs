use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{mismatch, Result, TensorError};
use crate::kernels::{self, Layout};
use crate::tensor::Tensor;

/// Records operations in execution order so they can be replayed backwards.
///
/// Nodes are only ever appended, so every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddBroadcast { x: usize, y: usize },
    Gelu { x: usize },
    Log { x: usize },
    Softmax { x: usize, n: usize },
    LogSoftmax { x: usize, n: usize },
    Sum { x: usize },
    Mean { x: usize },
    MeanRows { x: usize, rows: usize, cols: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        k: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        dims: AttnDims,
        probs: Vec<f64>,
    },
    AssembleTokens {
        specials: Vec<usize>,
        patches: usize,
        batch: usize,
        np: usize,
        d: usize,
    },
    SelectToken {
        x: usize,
        batch: usize,
        tokens: usize,
        index: usize,
        d: usize,
    },
    Reshape { x: usize },
}

#[derive(Clone, Copy)]
struct AttnDims {
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    dk: usize,
    dv: usize,
    scale: f64,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: *const Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` is a leaf that
    /// requires a gradient and was reachable from the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        if !std::ptr::eq(self.tape, var.tape) {
            return None;
        }
        self.grads.get(var.id)?.as_deref()
    }

    /// Moves the gradient out of the set.
    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        if !std::ptr::eq(self.tape, var.tape) {
            return None;
        }
        self.grads.get_mut(var.id)?.take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a copy of `tensor` as an input of the computation.
    pub fn leaf(&self, tensor: &Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Rc::new(tensor.data().to_vec()),
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.leaf(tensor, false)
    }

    /// Records `tensor` honouring its own `requires_grad` flag.
    pub fn input(&self, tensor: &Tensor) -> Var<'_> {
        self.leaf(tensor, tensor.requires_grad())
    }

    fn push(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var<'_>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op_name));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn value_of(&self, id: usize) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn owns(&self, var: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(TensorError::DetachedNode)
        }
    }

    /// Single-head scaled dot-product attention,
    /// `softmax(q kᵀ / sqrt(d_k)) v`, for `q: [tq×d_k]`, `k: [tk×d_k]`,
    /// `v: [tk×d_v]`.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        d_k: usize,
    ) -> Result<Var<'t>> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return Err(mismatch("attention", "q, k, v must be 2-D"));
        }
        if qs[1] != d_k || ks[1] != d_k {
            return Err(mismatch(
                "attention",
                format!("q {qs:?} and k {ks:?} must have last dim {d_k}"),
            ));
        }
        if ks[0] != vs[0] {
            return Err(mismatch(
                "attention",
                format!("k {ks:?} and v {vs:?} token counts differ"),
            ));
        }
        let dims = AttnDims {
            batch: 1,
            heads: 1,
            tq: qs[0],
            tk: ks[0],
            dk: d_k,
            dv: vs[1],
            scale: 1.0 / (d_k as f64).sqrt(),
        };
        self.attention_impl(q, k, v, dims)
    }

    /// Multi-head self-attention over a batch of token sequences.
    ///
    /// `q`, `k` and `v` are `[batch·tokens × heads·head_dim]`; heads occupy
    /// consecutive column blocks. Scores are scaled by `1/sqrt(head_dim)`.
    pub fn multi_head_attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        batch: usize,
        heads: usize,
    ) -> Result<Var<'t>> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 2 || qs != ks || qs != vs {
            return Err(mismatch(
                "multi_head_attention",
                format!("q {qs:?}, k {ks:?}, v {vs:?} must be equal 2-D shapes"),
            ));
        }
        if batch == 0 || heads == 0 || qs[0] % batch != 0 || qs[1] % heads != 0 {
            return Err(mismatch(
                "multi_head_attention",
                format!("{qs:?} not divisible into {batch} sequences × {heads} heads"),
            ));
        }
        let tokens = qs[0] / batch;
        let head_dim = qs[1] / heads;
        let dims = AttnDims {
            batch,
            heads,
            tq: tokens,
            tk: tokens,
            dk: head_dim,
            dv: head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        };
        self.attention_impl(q, k, v, dims)
    }

    fn attention_impl<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        dims: AttnDims,
    ) -> Result<Var<'t>> {
        self.owns(q)?;
        self.owns(k)?;
        self.owns(v)?;
        let AttnDims {
            batch,
            heads,
            tq,
            tk,
            dk,
            dv,
            scale,
        } = dims;
        let (qv, kv, vv) = (q.data(), k.data(), v.data());
        let (qw, vw) = (heads * dk, heads * dv);
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; batch * tq * vw];
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tq {
                    let qrow = &qv[(b * tq + i) * qw + h * dk..][..dk];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kv[(b * tk + j) * qw + h * dk..][..dk];
                        *s = kernels::dot(qrow, krow) * scale;
                    }
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    kernels::softmax_into(&scores, p);
                    let orow = &mut out[(b * tq + i) * vw + h * dv..][..dv];
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = &vv[(b * tk + j) * vw + h * dv..][..dv];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        self.push(
            "attention",
            vec![batch * tq, vw],
            out,
            rg,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                dims,
                probs,
            },
        )
    }

    /// Builds token sequences `[special_0, …, special_s, patch_0, …]` per
    /// sample. Each special token is `[d]`; `patches` is `[batch·np × d]`.
    pub fn assemble_tokens<'t>(
        &'t self,
        specials: &[Var<'t>],
        patches: Var<'t>,
        batch: usize,
    ) -> Result<Var<'t>> {
        self.owns(patches)?;
        let ps = patches.shape();
        if ps.len() != 2 || batch == 0 || ps[0] % batch != 0 {
            return Err(mismatch(
                "assemble_tokens",
                format!("patches {ps:?} not divisible into {batch} samples"),
            ));
        }
        let (np, d) = (ps[0] / batch, ps[1]);
        let mut special_vals = Vec::with_capacity(specials.len());
        for s in specials {
            self.owns(*s)?;
            if s.numel() != d {
                return Err(mismatch(
                    "assemble_tokens",
                    format!("special token {:?} vs width {d}", s.shape()),
                ));
            }
            special_vals.push(s.data());
        }
        let pv = patches.data();
        let tokens = specials.len() + np;
        let mut out = Vec::with_capacity(batch * tokens * d);
        for b in 0..batch {
            for s in &special_vals {
                out.extend_from_slice(s);
            }
            out.extend_from_slice(&pv[b * np * d..(b + 1) * np * d]);
        }
        let rg = patches.requires_grad() || specials.iter().any(|s| s.requires_grad());
        self.push(
            "assemble_tokens",
            vec![batch * tokens, d],
            out,
            rg,
            Op::AssembleTokens {
                specials: specials.iter().map(|s| s.id).collect(),
                patches: patches.id,
                batch,
                np,
                d,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.owns(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self as *const Tape,
            grads,
        })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &[f64] { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::gemm(m, n, k, g, Layout::Normal, val(*b), Layout::Transposed, ga, true);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                kernels::gemm(k, m, n, val(*a), Layout::Transposed, g, Layout::Normal, gb, true);
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                add_into(gb, g);
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *d += gi * bi;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (d, gi) in gx.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
        }
        Op::AddBroadcast { x, y } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                add_into(gx, g);
            }
            if let Some(gy) = slot(grads, nodes, *y) {
                let w = gy.len();
                for chunk in g.chunks_exact(w) {
                    add_into(gy, chunk);
                }
            }
        }
        Op::Gelu { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *d += gi * kernels::gelu_derivative(*xi);
                }
            }
        }
        Op::Log { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, gi), xi) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *d += gi / xi;
                }
            }
        }
        Op::Softmax { x, n } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let y = &node.value;
                for ((gxr, gr), yr) in gx.chunks_exact_mut(*n).zip(g.chunks_exact(*n)).zip(y.chunks_exact(*n)) {
                    let s = kernels::dot(gr, yr);
                    for ((d, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - s);
                    }
                }
            }
        }
        Op::LogSoftmax { x, n } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let y = &node.value;
                for ((gxr, gr), yr) in gx.chunks_exact_mut(*n).zip(g.chunks_exact(*n)).zip(y.chunks_exact(*n)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *d += gi - yi.exp() * s;
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let scale = g[0] / gx.len() as f64;
                for d in gx.iter_mut() {
                    *d += scale;
                }
            }
        }
        Op::MeanRows { x, rows, cols } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let inv = 1.0 / *rows as f64;
                for row in gx.chunks_exact_mut(*cols) {
                    for (d, gi) in row.iter_mut().zip(g) {
                        *d += gi * inv;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            xhat,
            inv_std,
        } => {
            let d = *d;
            let gain_v = val(*gain);
            if let Some(gg) = slot(grads, nodes, *gain) {
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((acc, gi), xi) in gg.iter_mut().zip(gr).zip(xr) {
                        *acc += gi * xi;
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *bias) {
                for gr in g.chunks_exact(d) {
                    add_into(gb, gr);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut gxhat = vec![0.0; d];
                for (r, (gxr, gr)) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).enumerate() {
                    let xr = &xhat[r * d..(r + 1) * d];
                    for ((h, gi), w) in gxhat.iter_mut().zip(gr).zip(gain_v) {
                        *h = gi * w;
                    }
                    let sum: f64 = gxhat.iter().sum();
                    let sum_x = kernels::dot(&gxhat, xr);
                    let scale = inv_std[r] / d as f64;
                    for ((out, h), xi) in gxr.iter_mut().zip(&gxhat).zip(xr) {
                        *out += scale * (d as f64 * h - sum - xi * sum_x);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            k,
        } => {
            if let Some(gl) = slot(grads, nodes, *logits) {
                let scale = g[0] / labels.len() as f64;
                for (b, &label) in labels.iter().enumerate() {
                    let row = &mut gl[b * k..(b + 1) * k];
                    let pr = &probs[b * k..(b + 1) * k];
                    for (j, (d, p)) in row.iter_mut().zip(pr).enumerate() {
                        let target = if j == label { 1.0 } else { 0.0 };
                        *d += scale * (p - target);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            dims,
            probs,
        } => attention_backward(nodes, g, grads, (*q, *k, *v), *dims, probs),
        Op::AssembleTokens {
            specials,
            patches,
            batch,
            np,
            d,
        } => {
            let (np, d) = (*np, *d);
            let tokens = specials.len() + np;
            for (s, &sid) in specials.iter().enumerate() {
                if let Some(gs) = slot(grads, nodes, sid) {
                    for b in 0..*batch {
                        add_into(gs, &g[(b * tokens + s) * d..][..d]);
                    }
                }
            }
            if let Some(gp) = slot(grads, nodes, *patches) {
                for b in 0..*batch {
                    let src = &g[(b * tokens + specials.len()) * d..][..np * d];
                    add_into(&mut gp[b * np * d..(b + 1) * np * d], src);
                }
            }
        }
        Op::SelectToken {
            x,
            batch,
            tokens,
            index,
            d,
        } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for b in 0..*batch {
                    let dst = &mut gx[(b * tokens + index) * d..][..*d];
                    add_into(dst, &g[b * d..(b + 1) * d]);
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                add_into(gx, g);
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    (q, k, v): (usize, usize, usize),
    dims: AttnDims,
    probs: &[f64],
) {
    let AttnDims {
        batch,
        heads,
        tq,
        tk,
        dk,
        dv,
        scale,
    } = dims;
    let (qw, vw) = (heads * dk, heads * dv);
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let need_qk = nodes[q].requires_grad || nodes[k].requires_grad;
    let mut gq = nodes[q].requires_grad.then(|| vec![0.0; qv.len()]);
    let mut gk = nodes[k].requires_grad.then(|| vec![0.0; kv.len()]);
    let mut gv = nodes[v].requires_grad.then(|| vec![0.0; vv.len()]);
    let mut dp = vec![0.0; tk];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                let go = &g[(b * tq + i) * vw + h * dv..][..dv];
                if let Some(gv) = gv.as_mut() {
                    for (j, &pj) in p.iter().enumerate() {
                        let dst = &mut gv[(b * tk + j) * vw + h * dv..][..dv];
                        for (d, &x) in dst.iter_mut().zip(go) {
                            *d += pj * x;
                        }
                    }
                }
                if !need_qk {
                    continue;
                }
                for (j, dpj) in dp.iter_mut().enumerate() {
                    *dpj = kernels::dot(go, &vv[(b * tk + j) * vw + h * dv..][..dv]);
                }
                let s = kernels::dot(&dp, p);
                let qrow = &qv[(b * tq + i) * qw + h * dk..][..dk];
                for j in 0..tk {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow_at = (b * tk + j) * qw + h * dk;
                    if let Some(gq) = gq.as_mut() {
                        let dst = &mut gq[(b * tq + i) * qw + h * dk..][..dk];
                        for (d, &x) in dst.iter_mut().zip(&kv[krow_at..krow_at + dk]) {
                            *d += ds * x;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        for (d, &x) in gk[krow_at..krow_at + dk].iter_mut().zip(qrow) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
    }
    for (id, local) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(local) = local {
            if let Some(dst) = slot(grads, nodes, id) {
                add_into(dst, &local);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Shared view of the recorded values.
    pub fn data(&self) -> Rc<Vec<f64>> {
        self.tape.value_of(self.id)
    }

    /// Copies the recorded value out as a standalone tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.data().to_vec()).expect("recorded values are valid")
    }

    pub fn item(&self) -> Result<f64> {
        let data = self.data();
        if data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape()));
        }
        Ok(data[0])
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        self.tape.owns(other)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            &self.data(),
            Layout::Normal,
            &other.data(),
            Layout::Normal,
            &mut out,
            false,
        );
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            "matmul",
            vec![m, n],
            out,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        )
    }

    fn zip_same(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(mismatch(name, format!("{sa:?} vs {sb:?}")));
        }
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        Ok((sa, out))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.zip_same(other, "add", |a, b| a + b)?;
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push("add", shape, out, rg, Op::Add { a: self.id, b: other.id })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = self.zip_same(other, "mul", |a, b| a * b)?;
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push("mul", shape, out, rg, Op::Mul { a: self.id, b: other.id })
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other)?.sum()
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = self.data().iter().map(|v| v * c).collect();
        self.tape.push(
            "scale",
            self.shape(),
            out,
            self.requires_grad(),
            Op::Scale { x: self.id, c },
        )
    }

    /// Adds `other` repeated over the leading axes; `other.shape()` must
    /// equal the trailing dimensions of `self.shape()` (bias-add pattern).
    pub fn add_broadcast(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (sx, sy) = (self.shape(), other.shape());
        let suffix_ok = sy.len() <= sx.len() && sx[sx.len() - sy.len()..] == sy[..];
        if !suffix_ok {
            return Err(mismatch("add_broadcast", format!("{sx:?} + {sy:?}")));
        }
        let y = other.data();
        let mut out = self.data().to_vec();
        for chunk in out.chunks_exact_mut(y.len()) {
            add_into(chunk, &y);
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            "add_broadcast",
            sx,
            out,
            rg,
            Op::AddBroadcast { x: self.id, y: other.id },
        )
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        let out = self.data().iter().map(|&v| kernels::gelu(v)).collect();
        self.tape.push("gelu", self.shape(), out, self.requires_grad(), Op::Gelu { x: self.id })
    }

    /// Natural log; non-positive inputs are reported as non-finite.
    pub fn log(self) -> Result<Var<'t>> {
        let out = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v.ln() } else { f64::NAN })
            .collect();
        self.tape.push("log", self.shape(), out, self.requires_grad(), Op::Log { x: self.id })
    }

    fn last_dim(&self, name: &'static str) -> Result<usize> {
        self.shape()
            .last()
            .copied()
            .ok_or_else(|| mismatch(name, "scalar input has no last axis"))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let n = self.last_dim("softmax")?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (o, r) in out.chunks_exact_mut(n).zip(x.chunks_exact(n)) {
            kernels::softmax_into(r, o);
        }
        self.tape.push(
            "softmax",
            self.shape(),
            out,
            self.requires_grad(),
            Op::Softmax { x: self.id, n },
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let n = self.last_dim("log_softmax")?;
        let x = self.data();
        let mut out = Vec::with_capacity(x.len());
        for r in x.chunks_exact(n) {
            let lse = kernels::log_sum_exp(r);
            out.extend(r.iter().map(|v| v - lse));
        }
        self.tape.push(
            "log_softmax",
            self.shape(),
            out,
            self.requires_grad(),
            Op::LogSoftmax { x: self.id, n },
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.data().iter().sum();
        self.tape.push("sum", Vec::new(), vec![s], self.requires_grad(), Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let data = self.data();
        let s = data.iter().sum::<f64>() / data.len() as f64;
        self.tape.push("mean", Vec::new(), vec![s], self.requires_grad(), Op::Mean { x: self.id })
    }

    /// Mean over the leading axis: `[m × …] -> […]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(mismatch("mean_rows", format!("{shape:?} has no row axis")));
        }
        let rows = shape[0];
        let cols = self.numel() / rows;
        let mut out = vec![0.0; cols];
        for r in self.data().chunks_exact(cols) {
            add_into(&mut out, r);
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.tape.push(
            "mean_rows",
            shape[1..].to_vec(),
            out,
            self.requires_grad(),
            Op::MeanRows { x: self.id, rows, cols },
        )
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gain` and `bias` (both `[d]`).
    pub fn layernorm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain)?;
        self.same_tape(bias)?;
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(format!("layernorm eps {eps} must be positive")));
        }
        let d = self.last_dim("layernorm")?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(mismatch(
                "layernorm",
                format!("gain {:?} / bias {:?} vs width {d}", gain.shape(), bias.shape()),
            ));
        }
        let x = self.data();
        let (gv, bv) = (gain.data(), bias.data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (xr[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        self.tape.push(
            "layernorm",
            self.shape(),
            out,
            rg,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                d,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `[B×K]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(mismatch(
                "cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let r = &x[b * k..(b + 1) * k];
            total += kernels::log_sum_exp(r) - r[label];
            kernels::softmax_into(r, &mut probs[b * k..(b + 1) * k]);
        }
        let loss = total / labels.len() as f64;
        self.tape.push(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
                k,
            },
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        let data = self.data().to_vec();
        self.tape.push("reshape", shape, data, self.requires_grad(), Op::Reshape { x: self.id })
    }

    /// Picks token `index` from each of `batch` sequences stored as
    /// `[batch·tokens × d]`, giving `[batch × d]`.
    pub fn select_token(self, batch: usize, index: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || batch == 0 || shape[0] % batch != 0 || index >= shape[0] / batch {
            return Err(mismatch(
                "select_token",
                format!("{shape:?} with batch {batch}, token {index}"),
            ));
        }
        let (tokens, d) = (shape[0] / batch, shape[1]);
        let x = self.data();
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(&x[(b * tokens + index) * d..][..d]);
        }
        self.tape.push(
            "select_token",
            vec![batch, d],
            out,
            self.requires_grad(),
            Op::SelectToken {
                x: self.id,
                batch,
                tokens,
                index,
                d,
            },
        )
    }
}
