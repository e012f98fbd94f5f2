//! Tape-based reverse-mode differentiation over the small set of ops the
//! transformer uses.
//!
//! Every kernel computes an output row from the matching input row (plus the
//! keys it is allowed to see) in a fixed order, so a sequence evaluated in
//! chunks against a cache produces bitwise the same rows as a single pass.

use crate::model::params::{ParamId, Parameters};
use crate::par;
use crate::tensor::Tensor;

const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Keys and values that precede the keys computed in this graph. They are
/// constants: no gradient flows into them.
#[derive(Debug, Clone, Copy)]
pub struct KvPrefix<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub len: usize,
}

impl KvPrefix<'_> {
    pub const EMPTY: KvPrefix<'static> = KvPrefix {
        keys: &[],
        values: &[],
        len: 0,
    };
}

/// Which (query, key) pairs may attend. Key index `j` runs over the prefix
/// first, then over the keys computed in the graph.
#[derive(Debug, Clone, Copy)]
pub enum AttnMask<'a> {
    /// Query `i` sees keys `0..=offset + i`.
    Causal { offset: usize },
    /// Every prefix key is visible; among the new keys, `block[i * n + j]`
    /// decides (all visible when `None`).
    PrefixThenBlock { block: Option<&'a [bool]> },
    /// Explicit `[n × (prefix + n_new)]` matrix.
    Dense(&'a [bool]),
}

impl AttnMask<'_> {
    #[inline]
    fn allowed(&self, i: usize, j: usize, prefix: usize, n_new: usize, m: usize) -> bool {
        match *self {
            AttnMask::Causal { offset } => j <= offset + i,
            AttnMask::PrefixThenBlock { block } => {
                j < prefix || block.is_none_or(|b| b[i * n_new + (j - prefix)])
            }
            AttnMask::Dense(mask) => mask[i * m + j],
        }
    }
}

enum Op<'a> {
    Input,
    Embed {
        ids: Vec<u32>,
        table: ParamId,
        mask_row: ParamId,
    },
    MatMul {
        x: NodeId,
        w: ParamId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        b: ParamId,
    },
    RmsNorm {
        x: NodeId,
        gain: ParamId,
        inv_rms: Vec<f32>,
    },
    Rope {
        x: NodeId,
        positions: Vec<usize>,
    },
    Gelu {
        x: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: KvPrefix<'a>,
        /// `[n][heads][m]`, only kept when a gradient is needed.
        probs: Vec<f32>,
    },
}

struct Node<'a> {
    value: Tensor,
    op: Op<'a>,
    needs_grad: bool,
}

/// Per-parameter gradients. `None` for parameters that were not trainable in
/// the graph that produced them.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn global_norm(&self) -> f32 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Element-wise accumulate `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }
}

pub struct Graph<'a> {
    params: &'a Parameters,
    trainable: Vec<bool>,
    nodes: Vec<Node<'a>>,
    n_heads: usize,
    d_head: usize,
    rope_base: f32,
}

impl<'a> Graph<'a> {
    /// A graph where gradients flow into the listed parameters only.
    pub fn new(params: &'a Parameters, trainable: &[ParamId]) -> Self {
        let mut flags = vec![false; params.len()];
        for id in trainable {
            flags[id.0] = true;
        }
        let cfg = &params.config;
        Self {
            params,
            trainable: flags,
            nodes: Vec::new(),
            n_heads: cfg.n_heads,
            d_head: cfg.d_head(),
            rope_base: cfg.rope_base,
        }
    }

    pub fn params(&self) -> &'a Parameters {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros(0, 0))
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn tr(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Gather embedding rows. Ids below the table size index `table`; any
    /// other id selects the single row of `mask_row`.
    pub fn embed(&mut self, ids: &[u32], table: ParamId, mask_row: ParamId) -> NodeId {
        let t = self.params.get(table);
        let m = self.params.get(mask_row);
        let d = t.cols;
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            let src = if (id as usize) < t.rows {
                t.row(id as usize)
            } else {
                m.row(0)
            };
            out.row_mut(r).copy_from_slice(src);
        }
        let ng = self.tr(table) || self.tr(mask_row);
        self.push(
            out,
            Op::Embed {
                ids: ids.to_vec(),
                table,
                mask_row,
            },
            ng,
        )
    }

    pub fn matmul(&mut self, x: NodeId, w: ParamId) -> NodeId {
        let out = self.value(x).matmul(self.params.get(w));
        let ng = self.ng(x) || self.tr(w);
        self.push(out, Op::MatMul { x, w }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.data.len(), bv.data.len());
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn add_bias(&mut self, x: NodeId, b: ParamId) -> NodeId {
        let mut out = self.value(x).clone();
        let bias = self.params.get(b);
        for r in 0..out.rows {
            for (o, &c) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += c;
            }
        }
        let ng = self.ng(x) || self.tr(b);
        self.push(out, Op::AddBias { x, b }, ng)
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: ParamId) -> NodeId {
        let xv = self.value(x);
        let g = &self.params.get(gain).data;
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f32>() / xv.cols as f32;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gg) in out.row_mut(r).iter_mut().zip(row).zip(g) {
                *o = v * inv * gg;
            }
        }
        let ng = self.ng(x) || self.tr(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    fn rope_angles(&self, pos: usize) -> Vec<(f32, f32)> {
        let half = self.d_head / 2;
        (0..half)
            .map(|i| {
                let freq = (self.rope_base as f64).powf(-2.0 * i as f64 / self.d_head as f64);
                let theta = pos as f64 * freq;
                (theta.cos() as f32, theta.sin() as f32)
            })
            .collect()
    }

    /// Rotary position encoding applied per head on adjacent pairs.
    pub fn rope(&mut self, x: NodeId, positions: &[usize]) -> NodeId {
        let mut out = self.value(x).clone();
        assert_eq!(out.rows, positions.len());
        for (r, &pos) in positions.iter().enumerate() {
            let angles = self.rope_angles(pos);
            let row = out.row_mut(r);
            for h in 0..self.n_heads {
                let base = h * self.d_head;
                for (i, &(c, s)) in angles.iter().enumerate() {
                    let a = row[base + 2 * i];
                    let b = row[base + 2 * i + 1];
                    row[base + 2 * i] = a * c - b * s;
                    row[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_vec(xv.rows, xv.cols, data);
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Multi-head scaled dot-product attention over `[prefix ‖ k]`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: KvPrefix<'a>,
        mask: AttnMask<'a>,
    ) -> NodeId {
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let n = qv.rows;
        let d = qv.cols;
        let n_new = kv.rows;
        let p = prefix.len;
        let m = p + n_new;
        let heads = self.n_heads;
        let dh = self.d_head;
        let scale = 1.0 / (dh as f32).sqrt();
        if let AttnMask::Dense(mk) = mask {
            assert_eq!(mk.len(), n * m, "dense mask shape mismatch");
        }
        let key = |j: usize| -> &[f32] {
            if j < p {
                &prefix.keys[j * d..(j + 1) * d]
            } else {
                kv.row(j - p)
            }
        };
        let val = |j: usize| -> &[f32] {
            if j < p {
                &prefix.values[j * d..(j + 1) * d]
            } else {
                vv.row(j - p)
            }
        };
        let mut out = Tensor::zeros(n, d);
        let mut probs = if ng {
            vec![0.0f32; n * heads * m]
        } else {
            Vec::new()
        };
        let pw = if ng { heads * m } else { 0 };
        par::for_each_row2(&mut out.data, d, &mut probs, pw, m * d, |i, orow, prow| {
            let qrow = qv.row(i);
            let mut scores = vec![f32::NEG_INFINITY; m];
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                let qh = &qrow[hs.clone()];
                let mut max = f32::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    if mask.allowed(i, j, p, n_new, m) {
                        let kh = &key(j)[hs.clone()];
                        let sc = crate::tensor::dot(qh, kh) * scale;
                        *s = sc;
                        if sc > max {
                            max = sc;
                        }
                    } else {
                        *s = f32::NEG_INFINITY;
                    }
                }
                let mut sum = 0.0f32;
                for s in scores.iter_mut() {
                    if *s != f32::NEG_INFINITY {
                        *s = (*s - max).exp();
                        sum += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                let oh = &mut orow[hs.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    if *s == 0.0 {
                        continue;
                    }
                    *s /= sum;
                    let vh = &val(j)[hs.clone()];
                    for (o, &x) in oh.iter_mut().zip(vh) {
                        *o += *s * x;
                    }
                }
                if !prow.is_empty() {
                    prow[h * m..(h + 1) * m].copy_from_slice(&scores);
                }
            }
        });
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                prefix,
                probs,
            },
            ng,
        )
    }

    /// Back-propagate `seed` (the gradient of the loss w.r.t. `root`).
    pub fn backward(&self, root: NodeId, seed: Tensor) -> Gradients {
        let mut grads = Gradients::empty(self.params.len());
        for (i, &t) in self.trainable.iter().enumerate() {
            if t {
                grads.grads[i] = Some(vec![0.0; self.params.get(ParamId(i)).numel()]);
            }
        }
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = node_grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Embed {
                    ids,
                    table,
                    mask_row,
                } => {
                    let rows = self.params.get(*table).rows;
                    let d = dy.cols;
                    for (r, &id) in ids.iter().enumerate() {
                        let (pid, off) = if (id as usize) < rows {
                            (*table, id as usize * d)
                        } else {
                            (*mask_row, 0)
                        };
                        if let Some(g) = grads.grads[pid.0].as_mut() {
                            for (a, &b) in g[off..off + d].iter_mut().zip(dy.row(r)) {
                                *a += b;
                            }
                        }
                    }
                }
                Op::MatMul { x, w } => {
                    let wt = self.params.get(*w);
                    if let Some(g) = grads.grads[w.0].as_mut() {
                        self.value(*x).t_matmul_acc(&dy, g);
                    }
                    if self.ng(*x) {
                        let dx = dy.matmul_t(wt);
                        accum(&mut node_grads, *x, dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.ng(*a) {
                        accum(&mut node_grads, *a, dy.clone());
                    }
                    if self.ng(*b) {
                        accum(&mut node_grads, *b, dy);
                    }
                }
                Op::AddBias { x, b } => {
                    if let Some(g) = grads.grads[b.0].as_mut() {
                        for r in 0..dy.rows {
                            for (a, &v) in g.iter_mut().zip(dy.row(r)) {
                                *a += v;
                            }
                        }
                    }
                    if self.ng(*x) {
                        accum(&mut node_grads, *x, dy);
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let g = &self.params.get(*gain).data;
                    let d = xv.cols as f32;
                    if let Some(gg) = grads.grads[gain.0].as_mut() {
                        for r in 0..xv.rows {
                            let inv = inv_rms[r];
                            for ((a, &dyv), &xx) in gg.iter_mut().zip(dy.row(r)).zip(xv.row(r)) {
                                *a += dyv * xx * inv;
                            }
                        }
                    }
                    if self.ng(*x) {
                        let mut dx = Tensor::zeros(xv.rows, xv.cols);
                        for r in 0..xv.rows {
                            let inv = inv_rms[r];
                            let xr = xv.row(r);
                            let dyr = dy.row(r);
                            let dot: f32 = dyr
                                .iter()
                                .zip(g)
                                .zip(xr)
                                .map(|((a, b), c)| a * b * c)
                                .sum();
                            let coef = inv * inv * inv * dot / d;
                            for (((o, &dyv), &gv), &xx) in
                                dx.row_mut(r).iter_mut().zip(dyr).zip(g).zip(xr)
                            {
                                *o = inv * gv * dyv - coef * xx;
                            }
                        }
                        accum(&mut node_grads, *x, dx);
                    }
                }
                Op::Rope { x, positions } => {
                    let mut dx = dy;
                    for (r, &pos) in positions.iter().enumerate() {
                        let angles = self.rope_angles(pos);
                        let row = dx.row_mut(r);
                        for h in 0..self.n_heads {
                            let base = h * self.d_head;
                            for (i, &(c, s)) in angles.iter().enumerate() {
                                let a = row[base + 2 * i];
                                let b = row[base + 2 * i + 1];
                                row[base + 2 * i] = a * c + b * s;
                                row[base + 2 * i + 1] = -a * s + b * c;
                            }
                        }
                    }
                    accum(&mut node_grads, *x, dx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&dy.data)
                        .map(|(&v, &g)| g * gelu_grad(v))
                        .collect();
                    accum(&mut node_grads, *x, Tensor::from_vec(xv.rows, xv.cols, data));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    prefix,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, prefix, probs, &dy);
                    if self.ng(*q) {
                        accum(&mut node_grads, *q, dq);
                    }
                    if self.ng(*k) {
                        accum(&mut node_grads, *k, dk);
                    }
                    if self.ng(*v) {
                        accum(&mut node_grads, *v, dv);
                    }
                }
            }
        }
        grads
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: &KvPrefix<'a>,
        probs: &[f32],
        dy: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let n = qv.rows;
        let d = qv.cols;
        let p = prefix.len;
        let n_new = kv.rows;
        let m = p + n_new;
        let heads = self.n_heads;
        let dh = self.d_head;
        let scale = 1.0 / (dh as f32).sqrt();
        let key = |j: usize| -> &[f32] {
            if j < p {
                &prefix.keys[j * d..(j + 1) * d]
            } else {
                kv.row(j - p)
            }
        };
        let val = |j: usize| -> &[f32] {
            if j < p {
                &prefix.values[j * d..(j + 1) * d]
            } else {
                vv.row(j - p)
            }
        };
        let mut dq = Tensor::zeros(n, d);
        let mut dk = Tensor::zeros(n_new, d);
        let mut dv = Tensor::zeros(n_new, d);
        let mut dp = vec![0.0f32; m];
        for i in 0..n {
            let dyr = dy.row(i);
            let qrow = qv.row(i);
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                let prow = &probs[(i * heads + h) * m..(i * heads + h + 1) * m];
                let doh = &dyr[hs.clone()];
                let mut sum_pd = 0.0f32;
                for j in 0..m {
                    if prow[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    dp[j] = crate::tensor::dot(doh, &val(j)[hs.clone()]);
                    sum_pd += prow[j] * dp[j];
                }
                for j in 0..m {
                    let pj = prow[j];
                    if pj == 0.0 {
                        continue;
                    }
                    let ds = pj * (dp[j] - sum_pd) * scale;
                    let kh = &key(j)[hs.clone()];
                    for (o, &x) in dq.row_mut(i)[hs.clone()].iter_mut().zip(kh) {
                        *o += ds * x;
                    }
                    if j >= p {
                        let r = j - p;
                        for (o, &x) in dk.row_mut(r)[hs.clone()].iter_mut().zip(&qrow[hs.clone()]) {
                            *o += ds * x;
                        }
                        for (o, &x) in dv.row_mut(r)[hs.clone()].iter_mut().zip(doh) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accum(node_grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut node_grads[id.0] {
        Some(existing) => existing
            .data
            .iter_mut()
            .zip(&g.data)
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
